"""Offline RL by imaginary planning distillation.

Modules, in pipeline order:

``envlab``      toy environments, behaviour data, dataset file format
``qov``         quasi-optimal value function (expectile V, twin Q, AWR actor)
``worldmodel``  Gaussian ensemble dynamics with GJS disagreement
``imagine``     suboptimal-state selection, MPC and dataset augmentation
``seqpolicy``   value-prompted causal Transformer policy
``pipeline``    stage orchestration and sweeps (``python -m ipd``)

``diffcore`` and ``gauss`` hold the shared numerics.
"""

__version__ = "0.1.0"

from . import diffcore, envlab, gauss, imagine, pipeline, qov, seqpolicy, worldmodel  # noqa: E402,F401
