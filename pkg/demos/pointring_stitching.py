"""Stitching two half-expert datasets on PointRing.

Half the trajectories drive from the start to the top of the ring and stop.
The other half begin at the top, idle, then drive to the goal.  No trajectory
covers the whole route, so a policy that beats the best one in the data has
to stitch.  This runs the full chain for one seed at the ``desk`` scale and
compares three arms: IPD, a Decision-Transformer-style baseline (no
augmentation, no Q term, fixed return prompt) and IPD with greedy imagination.
Takes about ten minutes on one core.

    python3 demos/pointring_stitching.py [outdir]
"""

import sys

import numpy as np

from ipd import envlab, pipeline as pl

pl.seed_everything()
out = sys.argv[1] if len(sys.argv) > 1 else "runs/pointring-demo"
cfg = pl.load_config(profile="desk", overrides={"outdir": out})
pl.upstream(cfg)

data = envlab.read_dataset(cfg.dataset_file)
best = max(float(np.sum(t.rewards)) for t in data.trajectories)
print(f"best single trajectory in the data: {best:.2f}")

arms = pl.standard_arms(cfg)
for name in ("ipd", "dt", "greedy"):
    stats = pl.run_cell(cfg.replace(**arms[name]), cfg.seed)
    print(f"{name:7s} mean return {stats.mean_return:8.2f}  std {stats.std_return:5.2f}  "
          f"mean episode length {np.mean(stats.steps):.0f}")
