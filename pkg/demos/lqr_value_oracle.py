"""Train the quasi-optimal critic on a noiseless LQR task and compare it with Riccati.

The double integrator has a closed-form optimal value -s'Ps.  The dataset mixes
an optimal, a weak and a random-gain controller, so the expectile critic has to
recover something close to the best behaviour in the data rather than the
average one.

    python3 demos/lqr_value_oracle.py
"""

import numpy as np
import torch

from ipd import envlab, qov, pipeline

pipeline.seed_everything()

env = envlab.lqr_env()
data = envlab.generate_dataset(env, envlab.DEFAULT_MIX["lqr"], 200, seed=0)
print(f"{len(data)} trajectories, {data.n_transitions} transitions")

res = qov.train_qov(data, qov.QovConfig(hidden=(64, 64)), 5000, seed=0)
for rec in res.log[:: max(1, len(res.log) // 5)]:
    print(f"step {rec['step']:5d}  loss_v {rec['loss_v']:.4f}  loss_q {rec['loss_q']:.4f}  "
          f"delta {rec['delta_threshold']:.3f}")

# held-out states drawn from the same box as the initial states
S = np.random.default_rng(1).uniform(-1, 1, (500, env.state_dim))
with torch.no_grad():
    v = res.models.value(torch.as_tensor(S)).numpy()
v_star = envlab.riccati_value(env, S)

# Spearman without scipy: correlation of ranks
rank = lambda x: np.argsort(np.argsort(x))
rho = np.corrcoef(rank(v), rank(v_star))[0, 1]
a = qov.qop_action(res.models, S).ravel()
a_star = envlab.riccati_action(env, S).ravel()
cos = a @ a_star / np.linalg.norm(a) / np.linalg.norm(a_star)
print(f"rank correlation with the Riccati value: {rho:.4f}")
print(f"cosine between the extracted policy and the LQR gain: {cos:.4f}")
