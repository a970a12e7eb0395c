"""How the ensemble world model decides where imagination is allowed.

Trains the three-member world model on PointRing data, calibrates the
reliability threshold from the data's own uncertainty, then runs one round of
augmentation and replays an imagined segment through the frozen model.

    python3 demos/reliable_imagination.py
"""

import numpy as np
import torch

from ipd import envlab, imagine, pipeline, qov, worldmodel

pipeline.seed_everything()

env = envlab.pointring_env()
data = envlab.generate_dataset(env, envlab.DEFAULT_MIX["pointring"], 40, seed=0)
critic = qov.train_qov(data, qov.QovConfig(hidden=(64, 64)), 3000, seed=0).models
wm = worldmodel.train_world_model(data, worldmodel.WmConfig(hidden=(64, 64)), 3000, seed=0).model
reliable = worldmodel.calibrate_kappa(wm, data, 0.95)
print(f"kappa = {reliable.kappa:.4g}")

flat = data.flat()
u_in = worldmodel.uncertainty(wm, flat["states"], flat["actions"])
rng = np.random.default_rng(0)
# far outside the ring corridor and moving fast
far = np.column_stack([rng.uniform(-3, 3, (500, 2)), rng.uniform(-4, 4, (500, 2))])
u_out = worldmodel.uncertainty(wm, far, rng.uniform(-1, 1, (500, 2)))
print(f"median uncertainty: dataset {np.median(u_in):.3g}, off-support {np.median(u_out):.3g}")
print(f"reliable fraction: dataset {np.mean(u_in < reliable.kappa):.2f}, off-support {np.mean(u_out < reliable.kappa):.2f}")

for mode in ("mpc", "greedy"):
    res = imagine.augment_dataset(data, critic, wm, reliable, imagine.AugConfig(N_aug=0.5, mode=mode), seed=0)
    imag = [t for t in res.dataset.trajectories if t.provenance == "imagined"]
    lengths = [len(t) for t in imag]
    print(f"{mode:6s} report {res.report}  mean segment length {np.mean(lengths):.2f}")

# every stored imagined step is the model's own mean prediction, bit for bit
seg = imag[0]
with torch.no_grad():
    r, nxt = wm.mean_step(torch.as_tensor(seg.states.astype(np.float64)),
                          torch.as_tensor(seg.actions.astype(np.float64)))
same = np.array_equal(r.numpy().astype(np.float32), seg.rewards) and \
    np.array_equal(nxt.numpy().astype(np.float32), seg.next_states)
i, t = envlab.decode_source(seg.source_index)
print(f"segment seeded at trajectory {i}, step {t}; bitwise replay: {same}")
