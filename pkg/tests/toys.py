"""Hand-checkable stand-ins for trained critics and world models."""

import math

import numpy as np
import torch

from ipd.diffcore import as_tensor
from ipd.envlab import Dataset, EnvSpec, Trajectory


def scalar_env(max_steps=50):
    return EnvSpec("lqr", 1, 1, np.array([-1.0]), np.array([1.0]), max_steps)


class ToyCritic:
    """V(s) = -c * |s|^2, policy mean -k * s (first action_dim coords), fixed std."""

    def __init__(self, state_dim=1, action_dim=1, k=0.5, c=1.0, std=0.3, bound=1.0):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.k, self.c = k, c
        self.std = torch.full((action_dim,), float(std), dtype=torch.float64)
        self.low = torch.full((action_dim,), -bound, dtype=torch.float64)
        self.high = torch.full((action_dim,), bound, dtype=torch.float64)

    def value(self, s):
        s = as_tensor(s)
        return -self.c * (s * s).sum(-1)

    def policy_mean(self, s):
        return -self.k * as_tensor(s)[..., : self.action_dim]

    def clip_action(self, a):
        return torch.maximum(torch.minimum(as_tensor(a), self.high), self.low)

    def act_mean(self, s):
        return self.clip_action(self.policy_mean(s))

    def policy_std(self):
        return self.std


class ToyModel:
    """s' = s + b * a (action padded with zeros), r = -|s|^2 - |a|^2.

    Members disagree by ``spread * e * |s|^2`` on every coordinate, so
    uncertainty grows away from the origin.
    """

    def __init__(self, state_dim=1, action_dim=1, b=1.0, E=3, spread=0.1, logvar=-4.0):
        self.state_dim, self.action_dim = state_dim, action_dim
        self.b, self.E, self.spread, self.logvar = b, E, spread, logvar
        self.pair_norm = "as_written"

    def _next(self, s, a):
        s, a = as_tensor(s), as_tensor(a)
        pad = torch.zeros(s.shape[:-1] + (self.state_dim - self.action_dim,), dtype=s.dtype)
        return s + self.b * torch.cat([a, pad], dim=-1)

    def _offsets(self, s):
        mag = (s * s).sum(-1, keepdim=True)
        return torch.stack([self.spread * (e - (self.E - 1) / 2) * mag for e in range(self.E)])

    def mean_step(self, s, a):
        s, a = as_tensor(s), as_tensor(a)
        r = -(s * s).sum(-1) - (a * a).sum(-1)
        # symmetric offsets average to exactly zero, so this is the exact base step
        return r, self._next(s, a) + self._offsets(s).mean(0)

    def member_outputs(self, s, a, members=None):
        s = as_tensor(s)
        means = self._next(s, a)[None] + self._offsets(s)
        return means, torch.full_like(means, self.logvar)


def true_scalar_step(s: float, a: float, b: float = 1.0):
    """Plain-float twin of ToyModel with zero spread."""
    return -(s * s) - (a * a), s + b * a


def brute_force_mpc(s: float, grid, critic: ToyCritic, H_m: int, gamma: float, b: float = 1.0) -> float:
    """Exhaustive enumeration, written without torch, in the planner's operation order."""
    best, best_a = -math.inf, None
    for a0 in grid:
        x, total, a = s, 0.0, a0
        for k in range(H_m):
            if k > 0:
                a = min(max(-critic.k * x, -1.0), 1.0)
            r, x = true_scalar_step(x, a, b)
            total = total + gamma**k * r
        total = total + gamma**H_m * (-critic.c * (x * x))
        if total > best:
            best, best_a = total, a0
    return best_a


def random_walk_trajectory(rng, n, state_dim=1, action_dim=1, provenance="real", terminal_end=False):
    s = np.zeros((n + 1, state_dim))
    s[0] = rng.normal(0, 0.5, state_dim)
    a = rng.uniform(-1, 1, (n, action_dim))
    for t in range(n):
        s[t + 1] = s[t]
        s[t + 1, :action_dim] += a[t]
    r = -(s[:-1] ** 2).sum(-1) - (a ** 2).sum(-1)
    term = np.zeros(n, dtype=bool)
    term[-1] = terminal_end
    return Trajectory(s[:-1], a, r, s[1:], term, provenance)


def dataset_of(trajs, env=None):
    return Dataset(list(trajs), env or scalar_env())
