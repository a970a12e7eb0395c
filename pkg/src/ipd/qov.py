"""Quasi-optimal value learning.

Implicit Q-learning with a Huber-expectile value loss whose threshold tracks
a percentile of recent value residuals, twin Q heads with Polyak targets,
and a Gaussian policy extracted by advantage-weighted regression.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .diffcore import (
    DTYPE,
    DenseNetwork,
    NumericError,
    as_tensor,
    load_module_blobs,
    make_adam,
    module_blobs,
    soft_update,
)
from .envlab import Dataset, EnvSpec

log = logging.getLogger(__name__)

LOG_STD_BOUNDS = (-5.0, 2.0)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class QovConfig:
    tau: float = 0.7
    beta: float = 3.0
    delta_percentile: float = 0.96
    gamma: float = 0.99
    soft_update_a: float = 0.005
    lr: float = 3e-4
    error_buffer_capacity: int = 100_000
    hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 256
    delta_refresh: int = 100
    delta_warmup: int = 1000
    delta_default: float = 1.0
    awr_clip: float = 100.0
    dropout: float = 0.01
    log_every: int = 500

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 < self.delta_percentile <= 1.0:
            raise ValueError("delta_percentile must lie in (0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.soft_update_a <= 1.0:
            raise ValueError("soft_update_a must lie in (0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        self.hidden = tuple(self.hidden)


# --------------------------------------------------------------------------
# Losses on residuals
# --------------------------------------------------------------------------


def huber(e, delta_threshold: float):
    """Quadratic inside ``|e| <= delta``, linear outside; C1 at the joint."""
    if not delta_threshold > 0:
        raise ValueError("delta_threshold must be positive")
    d = delta_threshold
    if torch.is_tensor(e):
        a = e.abs()
        return torch.where(a <= d, 0.5 * e * e, d * (a - 0.5 * d))
    e = np.asarray(e, dtype=np.float64)
    a = np.abs(e)
    out = np.where(a <= d, 0.5 * e * e, d * (a - 0.5 * d))
    return float(out) if out.ndim == 0 else out


def expectile_huber(e, tau: float, delta_threshold: float):
    """Huber penalty weighted by ``tau`` for e >= 0 and ``1 - tau`` for e < 0."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if torch.is_tensor(e):
        # scalar branches would make torch.where produce float32 weights
        w = torch.full_like(e, tau).masked_fill(e < 0, 1.0 - tau)
        return w * huber(e, delta_threshold)
    e = np.asarray(e, dtype=np.float64)
    out = np.where(e < 0, 1.0 - tau, tau) * huber(e, delta_threshold)
    return float(out) if np.ndim(out) == 0 else out


class ErrorBuffer:
    """Ring buffer of recent absolute value residuals."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._data = np.zeros(self.capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def extend(self, values) -> None:
        values = np.abs(np.asarray(values, dtype=np.float64).ravel())
        if values.size >= self.capacity:
            values = values[-self.capacity:]
        idx = (self._next + np.arange(values.size)) % self.capacity
        self._data[idx] = values
        self._next = int((self._next + values.size) % self.capacity)
        self._size = min(self.capacity, self._size + values.size)

    def values(self) -> np.ndarray:
        return self._data[: self._size].copy()


def update_delta_threshold(buffer: ErrorBuffer, delta_percentile: float, default: float = 1.0) -> float:
    """Linear-interpolation percentile of the buffered residuals (default when empty)."""
    if len(buffer) == 0:
        return default
    return float(np.quantile(buffer.values(), delta_percentile, method="linear"))


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------


class QovModels(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, action_low, action_high,
                 hidden=(64, 64), seed: int = 0, dropout: float = 0.0):
        super().__init__()
        self.state_dim, self.action_dim = state_dim, action_dim
        self.register_buffer("action_low", as_tensor(action_low).reshape(-1))
        self.register_buffer("action_high", as_tensor(action_high).reshape(-1))
        sa = state_dim + action_dim
        self.v_net = DenseNetwork(state_dim, 1, hidden, zero_output=True, seed=seed * 10 + 1)
        self.q1_net = DenseNetwork(sa, 1, hidden, zero_output=True, seed=seed * 10 + 2)
        self.q2_net = DenseNetwork(sa, 1, hidden, zero_output=True, seed=seed * 10 + 3)
        self.q1_target = copy.deepcopy(self.q1_net)
        self.q2_target = copy.deepcopy(self.q2_net)
        for p in list(self.q1_target.parameters()) + list(self.q2_target.parameters()):
            p.requires_grad_(False)
        # dropout only regularises the actor; it is inactive in eval mode
        self.policy_net = DenseNetwork(state_dim, action_dim, hidden, dropout_rate=dropout,
                                       zero_output=True, seed=seed * 10 + 4)
        self.log_std = nn.Parameter(torch.zeros(action_dim, dtype=DTYPE))

    @classmethod
    def for_env(cls, env: EnvSpec, hidden=(64, 64), seed: int = 0, dropout: float = 0.0) -> "QovModels":
        return cls(env.state_dim, env.action_dim, env.action_low, env.action_high, hidden, seed, dropout)

    def _run(self, net: DenseNetwork, x: torch.Tensor) -> torch.Tensor:
        # eval-mode inference without autograd takes the batch-invariant path
        if self.training or torch.is_grad_enabled():
            return net(x)
        return net.forward_rowwise(x)

    def value(self, s: torch.Tensor) -> torch.Tensor:
        return self._run(self.v_net, s).squeeze(-1)

    def q_online(self, s, a) -> tuple[torch.Tensor, torch.Tensor]:
        sa = torch.cat([s, a], dim=-1)
        return self._run(self.q1_net, sa).squeeze(-1), self._run(self.q2_net, sa).squeeze(-1)

    def q_target(self, s, a) -> torch.Tensor:
        sa = torch.cat([s, a], dim=-1)
        return torch.minimum(self._run(self.q1_target, sa), self._run(self.q2_target, sa)).squeeze(-1)

    def clamped_log_std(self) -> torch.Tensor:
        return self.log_std.clamp(*LOG_STD_BOUNDS)

    def policy_mean(self, s: torch.Tensor) -> torch.Tensor:
        return self._run(self.policy_net, s)

    def log_prob(self, s, a) -> torch.Tensor:
        mu = self.policy_mean(s)
        log_std = self.clamped_log_std()
        z = (a - mu) * torch.exp(-log_std)
        return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(-1)

    def clip_action(self, a: torch.Tensor) -> torch.Tensor:
        return torch.maximum(torch.minimum(a, self.action_high), self.action_low)

    def act_mean(self, s: torch.Tensor) -> torch.Tensor:
        """Policy mean clipped to the action bounds."""
        return self.clip_action(self.policy_mean(s))

    def policy_std(self) -> torch.Tensor:
        return torch.exp(self.clamped_log_std())

    def blobs(self):
        return module_blobs("qov", self)

    def load_blobs(self, blobs):
        return load_module_blobs("qov", self, blobs)


def qop_action(models: QovModels, state, mode: str = "mean", rng: np.random.Generator | None = None) -> np.ndarray:
    with torch.no_grad():
        s = as_tensor(state)
        mu = models.policy_mean(s)
        if mode == "sample":
            if rng is None:
                raise ValueError("sample mode needs an rng")
            noise = as_tensor(rng.standard_normal(tuple(mu.shape)))
            mu = mu + models.policy_std() * noise
        elif mode != "mean":
            raise ValueError(f"unknown mode {mode!r}")
        return models.clip_action(mu).numpy()


# --------------------------------------------------------------------------
# Batch losses
# --------------------------------------------------------------------------


def _check(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite {what}")


def v_loss(models: QovModels, batch, cfg: QovConfig, delta_threshold: float = 1.0,
           buffer: ErrorBuffer | None = None) -> torch.Tensor:
    s, a = batch["states"], batch["actions"]
    with torch.no_grad():
        target = models.q_target(s, a)
    v = models.value(s)
    _check(v, "value output")
    e = target - v
    if buffer is not None:
        buffer.extend(e.detach().numpy())
    return expectile_huber(e, cfg.tau, delta_threshold).mean()


def q_loss(models: QovModels, batch, cfg: QovConfig) -> torch.Tensor:
    s, a = batch["states"], batch["actions"]
    with torch.no_grad():
        target = batch["rewards"] + cfg.gamma * (1.0 - batch["terminals"]) * models.value(batch["next_states"])
    q1, q2 = models.q_online(s, a)
    _check(q1, "Q output")
    _check(q2, "Q output")
    return ((target - q1) ** 2).mean() + ((target - q2) ** 2).mean()


def awr_weights(models: QovModels, s, a, cfg: QovConfig) -> torch.Tensor:
    with torch.no_grad():
        adv = models.q_target(s, a) - models.value(s)
        _check(adv, "advantage")
        return torch.exp(cfg.beta * adv).clamp(max=cfg.awr_clip)


def awr_policy_loss(models: QovModels, batch, cfg: QovConfig) -> torch.Tensor:
    s, a = batch["states"], batch["actions"]
    w = awr_weights(models, s, a, cfg)
    return -(w * models.log_prob(s, a)).mean()


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def dataset_tensors(dataset: Dataset) -> dict[str, torch.Tensor]:
    return {k: torch.as_tensor(v) for k, v in dataset.flat().items()}


@dataclass
class QovResult:
    models: QovModels
    log: list[dict] = field(default_factory=list)
    buffer: ErrorBuffer | None = None


DIVERGENCE_LIMIT = 1e6


def train_qov(dataset: Dataset, cfg: QovConfig, steps: int, seed: int = 0) -> QovResult:
    """Joint V / twin-Q / AWR training loop, deterministic given ``seed``."""
    if dataset.n_transitions == 0:
        raise ValueError("dataset is empty")
    models = QovModels.for_env(dataset.env, cfg.hidden, seed, cfg.dropout)
    data = dataset_tensors(dataset)
    rng = np.random.default_rng([seed, 0x90F])
    buffer = ErrorBuffer(cfg.error_buffer_capacity)
    v_opt = make_adam([models.v_net], cfg.lr)
    q_opt = make_adam([models.q1_net, models.q2_net], cfg.lr)
    pi_opt = make_adam([models.policy_net, models.log_std], cfg.lr)
    pi_sched = torch.optim.lr_scheduler.CosineAnnealingLR(pi_opt, T_max=max(steps, 1), eta_min=0.0)
    history: list[dict] = []
    models.train()
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2**62)))
        _train_loop(models, data, cfg, steps, rng, buffer, v_opt, q_opt, pi_opt, pi_sched, history)
    models.eval()
    return QovResult(models, history, buffer)


def _train_loop(models, data, cfg, steps, rng, buffer, v_opt, q_opt, pi_opt, pi_sched, history):
    n = len(data["rewards"])
    delta = cfg.delta_default
    for it in range(steps):
        idx = torch.as_tensor(rng.integers(0, n, cfg.batch_size))
        batch = {k: v[idx] for k, v in data.items()}

        lv = v_loss(models, batch, cfg, delta, buffer)
        v_opt.zero_grad(); lv.backward(); v_opt.step()

        lq = q_loss(models, batch, cfg)
        q_opt.zero_grad(); lq.backward(); q_opt.step()
        soft_update(models.q1_target, models.q1_net, cfg.soft_update_a)
        soft_update(models.q2_target, models.q2_net, cfg.soft_update_a)

        lpi = awr_policy_loss(models, batch, cfg)
        pi_opt.zero_grad(); lpi.backward(); pi_opt.step(); pi_sched.step()

        losses = (lv.item(), lq.item(), lpi.item())
        if not all(math.isfinite(x) and abs(x) < DIVERGENCE_LIMIT for x in losses):
            raise NumericError(f"training diverged at step {it}: losses {losses}")

        if (it + 1) % cfg.delta_refresh == 0 and len(buffer) >= cfg.delta_warmup:
            delta = max(update_delta_threshold(buffer, cfg.delta_percentile, cfg.delta_default), 1e-8)
        if it % cfg.log_every == 0 or it == steps - 1:
            history.append({"step": it, "loss_v": losses[0], "loss_q": losses[1],
                            "loss_pi": losses[2], "delta_threshold": delta})
            log.debug("qov step %d %s", it, history[-1])
