"""Probabilistic-ensemble dynamics and reward model.

Each member maps (s, a) to a diagonal Gaussian over the next state.  Member
disagreement, measured with the pairwise geometric Jensen-Shannon divergence,
defines which state-action pairs count as reliable for imagination.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import gauss
from .diffcore import (
    DTYPE,
    DenseNetwork,
    NumericError,
    as_tensor,
    load_module_blobs,
    make_adam,
    module_blobs,
)
from .envlab import Dataset, EnvSpec
from .qov import DIVERGENCE_LIMIT, dataset_tensors

log = logging.getLogger(__name__)


@dataclass
class WmConfig:
    E: int = 3
    sigma_reg: float = math.exp(-4.5)
    gamma0: float = 1.0
    T_decay: float = 1e5
    alpha_c: float = 0.5
    alpha_r: float = 0.5
    logvar_bounds: tuple[float, float] = (-10.0, 0.2)
    lr: float = 3e-4
    kappa_percentile: float = 0.95
    hidden: tuple[int, ...] = (64, 64)
    uses_layernorm: bool = True
    batch_size: int = 256
    pair_norm: str = "as_written"
    log_every: int = 500

    def __post_init__(self):
        if self.E < 2:
            raise ValueError("ensemble size E must be at least 2")
        if self.alpha_c < 0 or self.alpha_r < 0:
            raise ValueError("loss weights must be non-negative")
        lo, hi = self.logvar_bounds
        if not lo < hi:
            raise ValueError("logvar_bounds must satisfy low < high")
        if self.pair_norm not in gauss.PAIR_NORMS:
            raise ValueError(f"pair_norm must be one of {gauss.PAIR_NORMS}")
        self.hidden = tuple(self.hidden)
        self.logvar_bounds = (float(lo), float(hi))


def soft_clamp(x: torch.Tensor, low: float, high: float) -> torch.Tensor:
    """Smooth map into [low, high].

    The double softplus overshoots ``high`` by about ``exp(low - high)`` for
    large inputs, so the result is hard-clamped as well.
    """
    x = high - F.softplus(high - x)
    return (low + F.softplus(x - low)).clamp(low, high)


class WorldModel(nn.Module):
    """``E`` Gaussian dynamics members plus a deterministic reward head.

    Members predict the next state directly.  Inputs are standardised with
    statistics frozen at construction.
    """

    def __init__(self, state_dim: int, action_dim: int, cfg: WmConfig, seed: int = 0,
                 input_mean=None, input_std=None):
        super().__init__()
        self.state_dim, self.action_dim = state_dim, action_dim
        self.logvar_bounds = cfg.logvar_bounds
        self.pair_norm = cfg.pair_norm
        d_in = state_dim + action_dim
        self.register_buffer("input_mean", as_tensor(np.zeros(d_in) if input_mean is None else input_mean))
        self.register_buffer("input_std", as_tensor(np.ones(d_in) if input_std is None else input_std))
        self.dynamics_members = nn.ModuleList(
            DenseNetwork(d_in, 2 * state_dim, cfg.hidden, uses_layernorm=cfg.uses_layernorm, seed=seed * 100 + e)
            for e in range(cfg.E)
        )
        self.reward_net = DenseNetwork(d_in, 1, cfg.hidden, uses_layernorm=cfg.uses_layernorm, seed=seed * 100 + 99)

    @property
    def E(self) -> int:
        return len(self.dynamics_members)

    def _inputs(self, s, a) -> torch.Tensor:
        s, a = as_tensor(s), as_tensor(a)
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.action_dim:
            raise ValueError("state/action dimensions do not match the world model")
        x = torch.cat([s, a], dim=-1)
        if not torch.isfinite(x).all():
            raise NumericError("non-finite world-model input")
        return (x - self.input_mean) / self.input_std

    def member_outputs(self, s, a, members=None) -> tuple[torch.Tensor, torch.Tensor]:
        """Means and clamped log-variances stacked as (E, ..., state_dim)."""
        x = self._inputs(s, a)
        idx = range(self.E) if members is None else members
        outs = [self._run(self.dynamics_members[e], x) for e in idx]
        mean = torch.stack([o[..., : self.state_dim] for o in outs])
        logvar = soft_clamp(torch.stack([o[..., self.state_dim:] for o in outs]), *self.logvar_bounds)
        return mean, logvar

    def _run(self, net: DenseNetwork, x: torch.Tensor) -> torch.Tensor:
        # eval-mode inference is batch-invariant so replaying a single imagined
        # transition reproduces what a batched rollout stored
        if self.training or torch.is_grad_enabled():
            return net(x)
        return net.forward_rowwise(x)

    def reward(self, s, a) -> torch.Tensor:
        return self._run(self.reward_net, self._inputs(s, a)).squeeze(-1)

    def mean_step(self, s, a) -> tuple[torch.Tensor, torch.Tensor]:
        """Noise-free imagination step: (reward, ensemble-mean next state)."""
        x = self._inputs(s, a)
        r = self._run(self.reward_net, x).squeeze(-1)
        mean = torch.stack([self._run(m, x)[..., : self.state_dim] for m in self.dynamics_members]).mean(0)
        return r, mean

    def blobs(self):
        return module_blobs("wm", self)

    def load_blobs(self, blobs):
        return load_module_blobs("wm", self, blobs)

    @classmethod
    def for_dataset(cls, dataset: Dataset, cfg: WmConfig, seed: int = 0) -> "WorldModel":
        flat = dataset.flat()
        x = np.concatenate([flat["states"], flat["actions"]], axis=1)
        std = np.maximum(x.std(0), 1e-3)
        return cls(dataset.env.state_dim, dataset.env.action_dim, cfg, seed, x.mean(0), std)


def predict(wm: WorldModel, s, a) -> list[gauss.DiagGaussian]:
    """Per-member Gaussians over the next state."""
    with torch.no_grad():
        mean, logvar = wm.member_outputs(s, a)
    return [gauss.DiagGaussian(m.numpy(), np.exp(lv.numpy())) for m, lv in zip(mean, logvar)]


def reparam_mean(means, variances, noise) -> tuple:
    """Ensemble moment match: (mean of means + sqrt(mean var) * noise, mean var).

    Accepts stacked (E, ..., d) arrays or tensors.
    """
    if torch.is_tensor(means):
        sigma = variances.mean(0)
        noise = as_tensor(noise)
        if noise.shape[-1] != means.shape[-1]:
            raise ValueError("noise dimension does not match the state dimension")
        return means.mean(0) + sigma.sqrt() * noise, sigma
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != means.shape[-1]:
        raise ValueError("noise dimension does not match the state dimension")
    sigma = variances.mean(0)
    return means.mean(0) + np.sqrt(sigma) * noise, sigma


def decay_weight(k: float, gamma0: float, T_decay: float) -> float:
    if k < 0:
        raise ValueError("step k must be non-negative")
    return gamma0 * math.exp(-k / T_decay)


def consistency_loss(wm: WorldModel, batch, k: int, cfg: WmConfig, noise=None, members=None) -> torch.Tensor:
    """Reparameterised next-state error plus decayed pull of the variance toward ``sigma_reg``.

    ``members`` restricts the ensemble average to a subset (a single member
    during bootstrap training).  ``noise`` defaults to a fresh standard normal draw.
    """
    s, a, s_next = batch["states"], batch["actions"], batch["next_states"]
    mean, logvar = wm.member_outputs(s, a, members)
    if noise is None:
        noise = torch.randn(s_next.shape, dtype=DTYPE)
    mu_pe, sigma_pe = reparam_mean(mean, logvar.exp(), noise)
    g = decay_weight(k, cfg.gamma0, cfg.T_decay)
    err = ((mu_pe - s_next) ** 2).sum(-1)
    reg = ((g * (sigma_pe - cfg.sigma_reg)) ** 2).sum(-1)
    return (err + reg).mean()


def reward_loss(wm: WorldModel, batch) -> torch.Tensor:
    return ((wm.reward(batch["states"], batch["actions"]) - batch["rewards"]) ** 2).mean()


def total_loss(wm: WorldModel, batch, k: int, cfg: WmConfig, noise=None) -> torch.Tensor:
    return cfg.alpha_c * consistency_loss(wm, batch, k, cfg, noise) + cfg.alpha_r * reward_loss(wm, batch)


def uncertainty(wm: WorldModel, s, a) -> np.ndarray:
    with torch.no_grad():
        mean, logvar = wm.member_outputs(s, a)
    return gauss.stacked_uncertainty(mean.numpy(), np.exp(logvar.numpy()), wm.pair_norm)


@dataclass(frozen=True)
class ReliableSetParams:
    kappa: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


def calibrate_kappa(wm: WorldModel, dataset: Dataset, kappa_percentile: float = 0.95) -> ReliableSetParams:
    """Set kappa to a percentile of the uncertainty over the dataset's own pairs."""
    if dataset.n_transitions == 0:
        raise ValueError("dataset is empty")
    flat = dataset.flat()
    u = uncertainty(wm, flat["states"], flat["actions"])
    if kappa_percentile >= 1.0:
        # strict inequality: nudge above the maximum so every pair qualifies
        kappa = float(np.nextafter(u.max(), np.inf))
    else:
        kappa = float(np.quantile(u, kappa_percentile, method="linear"))
    if not kappa > 0:
        warnings.warn("ensemble members agree everywhere; kappa is degenerate", RuntimeWarning, stacklevel=2)
        kappa = float(np.nextafter(0.0, 1.0))
    return ReliableSetParams(kappa)


def is_reliable(wm: WorldModel, params: ReliableSetParams, s, a) -> np.ndarray:
    return uncertainty(wm, s, a) < params.kappa


@dataclass
class WmResult:
    model: WorldModel
    log: list[dict] = field(default_factory=list)


def train_world_model(dataset: Dataset, cfg: WmConfig, steps: int, seed: int = 0) -> WmResult:
    """Train members on independent bootstrap resamples; reward head on the full data."""
    if dataset.n_transitions == 0:
        raise ValueError("dataset is empty")
    wm = WorldModel.for_dataset(dataset, cfg, seed)
    data = dataset_tensors(dataset)
    n = len(data["rewards"])
    rng = np.random.default_rng([seed, 0x3A])
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    boot = [rng.integers(0, n, n) for _ in range(wm.E)]
    opt = make_adam([wm], cfg.lr)
    history: list[dict] = []
    wm.train()
    for k in range(steps):
        lc_total = 0.0
        loss = 0.0
        for e in range(wm.E):
            idx = torch.as_tensor(boot[e][rng.integers(0, n, cfg.batch_size)])
            batch = {key: v[idx] for key, v in data.items()}
            noise = torch.randn(batch["next_states"].shape, dtype=DTYPE, generator=gen)
            lc = consistency_loss(wm, batch, k, cfg, noise, members=[e])
            loss = loss + cfg.alpha_c * lc
            lc_total += lc.item()
        idx = torch.as_tensor(rng.integers(0, n, cfg.batch_size))
        lr_ = reward_loss(wm, {key: v[idx] for key, v in data.items()})
        loss = loss + cfg.alpha_r * lr_
        opt.zero_grad(); loss.backward(); opt.step()
        if not (math.isfinite(loss.item()) and loss.item() < DIVERGENCE_LIMIT):
            raise NumericError(f"world model diverged at step {k}")
        if k % cfg.log_every == 0 or k == steps - 1:
            with torch.no_grad():
                _, logvar = wm.member_outputs(data["states"][:256], data["actions"][:256])
            history.append({"step": k, "loss_c": lc_total / wm.E, "loss_r": lr_.item(),
                            "gamma_exp": decay_weight(k, cfg.gamma0, cfg.T_decay),
                            "mean_logvar": float(logvar.mean())})
            log.debug("wm step %d %s", k, history[-1])
    wm.eval()
    return WmResult(wm, history)
