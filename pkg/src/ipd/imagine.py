"""Imaginary planning and dataset augmentation.

States whose imagined return (quasi-optimal policy rolled through the world
model) most exceeds the return actually recorded in the data are replanned
with random-shooting MPC inside the learned model.  Planned segments are
appended to the dataset as imagined trajectories, stopping as soon as the
ensemble stops agreeing.

Everything here only needs duck-typed components:

* critic: ``value(s)``, ``policy_mean(s)``, ``act_mean(s)``, ``policy_std()``,
  ``clip_action(a)``
* model: ``mean_step(s, a) -> (reward, next_state)`` and, for reliability
  checks, ``member_outputs`` (see :mod:`ipd.worldmodel`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffcore import as_tensor
from .envlab import Dataset, Trajectory, decode_source, encode_source
from .worldmodel import ReliableSetParams, uncertainty

MODES = ("mpc", "greedy")


@dataclass
class AugConfig:
    H_I: int = 10
    H_m: int = 10
    H_con: int = 10
    N_mpc: int = 3
    gamma_mpc: float = 0.99
    N_aug: float = 0.25
    mode: str = "mpc"
    replace_windows: bool = False

    def __post_init__(self):
        if min(self.H_I, self.H_m, self.H_con) < 1:
            raise ValueError("horizons must be at least 1")
        if self.N_mpc < 1:
            raise ValueError("N_mpc must be at least 1")
        if self.N_aug < 0:
            raise ValueError("N_aug must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class Candidate:
    trajectory_index: int
    time_index: int
    gap: float


class PlanningError(RuntimeError):
    pass


def _f32(x: torch.Tensor) -> torch.Tensor:
    return x.to(torch.float32).to(torch.float64)


# --------------------------------------------------------------------------
# Returns
# --------------------------------------------------------------------------


def _guarded_step(wm, s: torch.Tensor, a: torch.Tensor, bad: torch.Tensor):
    """Model step that parks already-diverged rows at zero and flags new divergence."""
    zero = torch.zeros((), dtype=s.dtype)
    s_in = torch.where(bad[..., None], zero, s)
    a_in = torch.where(bad[..., None] | ~torch.isfinite(a), zero, a)
    r, s_next = wm.mean_step(s_in, a_in)
    bad = bad | ~torch.isfinite(a).all(-1) | ~torch.isfinite(r) | ~torch.isfinite(s_next).all(-1)
    return r, s_next, bad


def imagined_returns(states, qov, wm, H_I: int, gamma: float) -> np.ndarray:
    """Batched imagined return; rows whose rollout goes non-finite get ``-inf``.

    The terminal value is added without a discount factor.
    """
    with torch.no_grad():
        s = as_tensor(states)
        bad = ~torch.isfinite(s).all(-1)
        total = torch.zeros(s.shape[:-1], dtype=s.dtype)
        for k in range(H_I):
            a = qov.act_mean(torch.where(bad[..., None], 0.0, s))
            r, s, bad = _guarded_step(wm, s, a, bad)
            total = total + gamma**k * r
        total = total + qov.value(torch.where(bad[..., None], 0.0, s))
        bad = bad | ~torch.isfinite(total)
        out = total.numpy().copy()
    out[bad.numpy()] = -np.inf
    return out


def imagined_return(s, qov, wm, H_I: int, gamma: float) -> float:
    return float(imagined_returns(np.asarray(s, dtype=np.float64)[None], qov, wm, H_I, gamma)[0])


def _state_at(traj: Trajectory, k: int) -> np.ndarray:
    return traj.states[k] if k < len(traj) else traj.next_states[k - 1]


def real_return(traj: Trajectory, t: int, qov, H_I: int, gamma: float) -> float:
    """Stored discounted rewards over ``H_I`` steps plus the value at the window end.

    A window that ends on a true terminal bootstraps zero.
    """
    if t < 0 or t + H_I > len(traj):
        raise ValueError(f"window [{t}, {t + H_I}] overruns a trajectory of length {len(traj)}")
    r = traj.rewards[t:t + H_I].astype(np.float64)
    disc = float(np.sum(r * gamma ** np.arange(H_I)))
    if t + H_I == len(traj) and traj.terminals[-1]:
        return disc
    with torch.no_grad():
        v = qov.value(as_tensor(_state_at(traj, t + H_I).astype(np.float64))[None])
    return disc + float(v[0])


# --------------------------------------------------------------------------
# Candidate selection
# --------------------------------------------------------------------------


def admissible_times(n_transitions: int, H_con: int, H_I: int) -> range:
    """Times t with H_con states of history and H_I future steps inside the trajectory."""
    return range(H_con, n_transitions - H_I + 1)


def enumerate_candidates(dataset: Dataset, qov, wm, cfg: AugConfig) -> list[Candidate]:
    """Score every admissible window of every real trajectory, best gap first."""
    keys, states, reals = [], [], []
    for i, traj in enumerate(dataset.trajectories):
        if traj.provenance != "real":
            continue
        times = admissible_times(len(traj), cfg.H_con, cfg.H_I)
        if not len(times):
            continue
        t = np.asarray(times)
        r = traj.rewards.astype(np.float64)
        disc = np.array([np.sum(r[k:k + cfg.H_I] * cfg.gamma_mpc ** np.arange(cfg.H_I)) for k in t])
        ends = np.stack([_state_at(traj, k + cfg.H_I) for k in t]).astype(np.float64)
        with torch.no_grad():
            v_end = qov.value(as_tensor(ends)).numpy()
        terminal_end = (t + cfg.H_I == len(traj)) & bool(traj.terminals[-1])
        reals.append(disc + np.where(terminal_end, 0.0, v_end))
        states.append(traj.states[t].astype(np.float64))
        keys.extend((i, int(k)) for k in t)
    if not keys:
        return []
    imagined = imagined_returns(np.concatenate(states), qov, wm, cfg.H_I, cfg.gamma_mpc)
    gaps = imagined - np.concatenate(reals)
    cands = [Candidate(i, t, float(g)) for (i, t), g in zip(keys, gaps)]
    return sorted(cands, key=lambda c: (-c.gap, c.trajectory_index, c.time_index))


def top_k(n_transitions: int, n_candidates: int, N_aug: float, H_I: int) -> int:
    return min(int(math.floor(N_aug * n_transitions / H_I)), n_candidates)


def select_top_k(candidates: list[Candidate], dataset: Dataset, cfg: AugConfig) -> list[Candidate]:
    """Per trajectory, keep its K best candidates; global gap order is preserved."""
    per_traj: dict[int, int] = {}
    for c in candidates:
        per_traj[c.trajectory_index] = per_traj.get(c.trajectory_index, 0) + 1
    quota = {
        i: top_k(len(dataset.trajectories[i]), n, cfg.N_aug, cfg.H_I) for i, n in per_traj.items()
    }
    taken: dict[int, int] = {}
    out = []
    for c in candidates:
        if taken.get(c.trajectory_index, 0) < quota[c.trajectory_index]:
            out.append(c)
            taken[c.trajectory_index] = taken.get(c.trajectory_index, 0) + 1
    return out


# --------------------------------------------------------------------------
# MPC
# --------------------------------------------------------------------------


def score_first_actions(states, first_actions, qov, wm, H_m: int, gamma: float) -> np.ndarray:
    """Discounted model return of each first action followed by the policy mean.

    ``states``: (B, ds); ``first_actions``: (B, N, da).  Returns (B, N).
    """
    with torch.no_grad():
        a0 = as_tensor(first_actions)
        B, N, _ = a0.shape
        s = as_tensor(states)[:, None, :].expand(B, N, -1).reshape(B * N, -1)
        a = a0.reshape(B * N, -1)
        bad = ~torch.isfinite(s).all(-1)
        total = torch.zeros(B * N, dtype=s.dtype)
        for k in range(H_m):
            if k > 0:
                a = qov.act_mean(torch.where(bad[..., None], 0.0, s))
            r, s, bad = _guarded_step(wm, s, a, bad)
            total = total + gamma**k * r
        total = total + gamma**H_m * qov.value(torch.where(bad[..., None], 0.0, s))
        total = torch.where(bad, -torch.inf, total)
    return total.reshape(B, N).numpy()


def sample_first_actions(states, qov, noise) -> np.ndarray:
    """Policy-mean plus scaled noise, clipped; noise is (B, N, da) standard normal."""
    with torch.no_grad():
        mu = qov.policy_mean(as_tensor(states))[:, None, :]
        a = mu + qov.policy_std() * as_tensor(noise)
        return qov.clip_action(a).numpy()


def plan_batch(states, qov, wm, cfg: AugConfig, noise=None, candidates=None):
    """Batched MPC; returns (actions (B, da), best scores (B,)).

    ``candidates`` overrides sampling with explicit first actions (B, N, da).
    Rows where no candidate scores finite get NaN actions.
    """
    states = np.asarray(states, dtype=np.float64)
    if candidates is None:
        candidates = sample_first_actions(states, qov, noise)
    candidates = np.asarray(candidates, dtype=np.float64)
    scores = score_first_actions(states, candidates, qov, wm, cfg.H_m, cfg.gamma_mpc)
    scores = np.where(np.isfinite(scores), scores, -np.inf)
    best = np.argmax(scores, axis=1)  # first maximal index wins ties
    rows = np.arange(len(states))
    actions = candidates[rows, best].copy()
    best_scores = scores[rows, best]
    actions[~np.isfinite(best_scores)] = np.nan
    return actions, best_scores


def mpc_plan(s, qov, wm, reliable, cfg: AugConfig, rng: np.random.Generator | None = None,
             candidates=None) -> np.ndarray:
    """Random-shooting MPC from a single state (reliability is the caller's job)."""
    s = np.asarray(s, dtype=np.float64)[None]
    if candidates is None:
        if rng is None:
            raise ValueError("rng required when candidates are sampled")
        da = int(qov.policy_std().shape[-1])
        noise = rng.standard_normal((1, cfg.N_mpc, da))
        actions, scores = plan_batch(s, qov, wm, cfg, noise=noise)
    else:
        actions, scores = plan_batch(s, qov, wm, cfg, candidates=np.asarray(candidates, dtype=np.float64)[None])
    if not np.isfinite(scores[0]):
        raise PlanningError("every MPC candidate produced a non-finite score")
    return actions[0]


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


@dataclass
class AugmentResult:
    dataset: Dataset
    report: dict = field(default_factory=dict)
    candidates: list[Candidate] = field(default_factory=list)
    selected: list[Candidate] = field(default_factory=list)


@torch.no_grad()
def _rollout_segments(seeds: np.ndarray, qov, wm, reliable: ReliableSetParams, cfg: AugConfig, seed: int):
    """Lock-step imagination from every seed state; returns per-seed transition lists."""
    n = len(seeds)
    da = int(qov.policy_std().shape[-1])
    # one RNG stream per seed ordinal
    noise = np.stack(
        [np.random.default_rng([seed, i]).standard_normal((cfg.H_I, cfg.N_mpc, da)) for i in range(n)]
    ) if n else np.zeros((0, cfg.H_I, cfg.N_mpc, da))
    s = torch.as_tensor(seeds.astype(np.float32).astype(np.float64))
    active = np.ones(n, dtype=bool)
    truncated = np.zeros(n, dtype=bool)
    segments: list[list[tuple]] = [[] for _ in range(n)]
    for k in range(cfg.H_I):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        s_act = s[idx]
        if cfg.mode == "mpc":
            a, _ = plan_batch(s_act.numpy(), qov, wm, cfg, noise=noise[idx, k])
            a = torch.as_tensor(a)
        else:
            a = qov.act_mean(s_act)
        a = _f32(a)
        finite = torch.isfinite(a).all(-1).numpy()
        ok = finite.copy()
        if finite.any():
            u = uncertainty(wm, s_act[finite], a[finite])
            ok[finite] = u < reliable.kappa
        safe_a = torch.where(torch.isfinite(a), a, torch.zeros_like(a))
        r, s_next = wm.mean_step(s_act, safe_a)
        r, s_next = _f32(r), _f32(s_next)
        ok &= torch.isfinite(s_next).all(-1).numpy() & np.isfinite(r.numpy())
        for j, i in enumerate(idx):
            if ok[j]:
                segments[i].append((s_act[j].numpy(), a[j].numpy(), float(r[j]), s_next[j].numpy()))
            else:
                truncated[i] = True
        s = s.clone()
        s[idx] = s_next
        active[idx[~ok]] = False
    return segments, truncated


def augment_dataset(dataset: Dataset, qov, wm, reliable: ReliableSetParams, cfg: AugConfig,
                    seed: int = 0) -> AugmentResult:
    """Select suboptimal states, imagine better continuations, merge them into the data."""
    if cfg.N_aug == 0:
        return AugmentResult(dataset, _report(0, 0, 0, 0, []))
    candidates = enumerate_candidates(dataset, qov, wm, cfg)
    selected = select_top_k(candidates, dataset, cfg)
    if not selected:
        return AugmentResult(dataset, _report(len(candidates), 0, 0, 0, []), candidates, [])
    seeds = np.stack([dataset.trajectories[c.trajectory_index].states[c.time_index] for c in selected])
    segments, truncated = _rollout_segments(seeds.astype(np.float64), qov, wm, reliable, cfg, seed)

    imagined = []
    kept_windows: dict[int, list[tuple[int, int]]] = {}
    for c, seg in zip(selected, segments):
        if not seg:
            continue
        S, A, R, NS = zip(*seg)
        imagined.append(Trajectory(np.array(S), np.array(A), np.array(R), np.array(NS),
                                   np.zeros(len(seg), dtype=bool), "imagined",
                                   encode_source(c.trajectory_index, c.time_index)))
        kept_windows.setdefault(c.trajectory_index, []).append((c.time_index, c.time_index + len(seg)))

    if cfg.replace_windows:
        real = []
        for i, traj in enumerate(dataset.trajectories):
            real.extend(_excise(traj, kept_windows.get(i, [])))
    else:
        real = list(dataset.trajectories)
    out = Dataset(real + imagined, dataset.env, dataset.seed)
    report = _report(len(candidates), len(selected), len(imagined), int(truncated.sum()), selected)
    return AugmentResult(out, report, candidates, selected)


def greedy_rollout_baseline(dataset: Dataset, qov, wm, reliable: ReliableSetParams, cfg: AugConfig,
                            seed: int = 0) -> AugmentResult:
    """Same pipeline with the policy mean in place of MPC."""
    from dataclasses import replace

    return augment_dataset(dataset, qov, wm, reliable, replace(cfg, mode="greedy"), seed)


def _excise(traj: Trajectory, windows: list[tuple[int, int]]) -> list[Trajectory]:
    if not windows:
        return [traj]
    keep = np.ones(len(traj), dtype=bool)
    for a, b in windows:
        keep[a:b] = False
    pieces = []
    k = 0
    while k < len(traj):
        if not keep[k]:
            k += 1
            continue
        j = k
        while j < len(traj) and keep[j]:
            j += 1
        sl = slice(k, j)
        pieces.append(Trajectory(traj.states[sl], traj.actions[sl], traj.rewards[sl], traj.next_states[sl],
                                 traj.terminals[sl], traj.provenance, traj.source_index))
        k = j
    return pieces


def _report(n_candidates, k_total, n_segments, n_truncated, selected) -> dict:
    return {
        "n_candidates": n_candidates,
        "K_total": k_total,
        "n_segments": n_segments,
        "n_truncated_by_uncertainty": n_truncated,
        "mean_gap": float(np.mean([c.gap for c in selected])) if selected else 0.0,
    }


def seed_time(traj: Trajectory) -> int:
    """Episode time index of an imagined segment's first state."""
    return 0 if traj.source_index is None else decode_source(traj.source_index)[1]
