"""Toy environments, behaviour data and the on-disk trajectory format.

Two tasks are provided:

* ``lqr`` -- discrete-time linear system with quadratic cost.  The discounted
  Riccati fixed point gives the exact optimal value, which is used as an
  oracle for learned values and actions.
* ``pointring`` -- a 2-D point mass confined to an annulus.  Episodes start on
  the left of the ring and the goal sits on the right.  The behaviour data
  only ever covers half of the route per trajectory, so beating the best
  stored trajectory requires stitching.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

PROVENANCE = ("real", "imagined")


# --------------------------------------------------------------------------
# Environment specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int
    dynamics_params: dict = field(default_factory=dict, compare=False, hash=False)
    process_noise_std: float = 0.0

    def __post_init__(self):
        low = np.asarray(self.action_low, dtype=np.float64).reshape(-1)
        high = np.asarray(self.action_high, dtype=np.float64).reshape(-1)
        if low.shape != (self.action_dim,) or high.shape != (self.action_dim,):
            raise ValueError("action bounds must have length action_dim")
        if not np.all(low < high):
            raise ValueError("action bounds require low < high elementwise")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be at least 1")
        if self.name not in ENV_FACTORIES:
            raise ValueError(f"unknown environment {self.name!r}")
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)

    def __eq__(self, other):
        if not isinstance(other, EnvSpec):
            return NotImplemented
        return (
            self.name == other.name
            and self.state_dim == other.state_dim
            and self.action_dim == other.action_dim
            and np.array_equal(self.action_low.astype(np.float32), other.action_low.astype(np.float32))
            and np.array_equal(self.action_high.astype(np.float32), other.action_high.astype(np.float32))
            and self.max_episode_steps == other.max_episode_steps
        )

    __hash__ = None

    def clip(self, action: np.ndarray) -> np.ndarray:
        return np.clip(action, self.action_low, self.action_high)


def lqr_env(
    A=((1.0, 0.1), (0.0, 1.0)),
    B=((0.0,), (0.1,)),
    Q=((1.0, 0.0), (0.0, 1.0)),
    R=((0.1,),),
    action_bound: float = 10.0,
    max_episode_steps: int = 50,
    process_noise_std: float = 0.0,
    init_scale: float = 1.0,
) -> EnvSpec:
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, B, Q, R))
    n, m = B.shape
    return EnvSpec(
        "lqr",
        n,
        m,
        -action_bound * np.ones(m),
        action_bound * np.ones(m),
        max_episode_steps,
        {"A": A, "B": B, "Q": Q, "R": R, "init_scale": init_scale},
        process_noise_std,
    )


def pointring_env(
    radius: float = 1.0,
    inner: float = 0.6,
    outer: float = 1.4,
    dt: float = 0.1,
    accel: float = 2.0,
    damping: float = 0.1,
    goal_radius: float = 0.15,
    max_episode_steps: int = 120,
    process_noise_std: float = 0.0,
) -> EnvSpec:
    return EnvSpec(
        "pointring",
        4,
        2,
        -np.ones(2),
        np.ones(2),
        max_episode_steps,
        {
            "radius": radius,
            "inner": inner,
            "outer": outer,
            "dt": dt,
            "accel": accel,
            "damping": damping,
            "goal_radius": goal_radius,
        },
        process_noise_std,
    )


ENV_FACTORIES: dict[str, Callable[..., EnvSpec]] = {"lqr": lqr_env, "pointring": pointring_env}


def make_env(name: str, **kwargs) -> EnvSpec:
    try:
        return ENV_FACTORIES[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}") from None


# --------------------------------------------------------------------------
# Dynamics
# --------------------------------------------------------------------------


def pointring_goal(env: EnvSpec) -> np.ndarray:
    return np.array([env.dynamics_params["radius"], 0.0])


def pointring_start(env: EnvSpec) -> np.ndarray:
    return np.array([-env.dynamics_params["radius"], 0.0])


def pointring_midpoint(env: EnvSpec) -> np.ndarray:
    return np.array([0.0, env.dynamics_params["radius"]])


def _pointring_step(env: EnvSpec, state: np.ndarray, action: np.ndarray):
    p = env.dynamics_params
    pos, vel = state[..., :2], state[..., 2:]
    vel = (1.0 - p["damping"]) * vel + p["dt"] * p["accel"] * action
    pos = pos + p["dt"] * vel
    r = np.linalg.norm(pos, axis=-1, keepdims=True)
    n_hat = pos / np.maximum(r, 1e-12)
    radial = np.sum(vel * n_hat, axis=-1, keepdims=True)
    out = r > p["outer"]
    inn = r < p["inner"]
    pos = np.where(out, n_hat * p["outer"], np.where(inn, n_hat * p["inner"], pos))
    # walls absorb the velocity component pointing into them
    vel = np.where(out & (radial > 0), vel - radial * n_hat, vel)
    vel = np.where(inn & (radial < 0), vel - radial * n_hat, vel)
    next_state = np.concatenate([pos, vel], axis=-1)
    dist = np.linalg.norm(pos - pointring_goal(env), axis=-1)
    return next_state, -dist, dist < p["goal_radius"]


def step(env: EnvSpec, state, action, noise=None):
    """Advance one step; returns ``(next_state, reward, terminal)``.

    Actions outside the bounds are clipped.  ``noise`` is added as given to
    the next state (LQR) or to the velocity part of it (PointRing).
    """
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise FloatingPointError("non-finite state")
    action = env.clip(np.asarray(action, dtype=np.float64))
    if env.name == "lqr":
        p = env.dynamics_params
        A, B, Q, R = p["A"], p["B"], p["Q"], p["R"]
        next_state = state @ A.T + action @ B.T
        if noise is not None:
            next_state = next_state + noise
        reward = -(np.einsum("...i,ij,...j->...", state, Q, state) + np.einsum("...i,ij,...j->...", action, R, action))
        terminal = np.zeros(np.shape(reward), dtype=bool)
        return next_state, reward, terminal
    next_state, reward, terminal = _pointring_step(env, state, action)
    if noise is not None:
        next_state = next_state.copy()
        next_state[..., 2:] += np.asarray(noise)[..., 2:]
    return next_state, reward, terminal


def reset(env: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    if env.name == "lqr":
        scale = env.dynamics_params.get("init_scale", 1.0)
        return rng.uniform(-scale, scale, env.state_dim)
    start = pointring_start(env) + rng.normal(0.0, 0.03, 2)
    return np.concatenate([start, np.zeros(2)])


# --------------------------------------------------------------------------
# Riccati oracle
# --------------------------------------------------------------------------


class RiccatiError(RuntimeError):
    pass


def riccati_solution(env: EnvSpec, gamma: float = 0.99, tol: float = 1e-10, max_iter: int = 100_000):
    """Discounted Riccati fixed point ``P`` and optimal gain ``K`` (a* = -K s)."""
    if env.name != "lqr":
        raise ValueError("Riccati oracle only exists for the lqr environment")
    p = env.dynamics_params
    return _riccati(p["A"].tobytes(), p["B"].tobytes(), p["Q"].tobytes(), p["R"].tobytes(),
                    p["A"].shape[0], p["B"].shape[1], float(gamma), tol, max_iter)


@lru_cache(maxsize=64)
def _riccati(A_b, B_b, Q_b, R_b, n, m, gamma, tol, max_iter):
    A = np.frombuffer(A_b).reshape(n, n)
    B = np.frombuffer(B_b).reshape(n, m)
    Q = np.frombuffer(Q_b).reshape(n, n)
    R = np.frombuffer(R_b).reshape(m, m)
    P = Q.copy()
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            BtPA = B.T @ P @ A
            gain = np.linalg.solve(R + gamma * B.T @ P @ B, BtPA)
            P_new = Q + gamma * A.T @ P @ A - gamma**2 * BtPA.T @ gain
            P_new = 0.5 * (P_new + P_new.T)
            if not np.all(np.isfinite(P_new)):
                raise RiccatiError("Riccati iteration diverged")
            if np.max(np.abs(P_new - P)) < tol:
                P = P_new
                break
            P = P_new
        else:
            raise RiccatiError("Riccati iteration did not converge")
    K = gamma * np.linalg.solve(R + gamma * B.T @ P @ B, B.T @ P @ A)
    P.setflags(write=False)
    K.setflags(write=False)
    return P, K


def riccati_value(env: EnvSpec, state, gamma: float = 0.99) -> np.ndarray:
    P, _ = riccati_solution(env, gamma)
    s = np.asarray(state, dtype=np.float64)
    return -np.einsum("...i,ij,...j->...", s, P, s)


def riccati_action(env: EnvSpec, state, gamma: float = 0.99) -> np.ndarray:
    _, K = riccati_solution(env, gamma)
    return -np.asarray(state, dtype=np.float64) @ K.T


# --------------------------------------------------------------------------
# Trajectories and datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class Trajectory:
    """Ordered transitions stored column-wise at float32 precision."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    provenance: str = "real"
    source_index: int | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32).reshape(-1)
        self.next_states = np.asarray(self.next_states, dtype=np.float32)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(-1)
        if self.provenance not in PROVENANCE:
            raise ValueError(f"provenance must be one of {PROVENANCE}")
        T = len(self.rewards)
        if not (len(self.states) == len(self.actions) == len(self.next_states) == len(self.terminals) == T):
            raise ValueError("trajectory columns have different lengths")
        if T and np.any(self.terminals[:-1]):
            raise ValueError("terminal flag may only be set on the last transition")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[k], self.actions[k], float(self.rewards[k]), self.next_states[k], bool(self.terminals[k]))
            for k in range(len(self))
        ]

    def chained(self) -> bool:
        return bool(np.array_equal(self.next_states[:-1], self.states[1:]))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.provenance == other.provenance
            and self.source_index == other.source_index
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("states", "actions", "rewards", "next_states", "terminals")
            )
        )

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], provenance="real", source_index=None):
        return cls(
            np.array([t.state for t in transitions]),
            np.array([t.action for t in transitions]),
            np.array([t.reward for t in transitions]),
            np.array([t.next_state for t in transitions]),
            np.array([t.terminal for t in transitions]),
            provenance,
            source_index,
        )


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    env: EnvSpec
    seed: int = -1

    def __post_init__(self):
        for tr in self.trajectories:
            if len(tr) and (tr.states.shape[1] != self.env.state_dim or tr.actions.shape[1] != self.env.action_dim):
                raise ValueError("trajectory dimensions disagree with the environment")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.env == other.env and self.trajectories == other.trajectories

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def real(self) -> list[Trajectory]:
        return [t for t in self.trajectories if t.provenance == "real"]

    def flat(self) -> dict[str, np.ndarray]:
        """All transitions concatenated, as float64 arrays."""
        trajs = [t for t in self.trajectories if len(t)]
        if not trajs:
            raise ValueError("dataset has no transitions")
        cat = lambda f: np.concatenate([getattr(t, f) for t in trajs]).astype(np.float64)
        return {
            "states": cat("states"),
            "actions": cat("actions"),
            "rewards": cat("rewards"),
            "next_states": cat("next_states"),
            "terminals": np.concatenate([t.terminals for t in trajs]).astype(np.float64),
        }


SOURCE_SHIFT = 32


def encode_source(trajectory_index: int, time_index: int) -> int:
    return (int(trajectory_index) << SOURCE_SHIFT) | int(time_index)


def decode_source(source_index: int) -> tuple[int, int]:
    return source_index >> SOURCE_SHIFT, source_index & ((1 << SOURCE_SHIFT) - 1)


def discounted_return(traj: Trajectory, gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    r = traj.rewards.astype(np.float64)
    return float(np.sum(r * gamma ** np.arange(len(r))))


# --------------------------------------------------------------------------
# Behaviour policies
# --------------------------------------------------------------------------


def _carrot_action(env: EnvSpec, state: np.ndarray, end_angle: float, lead: float = 0.35) -> np.ndarray:
    radius = env.dynamics_params["radius"]
    pos, vel = state[:2], state[2:]
    theta = np.arctan2(pos[1], pos[0])
    if theta < -np.pi / 2:
        theta += 2 * np.pi
    target = max(theta - lead, end_angle)
    carrot = radius * np.array([np.cos(target), np.sin(target)])
    return env.clip(3.0 * (carrot - pos) - 1.5 * vel)


def _hold_action(env: EnvSpec, state: np.ndarray, point: np.ndarray) -> np.ndarray:
    return env.clip(3.0 * (point - state[:2]) - 1.5 * state[2:])


def _rollout(env, rng, s0, policy, action_noise, max_steps):
    S, A, Rw, NS, D = [], [], [], [], []
    s = s0
    for k in range(max_steps):
        a = env.clip(policy(k, s) + rng.normal(0.0, action_noise, env.action_dim))
        noise = rng.normal(0.0, env.process_noise_std, env.state_dim) if env.process_noise_std > 0 else None
        s2, r, done = step(env, s, a, noise)
        S.append(s); A.append(a); Rw.append(r); NS.append(s2); D.append(bool(done))
        s = s2
        if done:
            break
    return Trajectory(np.array(S), np.array(A), np.array(Rw), np.array(NS), np.array(D))


def _lqr_behaviour(env, rng, kind):
    _, K = riccati_solution(env)
    s0 = reset(env, rng)
    if kind == "lqr_optimal":
        gain, noise = K, 0.3
    elif kind == "lqr_weak":
        gain, noise = 0.4 * K, 0.3
    elif kind == "lqr_random_gain":
        gain, noise = rng.uniform(0.2, 1.5) * K, 0.5
    else:
        raise ValueError(f"unknown policy kind {kind!r}")
    return _rollout(env, rng, s0, lambda k, s: -gain @ s, noise, env.max_episode_steps)


def _pointring_behaviour(env, rng, kind, action_noise=0.3):
    mid = pointring_midpoint(env)
    if kind == "first_half_expert":
        s0 = reset(env, rng)

        def policy(k, s):
            if np.linalg.norm(s[:2] - mid) < 0.1:
                policy.arrived = True
            if policy.arrived:
                return _hold_action(env, s, mid)
            return _carrot_action(env, s, np.pi / 2)

        policy.arrived = False
        return _rollout(env, rng, s0, policy, action_noise, env.max_episode_steps)
    if kind == "second_half_expert":
        s0 = np.concatenate([mid + rng.normal(0.0, 0.03, 2), np.zeros(2)])
        wait = int(rng.integers(50, 71))

        def policy(k, s):
            if k < wait:
                return _hold_action(env, s, mid)
            return _carrot_action(env, s, 0.0)

        return _rollout(env, rng, s0, policy, action_noise, env.max_episode_steps)
    if kind == "random":
        s0 = reset(env, rng)
        return _rollout(env, rng, s0, lambda k, s: rng.uniform(-1, 1, 2), 0.0, env.max_episode_steps)
    raise ValueError(f"unknown policy kind {kind!r}")


POLICY_KINDS = {
    "lqr": ("lqr_optimal", "lqr_weak", "lqr_random_gain"),
    "pointring": ("first_half_expert", "second_half_expert", "random"),
}


def _allocate(fractions: Sequence[float], n: int) -> list[int]:
    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def generate_dataset(env: EnvSpec, behavior_mix, n_trajectories: int, seed: int) -> Dataset:
    """Roll out a mixture of behaviour policies; a pure function of its arguments."""
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be at least 1")
    kinds = [k for k, _ in behavior_mix]
    fractions = [f for _, f in behavior_mix]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("behaviour fractions must be non-negative and sum to 1")
    for k in kinds:
        if k not in POLICY_KINDS[env.name]:
            raise ValueError(f"unknown policy kind {k!r} for {env.name}")
    schedule = [k for k, c in zip(kinds, _allocate(fractions, n_trajectories)) for _ in range(c)]
    trajs = []
    for i, kind in enumerate(schedule):
        rng = np.random.default_rng([seed, i])
        if env.name == "lqr":
            trajs.append(_lqr_behaviour(env, rng, kind))
        else:
            trajs.append(_pointring_behaviour(env, rng, kind))
    return Dataset(trajs, env, seed)


DEFAULT_MIX = {
    "lqr": [("lqr_optimal", 1 / 3), ("lqr_weak", 1 / 3), ("lqr_random_gain", 1 / 3)],
    "pointring": [("first_half_expert", 0.5), ("second_half_expert", 0.5)],
}


# --------------------------------------------------------------------------
# File format
# --------------------------------------------------------------------------

DATASET_MAGIC = b"IPDT"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    code = "format"


class BadMagicError(DatasetFormatError):
    code = "bad_magic"


class VersionMismatchError(DatasetFormatError):
    code = "version_mismatch"


class TruncatedFileError(DatasetFormatError):
    code = "truncated"


class DimensionMismatchError(DatasetFormatError):
    code = "dimension_mismatch"


def _record_dtype(ds: int, da: int) -> np.dtype:
    return np.dtype(
        [("s", "<f4", (ds,)), ("a", "<f4", (da,)), ("r", "<f4"), ("ns", "<f4", (ds,)), ("term", "u1")]
    )


def dataset_bytes(ds: Dataset) -> bytes:
    env = ds.env
    name = env.name.encode("utf-8")
    parts = [
        DATASET_MAGIC,
        struct.pack("<I", DATASET_VERSION),
        struct.pack("<I", len(name)),
        name,
        struct.pack("<II", env.state_dim, env.action_dim),
        env.action_low.astype("<f4").tobytes(),
        env.action_high.astype("<f4").tobytes(),
        struct.pack("<I", env.max_episode_steps),
        struct.pack("<I", len(ds.trajectories)),
    ]
    rec = _record_dtype(env.state_dim, env.action_dim)
    for tr in ds.trajectories:
        src = -1 if tr.source_index is None else tr.source_index
        parts.append(struct.pack("<BqI", PROVENANCE.index(tr.provenance), src, len(tr)))
        body = np.zeros(len(tr), dtype=rec)
        if len(tr):
            body["s"], body["a"], body["r"] = tr.states, tr.actions, tr.rewards
            body["ns"], body["term"] = tr.next_states, tr.terminals
        parts.append(body.tobytes())
    return b"".join(parts)


def write_dataset(ds: Dataset, path) -> None:
    """Write atomically (temporary file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dataset_bytes(ds))
    tmp.replace(path)


def parse_dataset(data: bytes, env: EnvSpec | None = None) -> Dataset:
    if data[:4] != DATASET_MAGIC:
        raise BadMagicError("bad magic")
    try:
        off = 4
        (version,) = struct.unpack_from("<I", data, off); off += 4
        if version != DATASET_VERSION:
            raise VersionMismatchError(f"unsupported dataset version {version}")
        (n,) = struct.unpack_from("<I", data, off); off += 4
        if off + n > len(data):
            raise TruncatedFileError("truncated environment block")
        name = data[off:off + n].decode("utf-8"); off += n
        ds_, da_ = struct.unpack_from("<II", data, off); off += 8
        low = np.frombuffer(data, "<f4", da_, off).astype(np.float64); off += 4 * da_
        high = np.frombuffer(data, "<f4", da_, off).astype(np.float64); off += 4 * da_
        (max_steps,) = struct.unpack_from("<I", data, off); off += 4
        (n_traj,) = struct.unpack_from("<I", data, off); off += 4
    except (struct.error, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise TruncatedFileError("truncated header") from exc

    if name not in ENV_FACTORIES:
        raise DimensionMismatchError(f"unknown environment {name!r}")
    if env is None:
        env = make_env(name)
        if (env.state_dim, env.action_dim) != (ds_, da_):
            raise DimensionMismatchError("stored dimensions differ from the environment defaults; pass env")
        env = EnvSpec(name, ds_, da_, low, high, max_steps, env.dynamics_params, env.process_noise_std)
    elif (env.name, env.state_dim, env.action_dim) != (name, ds_, da_):
        raise DimensionMismatchError("stored environment block disagrees with the supplied env")

    rec = _record_dtype(ds_, da_)
    trajs = []
    for _ in range(n_traj):
        try:
            prov, src, count = struct.unpack_from("<BqI", data, off)
        except struct.error as exc:
            raise TruncatedFileError("truncated trajectory header") from exc
        off += struct.calcsize("<BqI")
        if prov >= len(PROVENANCE):
            raise DatasetFormatError(f"invalid provenance byte {prov}")
        if off + count * rec.itemsize > len(data):
            raise TruncatedFileError("truncated trajectory body")
        body = np.frombuffer(data, rec, count, off)
        off += count * rec.itemsize
        trajs.append(
            Trajectory(
                body["s"].reshape(count, ds_).copy(),
                body["a"].reshape(count, da_).copy(),
                body["r"].copy(),
                body["ns"].reshape(count, ds_).copy(),
                body["term"].astype(bool),
                PROVENANCE[prov],
                None if src < 0 else int(src),
            )
        )
    if off != len(data):
        raise DatasetFormatError("trailing bytes after the last trajectory")
    return Dataset(trajs, env)


def read_dataset(path, env: EnvSpec | None = None) -> Dataset:
    return parse_dataset(Path(path).read_bytes(), env)
