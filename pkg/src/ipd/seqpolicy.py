"""Value-prompted causal Transformer policy.

Each timestep contributes three tokens ``(prompt, state, action)``; the action
is read off the hidden state of the state token.  In ``qov_value`` mode the
prompt is the learned state value instead of a hand-set return-to-go, so the
policy never needs a target return at test time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .diffcore import DTYPE, CausalTransformer, NumericError, as_tensor, load_module_blobs, make_adam, module_blobs
from .envlab import Dataset, EnvSpec, decode_source, reset, step
from .qov import DIVERGENCE_LIMIT

log = logging.getLogger(__name__)

PROMPT_MODES = ("qov_value", "fixed_rtg")


@dataclass
class PolicyConfig:
    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 256
    context_len: int = 20
    dropout: float = 0.01
    alpha: float = 0.1
    prompt_mode: str = "qov_value"
    fixed_rtg_value: float = 0.0
    lr: float = 3e-4
    batch_size: int = 64
    gamma: float = 0.99
    max_timestep: int = 1024
    log_every: int = 200

    def __post_init__(self):
        if self.context_len < 1:
            raise ValueError("context_len must be at least 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def value_prompt(qov, states) -> np.ndarray:
    """V(s) through the batch-invariant path, so a state's prompt has the same bits in any batch."""
    with torch.no_grad():
        return qov.v_net.forward_rowwise(as_tensor(states)).squeeze(-1).numpy()


@dataclass
class TokenSequence:
    prompts: np.ndarray      # (T,)
    states: np.ndarray       # (T, ds)
    actions: np.ndarray      # (T - 1, da); the current step has no action yet
    timesteps: np.ndarray    # (T,)

    @property
    def n_tokens(self) -> int:
        return 3 * len(self.prompts) - 1


def tokenize(history, current_state, qov, cfg: PolicyConfig, t0: int = 0) -> TokenSequence:
    """Build the prompt/state/action sequence for the current decision.

    ``history`` is the full list of past ``(s, a)`` pairs of the episode, whose
    first entry happened at timestep ``t0``.  Entries beyond the context window
    are dropped oldest first.
    """
    keep = list(history)[max(0, len(history) - (cfg.context_len - 1)):] if cfg.context_len > 1 else []
    first = t0 + len(history) - len(keep)
    cur = np.asarray(current_state, dtype=np.float64)
    states = np.stack([np.asarray(s, dtype=np.float64) for s, _ in keep] + [cur])
    if keep:
        actions = np.stack([np.asarray(a, dtype=np.float64) for _, a in keep])
    else:
        actions = np.zeros((0, int(qov.action_dim)))
    if cfg.prompt_mode == "qov_value":
        prompts = value_prompt(qov, states)
    else:
        prompts = np.full(len(states), float(cfg.fixed_rtg_value))
    return TokenSequence(prompts, states, actions, np.arange(first, first + len(states)))


class SequencePolicy(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, action_low, action_high, cfg: PolicyConfig,
                 seed: int = 0, state_mean=None, state_std=None, prompt_mean: float = 0.0,
                 prompt_std: float = 1.0):
        super().__init__()
        self.state_dim, self.action_dim = state_dim, action_dim
        self.context_len = cfg.context_len
        self.max_timestep = cfg.max_timestep
        d = cfg.embed_dim
        low, high = as_tensor(action_low).reshape(-1), as_tensor(action_high).reshape(-1)
        self.register_buffer("action_mid", (high + low) / 2)
        self.register_buffer("action_half", (high - low) / 2)
        self.register_buffer("state_mean", as_tensor(np.zeros(state_dim) if state_mean is None else state_mean))
        self.register_buffer("state_std", as_tensor(np.ones(state_dim) if state_std is None else state_std))
        self.register_buffer("prompt_stats", as_tensor([prompt_mean, prompt_std]))

        gen = torch.Generator().manual_seed(int(seed) * 7919 + 17)
        self.embed_prompt = nn.Linear(1, d, dtype=DTYPE)
        self.embed_state = nn.Linear(state_dim, d, dtype=DTYPE)
        self.embed_action = nn.Linear(action_dim, d, dtype=DTYPE)
        self.embed_time = nn.Embedding(cfg.max_timestep, d, dtype=DTYPE)
        self.embed_ln = nn.LayerNorm(d, dtype=DTYPE)
        self.head = nn.Linear(d, action_dim, dtype=DTYPE)
        with torch.no_grad():
            for lin in (self.embed_prompt, self.embed_state, self.embed_action):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            self.embed_time.weight.normal_(0.0, 0.02, generator=gen)
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.transformer = CausalTransformer(cfg.n_layers, cfg.n_heads, d, 3 * cfg.context_len,
                                             cfg.dropout, seed=int(seed) * 7919 + 23)

    @classmethod
    def for_data(cls, env: EnvSpec, states: np.ndarray, prompts: np.ndarray, cfg: PolicyConfig, seed: int = 0):
        return cls(env.state_dim, env.action_dim, env.action_low, env.action_high, cfg, seed,
                   states.mean(0), np.maximum(states.std(0), 1e-3),
                   float(prompts.mean()), float(max(prompts.std(), 1e-3)))

    def forward(self, prompts, states, actions, timesteps, pad=None) -> torch.Tensor:
        """Predicted actions at every state position.

        ``prompts`` (B, T), ``states`` (B, T, ds), ``actions`` (B, T, da) (the
        last slot is ignored), ``timesteps`` (B, T) integers, ``pad`` (B, T) bool.
        """
        B, T = prompts.shape
        if T > self.context_len:
            raise ValueError(f"window of {T} steps exceeds context_len {self.context_len}")
        time = self.embed_time(timesteps.clamp(0, self.max_timestep - 1))
        p = (prompts - self.prompt_stats[0]) / self.prompt_stats[1]
        e_p = self.embed_prompt(p.unsqueeze(-1)) + time
        e_s = self.embed_state((states - self.state_mean) / self.state_std) + time
        e_a = self.embed_action((actions - self.action_mid) / self.action_half) + time
        x = self.embed_ln(torch.stack([e_p, e_s, e_a], dim=2).reshape(B, 3 * T, -1))
        token_pad = None if pad is None else pad.repeat_interleave(3, dim=1)
        h = self.transformer(x, token_pad)
        h_state = h[:, 1::3]
        return self.action_mid + self.action_half * torch.tanh(self.head(h_state))

    def blobs(self):
        return module_blobs("policy", self)

    def load_blobs(self, blobs):
        return load_module_blobs("policy", self, blobs)


# --------------------------------------------------------------------------
# Training data
# --------------------------------------------------------------------------


@dataclass
class WindowData:
    """Every trajectory laid out in one buffer with ``K - 1`` padding rows in front.

    Imagined segments are preceded by the real history before their seed
    state, so their windows see the same kind of context as real ones.
    """

    prompts: torch.Tensor
    states: torch.Tensor
    actions: torch.Tensor
    timesteps: torch.Tensor
    pad: torch.Tensor
    sample_positions: np.ndarray   # buffer rows that hold a dataset transition

    def windows(self, ends: np.ndarray, K: int):
        idx = torch.as_tensor(ends[:, None] + np.arange(-K + 1, 1)[None, :])
        return {"prompts": self.prompts[idx], "states": self.states[idx], "actions": self.actions[idx],
                "timesteps": self.timesteps[idx], "pad": self.pad[idx]}


def _rtg(rewards: np.ndarray, gamma: float, tail: float = 0.0) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = tail
    for k in range(len(rewards) - 1, -1, -1):
        acc = rewards[k] + gamma * acc
        out[k] = acc
    return out


def build_windows(dataset: Dataset, qov, cfg: PolicyConfig, context_source: Dataset | None = None) -> WindowData:
    if dataset.n_transitions == 0:
        raise ValueError("dataset is empty")
    source = dataset if context_source is None else context_source
    K = cfg.context_len
    ds, da = dataset.env.state_dim, dataset.env.action_dim
    S, A, P, TS, PAD = [], [], [], [], []
    positions = []
    row = 0
    for traj in dataset.trajectories:
        prefix_s = np.zeros((0, ds))
        prefix_a = np.zeros((0, da))
        t0 = 0
        if traj.provenance == "imagined" and traj.source_index is not None:
            i, t0 = decode_source(traj.source_index)
            src = source.trajectories[i]
            lo = max(0, t0 - (K - 1))
            prefix_s = src.states[lo:t0].astype(np.float64)
            prefix_a = src.actions[lo:t0].astype(np.float64)
        states = np.concatenate([prefix_s, traj.states.astype(np.float64)])
        actions = np.concatenate([prefix_a, traj.actions.astype(np.float64)])
        n_pre = len(prefix_s)
        if cfg.prompt_mode == "qov_value":
            prompts = value_prompt(qov, states)
        else:
            tail = 0.0
            if traj.provenance == "imagined" and not traj.terminals[-1]:
                tail = float(value_prompt(qov, traj.next_states[-1:].astype(np.float64))[0])
            seg = _rtg(traj.rewards.astype(np.float64), cfg.gamma, tail)
            # prefix steps borrow the segment's first prompt
            prompts = np.concatenate([np.full(n_pre, seg[0]), seg])
        first_t = t0 - n_pre
        n = len(states)
        S.append(np.zeros((K - 1, ds))); A.append(np.zeros((K - 1, da)))
        P.append(np.zeros(K - 1)); TS.append(np.zeros(K - 1, dtype=np.int64)); PAD.append(np.ones(K - 1, bool))
        S.append(states); A.append(actions); P.append(prompts)
        TS.append(np.arange(first_t, first_t + n)); PAD.append(np.zeros(n, bool))
        base = row + K - 1
        positions.append(base + n_pre + np.arange(len(traj)))
        row = base + n
    return WindowData(torch.as_tensor(np.concatenate(P)), torch.as_tensor(np.concatenate(S)),
                      torch.as_tensor(np.concatenate(A)), torch.as_tensor(np.concatenate(TS)),
                      torch.as_tensor(np.concatenate(PAD)), np.concatenate(positions))


# --------------------------------------------------------------------------
# Loss and training
# --------------------------------------------------------------------------


def ipd_loss(policy: SequencePolicy, qov, batch, cfg: PolicyConfig, alpha: float | None = None,
             parts: bool = False):
    """Squared action error minus ``alpha`` times the frozen min-target Q of the predicted action.

    Both terms average over every non-padded position of every window.
    """
    alpha = cfg.alpha if alpha is None else alpha
    pred = policy(batch["prompts"], batch["states"], batch["actions"], batch["timesteps"], batch.get("pad"))
    valid = torch.ones(pred.shape[:2], dtype=DTYPE) if batch.get("pad") is None else (~batch["pad"]).to(DTYPE)
    n = valid.sum()
    mse = (((pred - batch["actions"]) ** 2).sum(-1) * valid).sum() / n
    if alpha != 0:
        q = (qov.q_target(batch["states"], pred) * valid).sum() / n
    else:
        q = torch.zeros((), dtype=DTYPE)
    loss = mse - alpha * q
    if not torch.isfinite(loss):
        raise NumericError("non-finite policy loss")
    return (loss, mse, q) if parts else loss


@dataclass
class PolicyResult:
    policy: SequencePolicy
    log: list[dict] = field(default_factory=list)


def train_policy(dataset: Dataset, qov, cfg: PolicyConfig, steps: int, seed: int = 0,
                 context_source: Dataset | None = None) -> PolicyResult:
    """Adam on ``ipd_loss``; windows end at transitions drawn uniformly over the whole dataset."""
    data = build_windows(dataset, qov, cfg, context_source)
    valid = ~data.pad.numpy()
    policy = SequencePolicy.for_data(dataset.env, data.states.numpy()[valid], data.prompts.numpy()[valid], cfg, seed)
    opt = make_adam([policy], cfg.lr)
    rng = np.random.default_rng([seed, 0x5E9])
    history: list[dict] = []
    policy.train()
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2**62)))
        for k in range(steps):
            ends = data.sample_positions[rng.integers(0, len(data.sample_positions), cfg.batch_size)]
            batch = data.windows(ends, cfg.context_len)
            loss, mse, q = ipd_loss(policy, qov, batch, cfg, parts=True)
            opt.zero_grad(); loss.backward(); opt.step()
            if not abs(loss.item()) < DIVERGENCE_LIMIT:
                raise NumericError(f"policy training diverged at step {k}")
            if k % cfg.log_every == 0 or k == steps - 1:
                history.append({"step": k, "loss": loss.item(), "mse": mse.item(), "q": q.item()})
                log.debug("policy step %d %s", k, history[-1])
    policy.eval()
    return PolicyResult(policy, history)


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


def _forward_tokens(policy: SequencePolicy, tokens: list[TokenSequence]) -> np.ndarray:
    """Batched action for sequences of equal length."""
    T = len(tokens[0].prompts)
    da = policy.action_dim
    actions = np.zeros((len(tokens), T, da))
    if T > 1:
        actions[:, :-1] = np.stack([t.actions for t in tokens])
    with torch.no_grad():
        pred = policy(torch.as_tensor(np.stack([t.prompts for t in tokens])),
                      torch.as_tensor(np.stack([t.states for t in tokens])),
                      torch.as_tensor(actions),
                      torch.as_tensor(np.stack([t.timesteps for t in tokens])))
    return pred[:, -1].numpy()


def act(policy: SequencePolicy, qov, history, current_state, cfg: PolicyConfig, t0: int = 0) -> np.ndarray:
    """Deterministic action for ``current_state`` given the episode so far."""
    was_training = policy.training
    policy.eval()
    try:
        a = _forward_tokens(policy, [tokenize(history, current_state, qov, cfg, t0)])[0]
    finally:
        policy.train(was_training)
    return np.clip(a, policy.action_mid.numpy() - policy.action_half.numpy(),
                   policy.action_mid.numpy() + policy.action_half.numpy())


@dataclass
class EvalStats:
    mean_return: float
    std_return: float
    returns: list[float]
    steps: list[int]


def evaluate_policy(policy: SequencePolicy, qov, env: EnvSpec, n_episodes: int, seed: int,
                    cfg: PolicyConfig, initial_states=None) -> EvalStats:
    """Closed-loop episodes in the true environment, run in lock step.

    Episode ``i`` starts from ``reset`` with ``default_rng([seed, i])`` unless
    ``initial_states`` is given.  Returns are undiscounted.
    """
    if n_episodes == 0:
        return EvalStats(float("nan"), float("nan"), [], [])
    if initial_states is None:
        states = np.stack([reset(env, np.random.default_rng([seed, i])) for i in range(n_episodes)])
    else:
        states = np.asarray(initial_states, dtype=np.float64).reshape(n_episodes, env.state_dim)
    noise_rngs = [np.random.default_rng([seed, i, 1]) for i in range(n_episodes)]
    histories: list[list] = [[] for _ in range(n_episodes)]
    returns = np.zeros(n_episodes)
    lengths = np.zeros(n_episodes, dtype=int)
    active = np.ones(n_episodes, dtype=bool)
    policy.eval()
    for k in range(env.max_episode_steps):
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        tokens = [tokenize(histories[i], states[i], qov, cfg) for i in idx]
        actions = np.clip(_forward_tokens(policy, tokens), env.action_low, env.action_high)
        for j, i in enumerate(idx):
            noise = None
            if env.process_noise_std > 0:
                noise = noise_rngs[i].normal(0.0, env.process_noise_std, env.state_dim)
            s2, r, done = step(env, states[i], actions[j], noise)
            histories[i].append((states[i].copy(), actions[j].copy()))
            returns[i] += float(r)
            lengths[i] += 1
            states[i] = s2
            if done:
                active[i] = False
    return EvalStats(float(returns.mean()), float(returns.std()), returns.tolist(), lengths.tolist())
