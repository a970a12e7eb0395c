"""Differentiable building blocks shared by every learner in the package.

Networks are ordinary ``torch.nn.Module`` objects computing in float64.
Parameters are initialised from a numpy generator so that a seed fully
determines the initial weights independently of torch's global RNG.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class CheckpointError(IOError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# --------------------------------------------------------------------------
# Parameter sets
# --------------------------------------------------------------------------


@dataclass
class ParameterSet:
    """Named float64 arrays plus the seed they were initialised from."""

    arrays: "OrderedDict[str, np.ndarray]"
    rng_seed: int = 0

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.arrays.values()]

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def flat(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, values: np.ndarray) -> "ParameterSet":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ShapeError(f"expected {self.size} values, got {values.shape}")
        out, i = OrderedDict(), 0
        for name, a in self.arrays.items():
            out[name] = values[i:i + a.size].reshape(a.shape).copy()
            i += a.size
        return ParameterSet(out, self.rng_seed)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    @classmethod
    def from_module(cls, module: nn.Module, rng_seed: int | None = None) -> "ParameterSet":
        arrays = OrderedDict(
            (name, p.detach().cpu().numpy().astype(np.float64).copy())
            for name, p in module.named_parameters()
        )
        if rng_seed is None:
            rng_seed = getattr(module, "seed", 0)
        return cls(arrays, int(rng_seed))

    def load_into(self, module: nn.Module) -> nn.Module:
        params = dict(module.named_parameters())
        if set(params) != set(self.arrays):
            raise ShapeError("parameter names do not match module")
        with torch.no_grad():
            for name, a in self.arrays.items():
                if tuple(params[name].shape) != a.shape:
                    raise ShapeError(f"{name}: {tuple(params[name].shape)} vs {a.shape}")
                params[name].copy_(torch.as_tensor(a))
        return module


def _uniform_init(linear: nn.Linear, rng: np.random.Generator, zero: bool = False) -> None:
    fan_in = linear.in_features
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        if zero:
            linear.weight.zero_()
            linear.bias.zero_()
        else:
            linear.weight.copy_(torch.as_tensor(rng.uniform(-bound, bound, tuple(linear.weight.shape))))
            linear.bias.copy_(torch.as_tensor(rng.uniform(-bound, bound, tuple(linear.bias.shape))))


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------


class DenseNetwork(nn.Module):
    """Fully connected ReLU network with optional LayerNorm and dropout."""

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden_widths: Sequence[int] = (64, 64),
        activation: str = "relu",
        uses_layernorm: bool = False,
        dropout_rate: float = 0.0,
        zero_output: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        if activation != "relu":
            raise ValueError(f"unsupported activation {activation!r}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.uses_layernorm = uses_layernorm
        self.dropout_rate = dropout_rate
        self.seed = int(seed)

        rng = np.random.default_rng(self.seed)
        layers: list[nn.Module] = []
        width = self.input_dim
        for h in self.hidden_widths:
            lin = nn.Linear(width, h, dtype=DTYPE)
            _uniform_init(lin, rng)
            layers.append(lin)
            if uses_layernorm:
                layers.append(nn.LayerNorm(h, dtype=DTYPE))
            layers.append(nn.ReLU())
            if dropout_rate > 0:
                layers.append(nn.Dropout(dropout_rate))
            width = h
        head = nn.Linear(width, self.output_dim, dtype=DTYPE)
        _uniform_init(head, rng, zero=zero_output)
        layers.append(head)
        self.body = nn.Sequential(*layers)

    @property
    def head(self) -> nn.Linear:
        return self.body[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def forward_rowwise(self, x: torch.Tensor) -> torch.Tensor:
        """Inference forward whose per-row result does not depend on the batch.

        BLAS kernels pick their blocking from the batch size, so ``forward`` can
        differ in the last bit between a row evaluated alone and inside a batch.
        Here every reduction is a plain last-axis sum.  Dropout is skipped.
        """
        for layer in self.body:
            if isinstance(layer, nn.Linear):
                x = (x.unsqueeze(-2) * layer.weight).sum(-1) + layer.bias
            elif isinstance(layer, nn.LayerNorm):
                n = x.shape[-1]
                mu = x.sum(-1, keepdim=True) / n
                c = x - mu
                var = (c * c).sum(-1, keepdim=True) / n
                x = c / torch.sqrt(var + layer.eps) * layer.weight + layer.bias
            elif isinstance(layer, nn.ReLU):
                x = torch.relu(x)
        return x


class CausalSelfAttention(nn.Module):
    def __init__(self, embed_dim: int, n_heads: int, dropout_rate: float, rng: np.random.Generator):
        super().__init__()
        if embed_dim % n_heads:
            raise ShapeError("embed_dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim, dtype=DTYPE)
        self.proj = nn.Linear(embed_dim, embed_dim, dtype=DTYPE)
        _uniform_init(self.qkv, rng)
        _uniform_init(self.proj, rng)
        self.drop = nn.Dropout(dropout_rate)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        B, T, C = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).split(C, dim=-1)
        q = q.view(B, T, h, C // h).transpose(1, 2)
        k = k.view(B, T, h, C // h).transpose(1, 2)
        v = v.view(B, T, h, C // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // h)
        mask = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        if pad is not None:
            # padded keys are hidden; a padded query still sees itself so no row is empty
            eye = torch.eye(T, dtype=torch.bool, device=x.device)
            mask = mask | (pad[:, None, None, :] & ~eye)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        att = self.drop(att)
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.drop(self.proj(y))


class TransformerBlock(nn.Module):
    def __init__(self, embed_dim: int, n_heads: int, dropout_rate: float, rng: np.random.Generator):
        super().__init__()
        self.ln1 = nn.LayerNorm(embed_dim, dtype=DTYPE)
        self.attn = CausalSelfAttention(embed_dim, n_heads, dropout_rate, rng)
        self.ln2 = nn.LayerNorm(embed_dim, dtype=DTYPE)
        fc1 = nn.Linear(embed_dim, 4 * embed_dim, dtype=DTYPE)
        fc2 = nn.Linear(4 * embed_dim, embed_dim, dtype=DTYPE)
        _uniform_init(fc1, rng)
        _uniform_init(fc2, rng)
        self.mlp = nn.Sequential(fc1, nn.ReLU(), fc2, nn.Dropout(dropout_rate))

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), pad)
        return x + self.mlp(self.ln2(x))


class CausalTransformer(nn.Module):
    """Pre-LayerNorm GPT-style stack over already-embedded tokens."""

    def __init__(
        self,
        n_layers: int = 2,
        n_heads: int = 4,
        embed_dim: int = 64,
        max_context: int = 64,
        dropout_rate: float = 0.0,
        seed: int = 0,
    ):
        super().__init__()
        if embed_dim % n_heads:
            raise ShapeError("embed_dim must be divisible by n_heads")
        self.n_layers, self.n_heads = n_layers, n_heads
        self.embed_dim, self.max_context = embed_dim, max_context
        self.dropout_rate = dropout_rate
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.blocks = nn.ModuleList(
            TransformerBlock(embed_dim, n_heads, dropout_rate, rng) for _ in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(embed_dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        """``pad`` is an optional (B, T) boolean mask, True at padding positions."""
        if x.ndim != 3 or x.shape[-1] != self.embed_dim:
            raise ShapeError(f"expected (B, T, {self.embed_dim}), got {tuple(x.shape)}")
        if x.shape[1] > self.max_context:
            raise ShapeError(f"sequence of {x.shape[1]} tokens exceeds max_context {self.max_context}")
        if pad is not None and pad.shape != x.shape[:2]:
            raise ShapeError(f"pad mask shape {tuple(pad.shape)} does not match {tuple(x.shape[:2])}")
        for block in self.blocks:
            x = block(x, pad)
        return self.ln_f(x)


def forward(net: nn.Module, x, params: ParameterSet | None = None) -> torch.Tensor:
    """Evaluate ``net`` on ``x``, optionally with an external parameter set."""
    x = as_tensor(x)
    expected = getattr(net, "input_dim", None)
    if expected is not None and x.shape[-1] != expected:
        raise ShapeError(f"input has {x.shape[-1]} features, network expects {expected}")
    if params is not None:
        if not params.is_finite():
            raise NumericError("non-finite parameters")
        tensors = {k: torch.as_tensor(v) for k, v in params.arrays.items()}
        return torch.func.functional_call(net, tensors, (x,))
    for name, p in net.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericError(f"non-finite parameter {name}")
    return net(x)


# --------------------------------------------------------------------------
# Gradients
# --------------------------------------------------------------------------


def _params(net) -> list[tuple[str, torch.Tensor]]:
    if isinstance(net, nn.Module):
        return list(net.named_parameters())
    return [(f"p{i}", p) for i, p in enumerate(net)]


def gradient(net, loss_fn: Callable, batch=None) -> np.ndarray:
    """Flat gradient of ``loss_fn(batch)`` with respect to the parameters of ``net``."""
    named = _params(net)
    tensors = [p for _, p in named]
    loss = loss_fn(batch)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = []
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
        out.append(g.detach().reshape(-1))
    return torch.cat(out).cpu().numpy() if out else np.zeros(0)


@dataclass
class GradientReport:
    max_rel_error: float
    argmax_index: int
    checked: int = 0


def finite_diff_check(
    net,
    loss_fn: Callable,
    batch=None,
    step: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
    atol: float = 1e-6,
) -> GradientReport:
    """Compare analytic gradients against central differences.

    The relative error of a coordinate is ``|g - g_fd| / max(|g|, |g_fd|, atol)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    analytic = gradient(net, loss_fn, batch)
    tensors = [p for _, p in _params(net)]
    sizes = [p.numel() for p in tensors]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    n = min(max(n_coords, 64), total)
    coords = np.sort(rng.choice(total, size=n, replace=False))

    worst, worst_idx = 0.0, -1
    with torch.no_grad():
        for c in coords:
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            flat = tensors[k].view(-1)
            j = int(c - offsets[k])
            orig = flat[j].item()
            flat[j] = orig + step
            up = float(loss_fn(batch))
            flat[j] = orig - step
            down = float(loss_fn(batch))
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            if err > worst:
                worst, worst_idx = err, int(c)
    return GradientReport(worst, worst_idx, n)


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, learning_rate: float = 3e-4) -> "OptimizerState":
        params = np.asarray(params, dtype=np.float64)
        return cls(np.zeros_like(params), np.zeros_like(params), 0, learning_rate)


def adam_step(state: OptimizerState, params, grads) -> tuple[np.ndarray, OptimizerState]:
    """One bias-corrected Adam update on flat arrays (pure; returns new objects)."""
    if isinstance(params, ParameterSet):
        new_flat, new_state = adam_step(state, params.flat(), grads)
        return params.with_flat(new_flat), new_state
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.first_moment.shape:
        raise ShapeError(f"shape mismatch: params {p.shape}, grads {g.shape}, state {state.first_moment.shape}")
    b1, b2 = state.betas
    t = state.step_count + 1
    m = b1 * state.first_moment + (1 - b1) * g
    v = b2 * state.second_moment + (1 - b2) * g * g
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    p_new = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return p_new, OptimizerState(m, v, t, state.learning_rate, state.betas, state.eps)


def make_adam(modules: Iterable, lr: float = 3e-4) -> torch.optim.Adam:
    params = []
    for m in modules:
        params.extend(m.parameters() if isinstance(m, nn.Module) else [m])
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def soft_update(target, online, a: float):
    """Polyak blend ``(1 - a) * target + a * online``.

    Works on ``ParameterSet`` pairs (returns a new set) or on modules
    (updates ``target`` in place and returns it).
    """
    if not 0.0 < a <= 1.0:
        raise ValueError("smoothing coefficient must lie in (0, 1]")
    if isinstance(target, ParameterSet):
        if target.shapes != online.shapes:
            raise ShapeError("parameter shapes differ")
        out = OrderedDict(
            (k, (1.0 - a) * t + a * o) for (k, t), o in zip(target.arrays.items(), online.arrays.values())
        )
        return ParameterSet(out, target.rng_seed)
    with torch.no_grad():
        tp, op = list(target.parameters()), list(online.parameters())
        if [p.shape for p in tp] != [p.shape for p in op]:
            raise ShapeError("parameter shapes differ")
        for t, o in zip(tp, op):
            t.mul_(1.0 - a).add_(o, alpha=a)
    return target


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"IPDC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, blobs: Mapping[str, np.ndarray]) -> None:
    """Write named float64 blobs; shapes are not stored, only element counts."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8").ravel())
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", arr.size), arr.tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack_from("<I", data, 8)
        off, out = 12, OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            name = data[off + 4: off + 4 + n].decode("utf-8")
            off += 4 + n
            (k,) = struct.unpack_from("<Q", data, off)
            off += 8
            if off + 8 * k > len(data):
                raise CheckpointError("truncated checkpoint")
            out[name] = np.frombuffer(data, dtype="<f8", count=k, offset=off).astype(np.float64)
            off += 8 * k
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def module_blobs(prefix: str, module: nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict(
        (f"{prefix}.{name}", t.detach().cpu().numpy()) for name, t in module.state_dict().items()
    )


def load_module_blobs(prefix: str, module: nn.Module, blobs: Mapping[str, np.ndarray]) -> nn.Module:
    state = {}
    for name, t in module.state_dict().items():
        key = f"{prefix}.{name}"
        if key not in blobs:
            raise CheckpointError(f"missing blob {key}")
        arr = blobs[key]
        if arr.size != t.numel():
            raise CheckpointError(f"blob {key} has {arr.size} elements, expected {t.numel()}")
        state[name] = torch.as_tensor(arr.reshape(tuple(t.shape))).to(t.dtype)
    module.load_state_dict(state)
    return module
