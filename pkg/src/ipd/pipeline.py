"""Stage orchestration, configuration and sweeps.

A run lives in one output directory with a sub-directory per stage::

    <outdir>/gen-data/dataset.ipdt
    <outdir>/train-qov/qov.ckpt          metrics.ndjson
    <outdir>/train-wm/wm.ckpt            metrics.ndjson
    <outdir>/augment/dataset.ipdt        report.ndjson
    <outdir>/train-policy/policy.ckpt    metrics.ndjson
    <outdir>/eval/eval.csv               eval.ndjson
    <outdir>/sweep-scaling/scaling.csv
    <outdir>/sweep-prompt/prompt.csv
    <outdir>/report/*.csv

Every stage reads only upstream artifacts from disk, so deleting a stage's
directory and re-running it reproduces the same bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import envlab, imagine, qov, seqpolicy, worldmodel
from .diffcore import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-qov", "train-wm", "augment", "train-policy", "eval",
          "sweep-scaling", "sweep-prompt", "report")
EXIT_CODES = {name: 10 + i for i, name in enumerate(STAGES)}
CONFIG_EXIT = 2


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class StageInputError(FileNotFoundError):
    """A stage's upstream artifact is missing."""

    def __init__(self, stage: str, path: Path):
        self.stage, self.path = stage, Path(path)
        self.exit_code = EXIT_CODES[stage]
        super().__init__(f"{stage}: missing input {path}")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    # environment and data
    env: str = "pointring"
    n_trajectories: int = 60
    seed: int = 0
    outdir: str = "runs/default"
    dataset_path: str = ""           # empty: <outdir>/gen-data/dataset.ipdt
    # quasi-optimal value function
    tau: float = 0.7
    beta: float = 3.0
    delta: float = 0.96
    gamma: float = 0.99
    qov_dropout: float = 0.01
    soft_update_a: float = 0.005
    qov_lr: float = 3e-4
    qov_hidden: str = "256,256"
    qov_batch: int = 256
    qov_steps: int = 100_000
    # world model
    wm_ensemble: int = 3
    sigma_reg: float = math.exp(-4.5)
    gamma0: float = 1.0
    T_decay: float = 1e5
    alpha_c: float = 0.5
    alpha_r: float = 0.5
    logvar_low: float = -10.0
    logvar_high: float = 0.2
    wm_lr: float = 3e-4
    wm_hidden: str = "400,400"
    wm_batch: int = 256
    wm_steps: int = 100_000
    kappa_percentile: float = 0.95
    pair_norm: str = "as_written"
    # imaginary augmentation
    gamma_mpc: float = 0.99
    H_I: int = 10
    H_m: int = 10
    H_con: int = 10
    N_mpc: int = 3
    n_aug: float = 0.5
    aug_mode: str = "mpc"
    replace_windows: bool = False
    # sequence policy
    n_layers: int = 4
    dropout: float = 0.01
    embed_dim: int = 256
    n_heads: int = 4
    context_len: int = 20
    alpha: float = 0.1
    prompt: str = "qov"              # qov | fixed:<value> | fixed:mean | fixed:max | fixed:10xmax
    policy_lr: float = 3e-4
    policy_batch: int = 64
    policy_steps: int = 100_000
    # evaluation and sweeps
    eval_episodes: int = 10
    sweep_seeds: str = "0,1,2"
    scaling_grid: str = "0,0.1,0.25,0.5"
    rtg_grid: str = "mean,max,10xmax"
    alpha_grid: str = "0.01,0.1,1.0"

    @property
    def out(self) -> Path:
        return Path(self.outdir)

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    @property
    def dataset_file(self) -> Path:
        return Path(self.dataset_path) if self.dataset_path else self.stage_dir("gen-data") / "dataset.ipdt"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


PROFILES: dict[str, dict] = {
    # single-core desk scale; used for the PointRing studies
    "desk": dict(qov_hidden="64,64", qov_steps=10_000, wm_hidden="64,64", wm_steps=5_000,
                 n_layers=2, n_heads=2, embed_dim=32, context_len=5, dropout=0.0,
                 policy_batch=32, policy_steps=2_000),
    # smoke scale for the full chain
    "ci": dict(n_trajectories=12, qov_hidden="32,32", qov_steps=600, qov_batch=128,
               wm_hidden="32,32", wm_steps=300, wm_batch=128, n_layers=1, n_heads=2, embed_dim=16,
               context_len=4, dropout=0.0, policy_batch=16, policy_steps=150, eval_episodes=3,
               sweep_seeds="0", scaling_grid="0,0.5", rtg_grid="max"),
}

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(name: str, raw: str, line: int | None):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        if ftype in ("bool", bool):
            return _BOOL[raw.lower()]
        return raw
    except (ValueError, KeyError):
        raise ConfigError(f"bad value {raw!r} for {name} ({ftype})", line) from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    cfg = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    updates = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", n)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", n)
        if key in updates:
            raise ConfigError(f"duplicate key {key!r}", n)
        updates[key] = _coerce(key, value, n)
    cfg = cfg.replace(**updates)
    validate(cfg)
    return cfg


def load_config(path=None, profile: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then profile, then file, then explicit overrides, then ``IPD_SEED``."""
    cfg = RunConfig()
    if profile:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        cfg = cfg.replace(**PROFILES[profile])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        cfg = parse_config(p.read_text(), cfg)
    if overrides:
        cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    if os.environ.get("IPD_SEED"):
        try:
            cfg = cfg.replace(seed=int(os.environ["IPD_SEED"]))
        except ValueError:
            raise ConfigError(f"IPD_SEED must be an integer, got {os.environ['IPD_SEED']!r}") from None
    validate(cfg)
    return cfg


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def validate(cfg: RunConfig) -> None:
    """Build every module config once so bad values fail before any stage runs."""
    try:
        envlab.make_env(cfg.env)
        qov_config(cfg), wm_config(cfg), aug_config(cfg), policy_config(cfg)
        parse_prompt(cfg.prompt)
        _ints(cfg.sweep_seeds), _floats(cfg.scaling_grid), _floats(cfg.alpha_grid)
        for token in cfg.rtg_grid.split(","):
            parse_prompt("fixed:" + token.strip())
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if cfg.n_trajectories < 1:
        raise ConfigError("n_trajectories must be at least 1")
    if cfg.dataset_path and Path(cfg.dataset_path).resolve() == (cfg.out / "augment" / "dataset.ipdt").resolve():
        raise ConfigError("dataset_path must differ from the augmented dataset path")


def qov_config(cfg: RunConfig) -> qov.QovConfig:
    return qov.QovConfig(tau=cfg.tau, beta=cfg.beta, delta_percentile=cfg.delta, gamma=cfg.gamma,
                         soft_update_a=cfg.soft_update_a, lr=cfg.qov_lr, hidden=_ints(cfg.qov_hidden),
                         batch_size=cfg.qov_batch, dropout=cfg.qov_dropout)


def wm_config(cfg: RunConfig) -> worldmodel.WmConfig:
    return worldmodel.WmConfig(E=cfg.wm_ensemble, sigma_reg=cfg.sigma_reg, gamma0=cfg.gamma0,
                               T_decay=cfg.T_decay, alpha_c=cfg.alpha_c, alpha_r=cfg.alpha_r,
                               logvar_bounds=(cfg.logvar_low, cfg.logvar_high), lr=cfg.wm_lr,
                               kappa_percentile=cfg.kappa_percentile, hidden=_ints(cfg.wm_hidden),
                               batch_size=cfg.wm_batch, pair_norm=cfg.pair_norm)


def aug_config(cfg: RunConfig) -> imagine.AugConfig:
    return imagine.AugConfig(H_I=cfg.H_I, H_m=cfg.H_m, H_con=cfg.H_con, N_mpc=cfg.N_mpc,
                             gamma_mpc=cfg.gamma_mpc, N_aug=cfg.n_aug, mode=cfg.aug_mode,
                             replace_windows=cfg.replace_windows)


def parse_prompt(text: str) -> tuple[str, str | float | None]:
    """``qov`` -> (qov_value, None); ``fixed:<x>`` -> (fixed_rtg, x) with x numeric or mean/max/10xmax."""
    text = text.strip()
    if text in ("qov", "qov_value"):
        return "qov_value", None
    if text.startswith("fixed:"):
        value = text[len("fixed:"):].strip()
        if value in ("mean", "max", "10xmax"):
            return "fixed_rtg", value
        try:
            return "fixed_rtg", float(value)
        except ValueError:
            pass
    raise ValueError(f"prompt must be 'qov' or 'fixed:<number|mean|max|10xmax>', got {text!r}")


def resolve_rtg(token, dataset: envlab.Dataset, gamma: float) -> float:
    """Turn a symbolic fixed prompt into a number using the real trajectories' discounted returns."""
    if isinstance(token, float):
        return token
    returns = np.array([envlab.discounted_return(t, gamma) for t in dataset.real()])
    return {"mean": float(returns.mean()), "max": float(returns.max()),
            "10xmax": 10.0 * float(returns.max())}[token]


def policy_config(cfg: RunConfig, rtg_value: float = 0.0) -> seqpolicy.PolicyConfig:
    mode, _ = parse_prompt(cfg.prompt)
    return seqpolicy.PolicyConfig(n_layers=cfg.n_layers, n_heads=cfg.n_heads, embed_dim=cfg.embed_dim,
                                  context_len=cfg.context_len, dropout=cfg.dropout, alpha=cfg.alpha,
                                  prompt_mode=mode, fixed_rtg_value=rtg_value, lr=cfg.policy_lr,
                                  batch_size=cfg.policy_batch, gamma=cfg.gamma)


def config_text(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(RunConfig))


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    _atomic_write(Path(path), buf.getvalue().encode())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_ndjson(path: Path, records: list[dict]) -> None:
    _atomic_write(Path(path), "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode())


def metrics_records(stage: str, history: list[dict]) -> list[dict]:
    now = time.time()
    return [{"stage": stage, "step": h["step"], "time": now,
             "metrics": {k: v for k, v in h.items() if k != "step"}} for h in history]


def _need(stage: str, path: Path) -> Path:
    if not Path(path).exists():
        raise StageInputError(stage, path)
    return Path(path)


# --------------------------------------------------------------------------
# Artifact loading
# --------------------------------------------------------------------------


def env_of(cfg: RunConfig) -> envlab.EnvSpec:
    return envlab.make_env(cfg.env)


def load_real_dataset(cfg: RunConfig, stage: str) -> envlab.Dataset:
    return envlab.read_dataset(_need(stage, cfg.dataset_file), env_of(cfg))


def load_qov(cfg: RunConfig, stage: str) -> qov.QovModels:
    blobs = load_checkpoint(_need(stage, cfg.stage_dir("train-qov") / "qov.ckpt"))
    qc = qov_config(cfg)
    models = qov.QovModels.for_env(env_of(cfg), qc.hidden, cfg.seed, qc.dropout)
    models.load_blobs(blobs)
    return models.eval()


def load_wm(cfg: RunConfig, stage: str) -> tuple[worldmodel.WorldModel, worldmodel.ReliableSetParams]:
    blobs = load_checkpoint(_need(stage, cfg.stage_dir("train-wm") / "wm.ckpt"))
    env = env_of(cfg)
    wm = worldmodel.WorldModel(env.state_dim, env.action_dim, wm_config(cfg), cfg.seed)
    kappa = float(blobs.pop("reliable/kappa")[0])
    wm.load_blobs(blobs)
    return wm.eval(), worldmodel.ReliableSetParams(kappa)


def load_policy(cfg: RunConfig, stage: str, path: Path | None = None):
    path = path or cfg.stage_dir("train-policy") / "policy.ckpt"
    blobs = load_checkpoint(_need(stage, path))
    rtg = float(blobs.pop("prompt/fixed_rtg")[0])
    env = env_of(cfg)
    pc = policy_config(cfg, rtg)
    pol = seqpolicy.SequencePolicy(env.state_dim, env.action_dim, env.action_low, env.action_high, pc, cfg.seed)
    pol.load_blobs(blobs)
    return pol.eval(), pc


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def gen_data(cfg: RunConfig) -> envlab.Dataset:
    env = env_of(cfg)
    ds = envlab.generate_dataset(env, envlab.DEFAULT_MIX[cfg.env], cfg.n_trajectories, cfg.seed)
    envlab.write_dataset(ds, cfg.dataset_file)
    return ds


def train_qov_stage(cfg: RunConfig) -> qov.QovModels:
    ds = load_real_dataset(cfg, "train-qov")
    res = qov.train_qov(ds, qov_config(cfg), cfg.qov_steps, cfg.seed)
    d = cfg.stage_dir("train-qov")
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "qov.ckpt", res.models.blobs())
    write_ndjson(d / "metrics.ndjson", metrics_records("train-qov", res.log))
    return res.models


def train_wm_stage(cfg: RunConfig):
    ds = load_real_dataset(cfg, "train-wm")
    wc = wm_config(cfg)
    res = worldmodel.train_world_model(ds, wc, cfg.wm_steps, cfg.seed)
    reliable = worldmodel.calibrate_kappa(res.model, ds, wc.kappa_percentile)
    d = cfg.stage_dir("train-wm")
    d.mkdir(parents=True, exist_ok=True)
    blobs = res.model.blobs()
    blobs["reliable/kappa"] = np.array([reliable.kappa])
    save_checkpoint(d / "wm.ckpt", blobs)
    write_ndjson(d / "metrics.ndjson", metrics_records("train-wm", res.log) +
                 [{"stage": "train-wm", "step": cfg.wm_steps, "time": time.time(),
                   "metrics": {"kappa": reliable.kappa}}])
    return res.model, reliable


def augment_stage(cfg: RunConfig, out: Path | None = None, seed: int | None = None) -> imagine.AugmentResult:
    ds = load_real_dataset(cfg, "augment")
    models = load_qov(cfg, "augment")
    wm, reliable = load_wm(cfg, "augment")
    res = imagine.augment_dataset(ds, models, wm, reliable, aug_config(cfg), cfg.seed if seed is None else seed)
    out = out or cfg.stage_dir("augment")
    envlab.write_dataset(res.dataset, out / "dataset.ipdt")
    write_ndjson(out / "report.ndjson", [res.report])
    return res


def train_policy_stage(cfg: RunConfig, data_dir: Path | None = None, out: Path | None = None,
                       seed: int | None = None):
    env = env_of(cfg)
    data_dir = data_dir or cfg.stage_dir("augment")
    ds = envlab.read_dataset(_need("train-policy", data_dir / "dataset.ipdt"), env)
    real = load_real_dataset(cfg, "train-policy")
    models = load_qov(cfg, "train-policy")
    _, token = parse_prompt(cfg.prompt)
    rtg = resolve_rtg(token, real, cfg.gamma) if token is not None else 0.0
    pc = policy_config(cfg, rtg)
    # imagined segments take their history from the untouched real data
    res = seqpolicy.train_policy(ds, models, pc, cfg.policy_steps, cfg.seed if seed is None else seed,
                                 context_source=real)
    out = out or cfg.stage_dir("train-policy")
    out.mkdir(parents=True, exist_ok=True)
    blobs = res.policy.blobs()
    blobs["prompt/fixed_rtg"] = np.array([rtg])
    save_checkpoint(out / "policy.ckpt", blobs)
    write_ndjson(out / "metrics.ndjson", metrics_records("train-policy", res.log))
    return res.policy, pc


def eval_stage(cfg: RunConfig, policy_dir: Path | None = None, out: Path | None = None,
               seed: int | None = None) -> seqpolicy.EvalStats:
    policy_dir = policy_dir or cfg.stage_dir("train-policy")
    pol, pc = load_policy(cfg, "eval", policy_dir / "policy.ckpt")
    models = load_qov(cfg, "eval")
    stats = seqpolicy.evaluate_policy(pol, models, env_of(cfg), cfg.eval_episodes,
                                      cfg.seed if seed is None else seed, pc)
    out = out or cfg.stage_dir("eval")
    rows = [[i, r, n] for i, (r, n) in enumerate(zip(stats.returns, stats.steps))]
    write_csv(out / "eval.csv", ["episode", "return", "steps"], rows)
    write_ndjson(out / "eval.ndjson", [{"episode": i, "return": r, "steps": n} for i, r, n in rows])
    return stats


def upstream(cfg: RunConfig) -> None:
    """Generate data and train both critics unless their artifacts exist."""
    if not cfg.dataset_file.exists():
        gen_data(cfg)
    if not (cfg.stage_dir("train-qov") / "qov.ckpt").exists():
        train_qov_stage(cfg)
    if not (cfg.stage_dir("train-wm") / "wm.ckpt").exists():
        train_wm_stage(cfg)


def run_all(cfg: RunConfig) -> seqpolicy.EvalStats:
    gen_data(cfg)
    train_qov_stage(cfg)
    train_wm_stage(cfg)
    augment_stage(cfg)
    train_policy_stage(cfg)
    stats = eval_stage(cfg)
    report(cfg)
    return stats


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------


def _cell_key(cfg: RunConfig, seed: int) -> str:
    relevant = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)
                if f.name not in ("outdir", "dataset_path", "sweep_seeds", "scaling_grid", "rtg_grid", "alpha_grid")}
    relevant["cell_seed"] = seed
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]


def run_cell(cfg: RunConfig, seed: int) -> seqpolicy.EvalStats:
    """Augment, train and evaluate one downstream configuration on existing upstream artifacts.

    Cells are cached under ``<outdir>/cells/<key>``; identical settings share a cell.
    """
    cell = cfg.out / "cells" / _cell_key(cfg, seed)
    done = cell / "eval" / "eval.csv"
    if not done.exists():
        if cfg.n_aug > 0:
            augment_stage(cfg, cell / "augment", seed)
        else:
            # no augmentation: the real dataset is used unchanged
            envlab.write_dataset(load_real_dataset(cfg, "augment"), cell / "augment" / "dataset.ipdt")
        train_policy_stage(cfg, cell / "augment", cell / "train-policy", seed)
        eval_stage(cfg, cell / "train-policy", cell / "eval", seed)
        _atomic_write(cell / "config.txt", config_text(cfg).encode())
    returns = [float(r["return"]) for r in read_csv(done)]
    steps = [int(r["steps"]) for r in read_csv(done)]
    return seqpolicy.EvalStats(float(np.mean(returns)), float(np.std(returns)), returns, steps)


def sweep_scaling(cfg: RunConfig, grid=None, seeds=None) -> list[list]:
    grid = _floats(cfg.scaling_grid) if grid is None else tuple(grid)
    seeds = _ints(cfg.sweep_seeds) if seeds is None else tuple(seeds)
    upstream(cfg)
    rows = []
    for n_aug in grid:
        for s in seeds:
            st = run_cell(cfg.replace(n_aug=float(n_aug)), s)
            rows.append([float(n_aug), s, st.mean_return, st.std_return])
    write_csv(cfg.stage_dir("sweep-scaling") / "scaling.csv", ["n_aug", "seed", "mean_return", "std_return"], rows)
    return rows


def sweep_prompt(cfg: RunConfig, rtg_grid=None, seeds=None) -> list[list]:
    """Fixed-RTG arms plus exactly one qov_value arm per seed."""
    rtg_grid = [t.strip() for t in cfg.rtg_grid.split(",")] if rtg_grid is None else list(rtg_grid)
    seeds = _ints(cfg.sweep_seeds) if seeds is None else tuple(seeds)
    upstream(cfg)
    real = load_real_dataset(cfg, "sweep-prompt")
    rows = []
    for s in seeds:
        st = run_cell(cfg.replace(prompt="qov"), s)
        rows.append(["qov_value", "", s, st.mean_return, st.std_return])
        for token in rtg_grid:
            _, parsed = parse_prompt(f"fixed:{token}")
            value = resolve_rtg(parsed, real, cfg.gamma)
            st = run_cell(cfg.replace(prompt=f"fixed:{token}"), s)
            rows.append([f"fixed:{token}", value, s, st.mean_return, st.std_return])
    write_csv(cfg.stage_dir("sweep-prompt") / "prompt.csv",
              ["prompt", "rtg_value", "seed", "mean_return", "std_return"], rows)
    return rows


def standard_arms(cfg: RunConfig) -> dict[str, dict]:
    """Named overrides for the ablation arms used in the PointRing studies."""
    arms = {
        "ipd": {},
        "dt": dict(alpha=0.0, n_aug=0.0, prompt="fixed:max"),
        "greedy": dict(aug_mode="greedy"),
    }
    for v in _floats(cfg.scaling_grid):
        arms[f"n_aug={v:g}"] = dict(n_aug=v)
    for token in cfg.rtg_grid.split(","):
        arms[f"fixed:{token.strip()}"] = dict(prompt=f"fixed:{token.strip()}")
    return arms


def seed_study(cfg: RunConfig, seeds, arms: dict[str, dict]) -> dict[str, list[seqpolicy.EvalStats]]:
    """Run every arm under independent seeds; each seed gets its own data and critics.

    Seed ``s`` uses ``<outdir>/seed-<s>`` as a self-contained run directory.
    """
    results: dict[str, list[seqpolicy.EvalStats]] = {name: [] for name in arms}
    for s in seeds:
        base = cfg.replace(seed=int(s), outdir=str(cfg.out / f"seed-{s}"), dataset_path="")
        upstream(base)
        for name, overrides in arms.items():
            results[name].append(run_cell(base.replace(**overrides), int(s)))
    return results


def report(cfg: RunConfig) -> list[Path]:
    """Collect whatever results exist into plot-ready CSV tables."""
    out = cfg.stage_dir("report")
    written = []
    eval_csv = cfg.stage_dir("eval") / "eval.csv"
    if eval_csv.exists():
        rets = [float(r["return"]) for r in read_csv(eval_csv)]
        write_csv(out / "summary.csv", ["metric", "value"],
                  [["mean_return", float(np.mean(rets))], ["std_return", float(np.std(rets))],
                   ["episodes", len(rets)]])
        written.append(out / "summary.csv")
    for stage, name, key in (("sweep-scaling", "scaling.csv", "n_aug"), ("sweep-prompt", "prompt.csv", "prompt")):
        src = cfg.stage_dir(stage) / name
        if not src.exists():
            continue
        groups: dict[str, list[float]] = {}
        for r in read_csv(src):
            groups.setdefault(r[key], []).append(float(r["mean_return"]))
        rows = [[k, float(np.mean(v)), float(np.std(v)), len(v)] for k, v in groups.items()]
        write_csv(out / f"{stage}-summary.csv", [key, "mean_return", "std_across_seeds", "n_seeds"], rows)
        written.append(out / f"{stage}-summary.csv")
    aug = cfg.stage_dir("augment") / "report.ndjson"
    if aug.exists():
        rec = json.loads(aug.read_text().splitlines()[0])
        write_csv(out / "augment.csv", list(rec), [list(rec.values())])
        written.append(out / "augment.csv")
    if not written:
        raise StageInputError("report", cfg.stage_dir("eval") / "eval.csv")
    return written


def seed_everything() -> None:
    """Single-threaded float64 torch, which keeps runs bitwise reproducible."""
    torch.set_num_threads(1)
