"""Command-line entry point: ``python -m ipd <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl

SUBCOMMANDS = ("gen-data", "train-qov", "train-wm", "augment", "train-policy", "eval",
               "sweep-scaling", "sweep-prompt", "report", "run-all")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--profile", choices=sorted(pl.PROFILES), help="preset step counts and widths")
    common.add_argument("--outdir", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="global seed (IPD_SEED still wins)")
    common.add_argument("--env", choices=("lqr", "pointring"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ipd", description="Imaginary planning distillation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("augment", "run-all", "sweep-scaling", "sweep-prompt"):
            p.add_argument("--mode", choices=("mpc", "greedy"), dest="aug_mode")
            p.add_argument("--n-aug", type=float, dest="n_aug")
            p.add_argument("--replace-windows", action="store_true", default=None, dest="replace_windows")
        if name in ("train-policy", "eval", "run-all", "sweep-scaling", "sweep-prompt"):
            p.add_argument("--alpha", type=float)
            p.add_argument("--prompt", help="qov or fixed:<value|mean|max|10xmax>")
        if name == "sweep-scaling":
            p.add_argument("--grid", help="comma-separated n_aug values", dest="scaling_grid")
            p.add_argument("--seeds", dest="sweep_seeds")
        if name == "sweep-prompt":
            p.add_argument("--grid", help="comma-separated fixed prompts", dest="rtg_grid")
            p.add_argument("--seeds", dest="sweep_seeds")
    return parser


OVERRIDE_KEYS = ("outdir", "seed", "env", "aug_mode", "n_aug", "replace_windows", "alpha", "prompt",
                 "scaling_grid", "sweep_seeds", "rtg_grid")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    pl.seed_everything()
    try:
        cfg = pl.load_config(args.config, args.profile,
                             {k: getattr(args, k, None) for k in OVERRIDE_KEYS})
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return pl.CONFIG_EXIT
    try:
        return _dispatch(args.command, cfg)
    except pl.StageInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def _dispatch(command: str, cfg: pl.RunConfig) -> int:
    if command == "gen-data":
        ds = pl.gen_data(cfg)
        print(f"wrote {len(ds)} trajectories ({ds.n_transitions} transitions) to {cfg.dataset_file}")
    elif command == "train-qov":
        pl.train_qov_stage(cfg)
        print(f"wrote {cfg.stage_dir('train-qov') / 'qov.ckpt'}")
    elif command == "train-wm":
        _, reliable = pl.train_wm_stage(cfg)
        print(f"wrote {cfg.stage_dir('train-wm') / 'wm.ckpt'} (kappa = {reliable.kappa:.6g})")
    elif command == "augment":
        res = pl.augment_stage(cfg)
        print(" ".join(f"{k}={v}" for k, v in res.report.items()))
    elif command == "train-policy":
        pl.train_policy_stage(cfg)
        print(f"wrote {cfg.stage_dir('train-policy') / 'policy.ckpt'}")
    elif command == "eval":
        st = pl.eval_stage(cfg)
        print(f"mean return {st.mean_return:.3f} +- {st.std_return:.3f} over {len(st.returns)} episodes")
    elif command == "sweep-scaling":
        for row in pl.sweep_scaling(cfg):
            print(f"n_aug={row[0]:g} seed={row[1]} mean_return={row[2]:.3f}")
    elif command == "sweep-prompt":
        for row in pl.sweep_prompt(cfg):
            print(f"{row[0]} seed={row[2]} mean_return={row[3]:.3f}")
    elif command == "report":
        for path in pl.report(cfg):
            print(f"wrote {path}")
    elif command == "run-all":
        st = pl.run_all(cfg)
        print(f"mean return {st.mean_return:.3f} +- {st.std_return:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
