"""Command-line entry point: ``cftruth --config run.toml [overrides]``."""

from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources

from .experiment import load_config, run_experiment
from .model import ARCHITECTURES
from .uq import ESTIMATORS

SHOWN_METRICS = (
    "r2",
    "rho",
    "uer_auc_mean",
    "uer_auc_max",
    "rll",
    "truthfulness_initial",
    "truthfulness_gain",
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cftruth",
        description="Train uncertainty-aware graph regressors on logP data and evaluate "
        "uncertainty quality and counterfactual truthfulness.",
    )
    p.add_argument(
        "--config",
        required=True,
        help="TOML experiment config, or the name of a bundled one (benchmark, ood, truthfulness)",
    )
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out-dir", help="artifact root; results go to OUT_DIR/<experiment name>")
    p.add_argument("--repetitions", type=int)
    p.add_argument(
        "--estimator",
        help=f"comma-separated estimators from {', '.join(ESTIMATORS)}",
    )
    p.add_argument("--arch", choices=ARCHITECTURES)
    p.add_argument("--split", choices=("iid", "ood_struct", "ood_value"))
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _resolve_config(name: str):
    bundled = resources.files("cftruth").joinpath("data", f"{name}.toml")
    if not name.endswith(".toml") and bundled.is_file():
        return resources.as_file(bundled)
    return None


def overrides_from_args(args: argparse.Namespace) -> dict:
    out = {}
    if args.seed is not None:
        out["experiment.master_seed"] = args.seed
    if args.out_dir is not None:
        out["experiment.out_dir"] = args.out_dir
    if args.repetitions is not None:
        out["experiment.repetitions"] = args.repetitions
    if args.estimator is not None:
        names = [s.strip() for s in args.estimator.split(",") if s.strip()]
        unknown = set(names) - set(ESTIMATORS)
        if unknown:
            raise SystemExit(f"unknown estimator(s): {', '.join(sorted(unknown))}")
        out["uq.estimators"] = names
    if args.arch is not None:
        out["model.architecture"] = args.arch
    if args.split is not None:
        out["split.kind"] = args.split
    return out


def _fmt(stat) -> str:
    if stat is None:
        return "n/a"
    return f"{stat['mean']:.3f} ± {stat['std']:.3f}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    overrides = overrides_from_args(args)
    bundled = _resolve_config(args.config)
    if bundled is not None:
        with bundled as path:
            cfg = load_config(path, overrides)
    else:
        cfg = load_config(args.config, overrides)
    report = run_experiment(cfg)
    print(f"{cfg.name}: {cfg.repetitions} repetition(s), artifacts in {cfg.run_dir}")
    if report["missing_repetitions"]:
        print(f"failed repetitions: {report['missing_repetitions']}")
    for est, stats in report["aggregate"].items():
        print(f"[{est}]")
        for key in SHOWN_METRICS:
            if key in stats:
                print(f"  {key:<22} {_fmt(stats[key])}")
    return 1 if len(report["missing_repetitions"]) == cfg.repetitions else 0


if __name__ == "__main__":
    sys.exit(main())
