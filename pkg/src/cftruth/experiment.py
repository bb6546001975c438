"""Experiment orchestration: splits, estimator runs, calibration, reports.

Seeding: the dataset comes from ``SeedSequence([master_seed, 0])``.
Repetition ``r`` splits with ``SeedSequence([master_seed, 1, r])``,
fits estimator ``e`` (index into :data:`~cftruth.uq.ESTIMATORS`) with
``SeedSequence([master_seed, 2, r, e])`` and trains the shared base
model of the random and trust-score estimators with
``SeedSequence([master_seed, 3, r])``.  Adding or removing estimators
therefore never changes the others' results.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .calibrate import IsotonicMap, fit_isotonic, save_map
from .counterfactual import (
    EDIT_KINDS,
    CounterfactualRecord,
    enumerate_1_edit,
    rank_counterfactuals,
    read_records_jsonl,
    write_records_jsonl,
)
from .metrics import (
    EvalRecord,
    UndefinedMetricError,
    nll,
    pearson_rho,
    r_squared,
    relative_truthfulness,
    retention_threshold,
    rll,
    truthful,
    uer_curve_arrays,
)
from .model import MVEConfig, RegressorConfig, TrainConfig, train_mse
from .molgraph import MolecularGraph, murcko_scaffold
from .oracle import (
    LabeledSample,
    crippen_logp,
    generate_dataset,
    load_jsonl,
    load_smiles_file,
    save_jsonl,
)
from .uq import ESTIMATORS, EstimatorKind, fit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "CounterfactualConfig",
    "DatasetConfig",
    "ExperimentConfig",
    "SplitConfig",
    "SplitError",
    "SplitSpec",
    "UqConfig",
    "config_from_dict",
    "counterfactual_stage",
    "emit_curves",
    "evaluate",
    "load_config",
    "recompute_report",
    "run_experiment",
    "split",
]

log = logging.getLogger(__name__)

REPORT_SCHEMA = "cftruth.report/1"
PREDICTIONS_SCHEMA = "cftruth.predictions/1"
SPLIT_KINDS = ("iid", "ood_struct", "ood_value")
TAILS = ("both", "upper", "lower")
# estimators that wrap a plain MSE model instead of training their own
BASE_MODEL_USERS = ("random", "ts_tanimoto", "ts_euclidean")
CURVE_POINTS = 101


class SplitError(ValueError):
    pass


# ----------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"  # synthetic | jsonl | smiles
    n: int = 2000
    max_steps: int = 12
    path: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "jsonl", "smiles"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"dataset source {self.source!r} needs a path")


@dataclass(frozen=True)
class SplitConfig:
    kind: str = "iid"
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    tails: str = "both"


@dataclass(frozen=True)
class UqConfig:
    estimators: tuple[str, ...] = ("de_mve",)
    ensemble_size: int = 3
    swag_window: int = 25
    swag_samples: int = 50

    def __post_init__(self):
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown or not self.estimators:
            raise ValueError(f"estimators must be a non-empty subset of {ESTIMATORS}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ValueError("estimators listed twice")

    def kind(self, name: str) -> EstimatorKind:
        return EstimatorKind(name, self.ensemble_size, self.swag_window, self.swag_samples)


@dataclass(frozen=True)
class CounterfactualConfig:
    enabled: bool = False
    estimator: str = "de_mve"
    n_originals: int = 50
    top_k: int = 10
    retention: float = 0.2
    sweep_retention: float = 0.05
    edit_kinds: tuple[str, ...] = EDIT_KINDS

    def __post_init__(self):
        object.__setattr__(self, "edit_kinds", tuple(self.edit_kinds))
        unknown = set(self.edit_kinds) - set(EDIT_KINDS)
        if unknown or not self.edit_kinds:
            raise ValueError(f"edit_kinds must be a non-empty subset of {EDIT_KINDS}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    master_seed: int = 0
    repetitions: int = 3
    out_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: RegressorConfig = field(default_factory=RegressorConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(mve=MVEConfig()))
    uq: UqConfig = field(default_factory=UqConfig)
    counterfactual: CounterfactualConfig = field(default_factory=CounterfactualConfig)

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        cf = self.counterfactual
        if cf.enabled and cf.estimator not in self.uq.estimators:
            raise ValueError(f"counterfactual estimator {cf.estimator!r} is not among uq.estimators")
        needs_mve = {"mve", "de_mve"} & set(self.uq.estimators)
        if needs_mve and self.train.mve is None:
            raise ValueError("MVE-based estimators need a [train.mve] section")

    def to_dict(self) -> dict:
        """Result-determining settings (``out_dir`` excluded)."""
        d = asdict(self)
        d.pop("out_dir")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name


def _build(cls, data: Mapping, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(d: Mapping) -> ExperimentConfig:
    d = {k: dict(v) if isinstance(v, Mapping) else v for k, v in d.items()}
    known = {"experiment", "dataset", "split", "model", "train", "uq", "counterfactual"}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    exp = d.get("experiment", {})
    split_d = d.get("split", {})
    if "fractions" in split_d:
        split_d["fractions"] = tuple(float(x) for x in split_d["fractions"])
    uq_d = d.get("uq", {})
    if "estimators" in uq_d:
        uq_d["estimators"] = tuple(uq_d["estimators"])
    model_d = d.get("model", {})
    if "arch" in model_d:
        model_d["architecture"] = model_d.pop("arch")
    train_d = d.get("train", {})
    mve_d = train_d.pop("mve", None)
    if "lr" in train_d:
        train_d["learning_rate"] = train_d.pop("lr")
    mve = _build(MVEConfig, mve_d, "train.mve") if mve_d is not None else None
    fields_exp = {k: v for k, v in exp.items()}
    unknown = set(fields_exp) - {"name", "master_seed", "repetitions", "out_dir"}
    if unknown:
        raise ValueError(f"unknown keys in [experiment]: {sorted(unknown)}")
    return ExperimentConfig(
        **fields_exp,
        dataset=_build(DatasetConfig, d.get("dataset", {}), "dataset"),
        split=_build(SplitConfig, split_d, "split"),
        model=_build(RegressorConfig, model_d, "model"),
        train=_build(TrainConfig, {**train_d, "mve": mve}, "train"),
        uq=_build(UqConfig, uq_d, "uq"),
        counterfactual=_build(CounterfactualConfig, d.get("counterfactual", {}), "counterfactual"),
    )


def load_config(path, overrides: Mapping | None = None) -> ExperimentConfig:
    """Read a TOML config; ``overrides`` maps dotted keys such as ``"train.mve.beta"`` to values.

    A relative dataset path is resolved against the config file's folder.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    for dotted, value in (overrides or {}).items():
        *parents, key = dotted.split(".")
        node = data
        for part in parents:
            node = node.setdefault(part, {})
        node[key] = value
    ds = data.get("dataset", {})
    if ds.get("path") and not Path(ds["path"]).is_absolute():
        ds["path"] = str((path.parent / ds["path"]).resolve())
    return config_from_dict(data)


# ----------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    kind: str
    fractions: tuple[float, float, float]
    seed: int
    tails: str = "both"

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"split kind must be one of {SPLIT_KINDS}")
        if self.tails not in TAILS:
            raise ValueError(f"tails must be one of {TAILS}")
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ValueError("fractions must be three positive numbers")
        if not math.isclose(sum(self.fractions), 1.0, abs_tol=1e-9):
            raise ValueError("fractions must sum to 1")


def _pick(dataset, idx):
    return [dataset[i] for i in idx]


def split(dataset: Sequence[LabeledSample], spec: SplitSpec):
    """``(train, calibration, test)`` lists; disjoint, exhaustive, seed-deterministic."""
    n = len(dataset)
    n_test = round(spec.fractions[2] * n)
    n_cal = round(spec.fractions[1] * n)
    if min(n_test, n_cal, n - n_test - n_cal) < 1:
        raise SplitError(f"{n} samples are too few for fractions {spec.fractions}")
    rng = np.random.default_rng(spec.seed)

    if spec.kind == "iid":
        perm = rng.permutation(n)
        test = perm[:n_test]
        rest = perm[n_test:]
    elif spec.kind == "ood_value":
        order = np.argsort([s.y for s in dataset], kind="stable")
        if spec.tails == "both":
            n_low = n_test // 2
            test = np.concatenate([order[:n_low], order[n - (n_test - n_low):]])
        elif spec.tails == "upper":
            test = order[n - n_test:]
        else:
            test = order[:n_test]
        taken = set(test.tolist())
        rest = rng.permutation(np.array([i for i in range(n) if i not in taken]))
    else:
        test = _scaffold_test(dataset, n_test, rng)
        taken = set(test.tolist())
        rest = rng.permutation(np.array([i for i in range(n) if i not in taken]))
    cal = rest[:n_cal]
    train = rest[n_cal:]
    if len(train) == 0:
        raise SplitError("no training samples left after the split")
    return _pick(dataset, np.sort(train)), _pick(dataset, np.sort(cal)), _pick(dataset, np.sort(test))


def _scaffold_test(dataset, n_test: int, rng: np.random.Generator) -> np.ndarray:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(dataset):
        groups[murcko_scaffold(s.graph)].append(i)
    if len(groups) < 2:
        raise SplitError(f"only {len(groups)} scaffold group(s); a structural split needs at least 2")
    keys = sorted(groups)
    shuffled = [keys[i] for i in rng.permutation(len(keys))]
    # stable sort keeps the seeded shuffle among equal sizes
    ordered = sorted(shuffled, key=lambda k: -len(groups[k]))
    test: list[int] = []
    for k in ordered:
        remaining = n_test - len(test)
        if remaining == 0:
            break
        if len(groups[k]) <= remaining:
            test.extend(groups[k])
    if not test:
        raise SplitError("no scaffold group fits into the test quota")
    if len(test) == len(dataset):
        raise SplitError("every scaffold group landed in the test set")
    if len(test) < n_test:
        log.info("structural split: test set has %d of %d requested samples", len(test), n_test)
    return np.array(sorted(test))


def split_seed(master_seed: int, repetition: int) -> int:
    return int(np.random.SeedSequence([master_seed, 1, repetition]).generate_state(1, np.uint64)[0])


def _estimator_rng(master_seed: int, repetition: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, 2, repetition, ESTIMATORS.index(name)]))


def _base_rng(master_seed: int, repetition: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, 3, repetition]))


def build_dataset(cfg: ExperimentConfig) -> list[LabeledSample]:
    ds = cfg.dataset
    if ds.source == "jsonl":
        return load_jsonl(ds.path)
    if ds.source == "smiles":
        return load_smiles_file(ds.path)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.master_seed, 0]))
    return generate_dataset(ds.n, ds.max_steps, rng)


# ----------------------------------------------------------------------
# counterfactual stage


def counterfactual_stage(
    originals: Sequence[LabeledSample],
    predict_fn: Callable[[Sequence[MolecularGraph]], tuple[np.ndarray, np.ndarray]],
    calibrate_fn: Callable[[np.ndarray], np.ndarray],
    xi: float,
    top_k: int = 10,
    label_fn: Callable[[MolecularGraph], float] = crippen_logp,
    kinds: Sequence[str] = EDIT_KINDS,
) -> list[CounterfactualRecord]:
    """Rank, label and score the 1-edit counterfactuals of each original.

    ``predict_fn`` maps graphs to ``(y_hat, sigma2_raw)``; ``kept`` marks
    records whose calibrated uncertainty is at most ``xi``.
    """
    records: list[CounterfactualRecord] = []
    for s in originals:
        candidates = enumerate_1_edit(s.graph, kinds)
        if not candidates:
            continue
        graphs = [s.graph, *candidates]
        y_hat, s2_raw = predict_fn(graphs)
        s2_cal = np.asarray(calibrate_fn(np.asarray(s2_raw)), dtype=float)
        by_smiles = {c.canonical_smiles: k + 1 for k, c in enumerate(candidates)}
        ranked = rank_counterfactuals(lambda _: y_hat, s.graph, candidates, top_k)
        orig = EvalRecord(s.y, float(y_hat[0]), float(s2_cal[0]))
        for rec in ranked:
            k = by_smiles[rec.smiles]
            y_prime = label_fn(graphs[k])
            cf = EvalRecord(y_prime, rec.y_hat_prime, float(s2_cal[k]))
            records.append(
                dataclasses.replace(
                    rec,
                    y=s.y,
                    y_prime=y_prime,
                    sigma2=orig.sigma2,
                    sigma2_prime=cf.sigma2,
                    sigma2_raw=float(s2_raw[0]),
                    sigma2_prime_raw=float(s2_raw[k]),
                    truthful=truthful(orig, cf),
                    kept=cf.sigma2 <= xi,
                )
            )
    return records


# ----------------------------------------------------------------------
# evaluation


def _or_none(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def calibration_map(cal_rows: Sequence[Mapping]) -> IsotonicMap:
    pairs = [(r["sigma2_raw"], abs(r["y"] - r["y_hat"])) for r in cal_rows]
    return fit_isotonic(pairs)


def evaluate(
    cal_rows: Sequence[Mapping],
    test_rows: Sequence[Mapping],
    cf_records: Sequence[CounterfactualRecord] | None,
    cf_cfg: CounterfactualConfig,
) -> dict:
    """All per-run metrics from persisted prediction rows and counterfactual records.

    The headline UER-AUCs use raw uncertainties (isotonic plateaus and the
    empty-set segment below the smallest calibrated value distort the
    curve); calibrated variants are reported alongside.  Correlation,
    likelihoods and thresholds use calibrated values, squared for the
    likelihoods since the map targets the absolute-error scale.
    """
    cmap = calibration_map(cal_rows)
    y = np.array([r["y"] for r in test_rows])
    y_hat = np.array([r["y_hat"] for r in test_rows])
    raw = np.array([r["sigma2_raw"] for r in test_rows])
    cal = cmap(raw)
    err = np.abs(y - y_hat)
    curves = {
        (g, kind): uer_curve_arrays(err, s, g) for g in ("mean", "max") for kind, s in (("raw", raw), ("cal", cal))
    }
    variance = np.maximum(cal**2, 1e-12)
    xi = retention_threshold(cal, cf_cfg.retention)
    out = {
        "n_test": len(test_rows),
        "n_calibration": len(cal_rows),
        "r2": _or_none(r_squared, y, y_hat),
        "rmse": float(np.sqrt(np.mean(err**2))),
        "rho": _or_none(pearson_rho, err, cal),
        "rho_raw": _or_none(pearson_rho, err, raw),
        "uer_auc_mean": curves["mean", "raw"].auc,
        "uer_auc_max": curves["max", "raw"].auc,
        "uer_auc_mean_calibrated": curves["mean", "cal"].auc,
        "uer_auc_max_calibrated": curves["max", "cal"].auc,
        "uer_auc_mean_unclamped": curves["mean", "raw"].auc_raw,
        "uer_n_clamped_mean": curves["mean", "raw"].n_clamped,
        "rll": _or_none(lambda: rll(errors=err, sigma2=variance)),
        "nll": float(np.mean(nll(err, variance))),
        "xi20": xi.xi,
        "xi20_retained": xi.n_retained,
    }
    if cf_records:
        s2p = cmap(np.array([r.sigma2_prime_raw for r in cf_records]))
        bits = np.array([bool(r.truthful) for r in cf_records])
        kept = s2p <= xi.xi
        initial = relative_truthfulness(bits)
        filtered = _or_none(relative_truthfulness, bits[kept])
        sweep = retention_threshold(s2p, cf_cfg.sweep_retention)
        out.update(
            n_counterfactuals=len(cf_records),
            truthfulness_initial=initial,
            truthfulness_filtered=filtered,
            truthfulness_gain=None if filtered is None else filtered - initial,
            retained_fraction_xi20=float(kept.mean()),
            truthfulness_low_retention=relative_truthfulness(bits[s2p <= sweep.xi]),
            low_retention_fraction=sweep.n_retained / len(cf_records),
        )
    return out


# ----------------------------------------------------------------------
# running


def _prediction_rows(samples, y_hat, s2, which):
    return [
        {
            "schema": PREDICTIONS_SCHEMA,
            "split": which,
            "smiles": s.smiles,
            "y": s.y,
            "y_hat": float(p),
            "sigma2_raw": float(v),
        }
        for s, p, v in zip(samples, y_hat, s2)
    ]


def _write_jsonl(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_repetition(cfg: ExperimentConfig, dataset, r: int, rep_dir: Path) -> dict:
    """Run one repetition and persist its artifacts; returns per-estimator metrics."""
    rep_dir.mkdir(parents=True, exist_ok=True)
    spec = SplitSpec(cfg.split.kind, cfg.split.fractions, split_seed(cfg.master_seed, r), cfg.split.tails)
    train, cal, test = split(dataset, spec)
    _write_json(
        {"train": [s.smiles for s in train], "calibration": [s.smiles for s in cal], "test": [s.smiles for s in test]},
        rep_dir / "split.json",
    )
    base = None
    metrics = {}
    for name in cfg.uq.estimators:
        log.info("repetition %d: fitting %s", r, name)
        if name in BASE_MODEL_USERS and base is None:
            base = train_mse(train, cfg.model, cfg.train, _base_rng(cfg.master_seed, r))
        est = fit(
            cfg.uq.kind(name),
            train,
            cfg.model,
            cfg.train,
            _estimator_rng(cfg.master_seed, r, name),
            base=base if name in BASE_MODEL_USERS else None,
        )
        yc, sc = est.predict_many([s.graph for s in cal])
        yt, st = est.predict_many([s.graph for s in test])
        cal_rows = _prediction_rows(cal, yc, sc, "calibration")
        test_rows = _prediction_rows(test, yt, st, "test")
        _write_jsonl(cal_rows + test_rows, rep_dir / f"predictions_{name}.jsonl")
        cmap = calibration_map(cal_rows)
        save_map(cmap, rep_dir / f"calibration_{name}.txt")
        records = None
        cf = cfg.counterfactual
        if cf.enabled and name == cf.estimator:
            xi = retention_threshold(cmap(st), cf.retention).xi
            records = counterfactual_stage(test[: cf.n_originals], est.predict_many, cmap, xi, cf.top_k, kinds=cf.edit_kinds)
            write_records_jsonl(records, rep_dir / f"counterfactuals_{name}.jsonl")
        metrics[name] = evaluate(cal_rows, test_rows, records, cf)
    return {"split_sizes": {"train": len(train), "calibration": len(cal), "test": len(test)}, "estimators": metrics}


def _aggregate(runs: list[dict]) -> dict:
    values: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for run in runs:
        if run["status"] != "ok":
            continue
        for est, m in run["estimators"].items():
            for key, v in m.items():
                if v is not None:
                    values[est][key].append(float(v))
    out = {}
    for est in sorted(values):
        out[est] = {}
        for key in sorted(values[est]):
            arr = np.array(values[est][key])
            out[est][key] = {
                "mean": float(arr.mean()),
                "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
                "n": len(arr),
            }
    return out


def _versions() -> dict:
    import torch

    return {
        "cftruth": __version__,
        "numpy": np.__version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
    }


def _build_report(cfg: ExperimentConfig, runs: list[dict]) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        "name": cfg.name,
        "config": cfg.to_dict(),
        "provenance": {
            "config_hash": cfg.config_hash(),
            "master_seed": cfg.master_seed,
            "split_seeds": [split_seed(cfg.master_seed, r) for r in range(cfg.repetitions)],
            "versions": _versions(),
        },
        "runs": runs,
        "missing_repetitions": [r["repetition"] for r in runs if r["status"] != "ok"],
        "aggregate": _aggregate(runs),
    }


def run_experiment(cfg: ExperimentConfig | str | Path, overrides: Mapping | None = None) -> dict:
    """Run every repetition of ``cfg`` and write artifacts under ``cfg.run_dir``.

    Returns the report dict that is also written to ``report.json``.  A
    failing repetition is recorded with its stage and error and left out
    of the aggregates.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg, overrides)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    save_jsonl(dataset, run_dir / "dataset.jsonl")
    _write_json(cfg.to_dict(), run_dir / "config.json")
    runs = []
    for r in range(cfg.repetitions):
        rep_dir = run_dir / f"rep{r}"
        status = {"repetition": r, "split_seed": split_seed(cfg.master_seed, r)}
        try:
            result = run_repetition(cfg, dataset, r, rep_dir)
        except Exception as exc:  # a failed repetition must not sink the others
            log.exception("repetition %d failed", r)
            status.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rep_dir.mkdir(parents=True, exist_ok=True)
            _write_json(status, rep_dir / "status.json")
            runs.append(status)
            continue
        status.update(status="ok", **result)
        _write_json({k: status[k] for k in ("repetition", "split_seed", "status")}, rep_dir / "status.json")
        runs.append(status)
    report = _build_report(cfg, runs)
    _write_json(report, run_dir / "report.json")
    emit_curves(run_dir)
    return report


def recompute_report(run_dir) -> dict:
    """Rebuild the report from the JSONL artifacts in ``run_dir`` alone."""
    run_dir = Path(run_dir)
    cfg = config_from_dict(_config_sections(json.loads((run_dir / "config.json").read_text())))
    cfg = dataclasses.replace(cfg, out_dir=str(run_dir.parent))
    runs = []
    for r in range(cfg.repetitions):
        rep_dir = run_dir / f"rep{r}"
        status = json.loads((rep_dir / "status.json").read_text())
        if status["status"] != "ok":
            runs.append(status)
            continue
        sp = json.loads((rep_dir / "split.json").read_text())
        metrics = {}
        for name in cfg.uq.estimators:
            rows = _read_jsonl(rep_dir / f"predictions_{name}.jsonl")
            cf_path = rep_dir / f"counterfactuals_{name}.jsonl"
            records = read_records_jsonl(cf_path) if cf_path.exists() else None
            metrics[name] = evaluate(
                [x for x in rows if x["split"] == "calibration"],
                [x for x in rows if x["split"] == "test"],
                records,
                cfg.counterfactual,
            )
        status.update(
            split_sizes={k: len(sp[k]) for k in ("train", "calibration", "test")},
            estimators=metrics,
        )
        runs.append(status)
    return _build_report(cfg, runs)


def _config_sections(d: dict) -> dict:
    """Inverse of :meth:`ExperimentConfig.to_dict` into config-file sections."""
    d = json.loads(json.dumps(d))
    return {
        "experiment": {k: d[k] for k in ("name", "master_seed", "repetitions")},
        "dataset": d["dataset"],
        "split": d["split"],
        "model": d["model"],
        "train": d["train"] if d["train"]["mve"] is not None else {k: v for k, v in d["train"].items() if k != "mve"},
        "uq": d["uq"],
        "counterfactual": d["counterfactual"],
    }


# ----------------------------------------------------------------------
# curves


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _truthfulness_sweep(s2p: np.ndarray, bits: np.ndarray, xi20: float):
    """Rows (xi, xi_abs, truthfulness, retained_fraction, n_retained) on a fixed grid plus xi20."""
    top = float(s2p.max()) if s2p.size and s2p.max() > 0 else 1.0
    grid = np.unique(np.concatenate([np.linspace(0.0, 1.0, CURVE_POINTS), [xi20 / top]]))
    rows = []
    for x in grid:
        thr = x * top if x != xi20 / top else xi20
        kept = s2p <= thr
        n = int(kept.sum())
        rows.append((float(x), float(thr), bits[kept].mean() if n else None, n / len(s2p), n))
    return rows


def emit_curves(run_dir) -> list[Path]:
    """Write UER and truthfulness curves per repetition plus averages into ``run_dir/curves``."""
    run_dir = Path(run_dir)
    cfg_d = json.loads((run_dir / "config.json").read_text())
    cfg = config_from_dict(_config_sections(cfg_d))
    out_dir = run_dir / "curves"
    out_dir.mkdir(exist_ok=True)
    written = []
    grid = np.linspace(0.0, 1.0, CURVE_POINTS)
    on_grid = set(grid.tolist())
    for name in cfg.uq.estimators:
        uer_avg: dict[str, list[np.ndarray]] = defaultdict(list)
        tr_avg: list[list] = []
        for r in range(cfg.repetitions):
            rep_dir = run_dir / f"rep{r}"
            pred_path = rep_dir / f"predictions_{name}.jsonl"
            if not pred_path.exists():
                continue
            rows = _read_jsonl(pred_path)
            cal_rows = [x for x in rows if x["split"] == "calibration"]
            test_rows = [x for x in rows if x["split"] == "test"]
            err = np.array([abs(x["y"] - x["y_hat"]) for x in test_rows])
            raw = np.array([x["sigma2_raw"] for x in test_rows])
            uer_rows = []
            for g in ("mean", "max"):
                c = uer_curve_arrays(err, raw, g)
                uer_avg[g].append(c.at(grid))
                uer_rows += [(g, x, gm, d, dr) for x, gm, d, dr in zip(c.grid, c.gamma, c.delta_rel, c.delta_rel_raw)]
            path = out_dir / f"uer_{name}_rep{r}.csv"
            _write_csv(path, ["accumulator", "xi", "gamma", "delta_rel", "delta_rel_raw"], uer_rows)
            written.append(path)
            cf_path = rep_dir / f"counterfactuals_{name}.jsonl"
            if cf_path.exists():
                cmap = calibration_map(cal_rows)
                records = read_records_jsonl(cf_path)
                s2p = cmap(np.array([x.sigma2_prime_raw for x in records]))
                bits = np.array([bool(x.truthful) for x in records], dtype=float)
                xi20 = retention_threshold(cmap(raw), cfg.counterfactual.retention).xi
                sweep = _truthfulness_sweep(s2p, bits, xi20)
                path = out_dir / f"truthfulness_{name}_rep{r}.csv"
                _write_csv(path, ["xi", "xi_abs", "truthfulness", "retained_fraction", "n_retained"], sweep)
                written.append(path)
                # averaging uses the fixed normalized grid only
                tr_avg.append([row for row in sweep if row[0] in on_grid])
        if uer_avg:
            path = out_dir / f"uer_{name}_mean.csv"
            _write_csv(
                path,
                ["xi", "delta_rel_mean", "delta_rel_max"],
                zip(grid, np.mean(uer_avg["mean"], axis=0), np.mean(uer_avg["max"], axis=0)),
            )
            written.append(path)
        if tr_avg:
            rows = []
            for k, x in enumerate(grid):
                tr = [rep[k][2] for rep in tr_avg if rep[k][2] is not None]
                ret = [rep[k][3] for rep in tr_avg]
                rows.append((x, float(np.mean(tr)) if tr else None, float(np.mean(ret)), len(tr)))
            path = out_dir / f"truthfulness_{name}_mean.csv"
            _write_csv(path, ["xi", "truthfulness", "retained_fraction", "n_reps_defined"], rows)
            written.append(path)
    return written
