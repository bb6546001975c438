"""Uncertainty estimators wrapped around the graph regressors.

Every estimator yields a prediction and a raw uncertainty per molecule.
Ensembles and SWAG derive the uncertainty from disagreement between
parameter vectors, MVE from a learned variance head, trust scores from
distance to the training data, and the random baseline from noise.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import (
    ModelParams,
    RegressorConfig,
    TrainConfig,
    load_params,
    predict_batch,
    save_params,
    train_mse,
    train_mve,
)
from .molgraph import Fingerprint, MolecularGraph, morgan_fingerprint

__all__ = [
    "ESTIMATORS",
    "EstimatorKind",
    "FittedEstimator",
    "SwagPosterior",
    "UncertainPrediction",
    "combine_de_mve",
    "fit",
    "load_estimator",
    "nearest_distances",
    "predict",
    "save_estimator",
    "trust_score_classification",
]

ESTIMATORS = ("random", "de", "mve", "de_mve", "swag", "ts_tanimoto", "ts_euclidean")
ESTIMATOR_FORMAT = "cftruth.estimator/1"
_CHUNK = 1024


@dataclass(frozen=True)
class EstimatorKind:
    name: str
    ensemble_size: int = 3
    swag_window: int = 25
    swag_samples: int = 50

    def __post_init__(self):
        if self.name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.name!r}; expected one of {ESTIMATORS}")
        if self.name in ("de", "de_mve") and self.ensemble_size < 2:
            raise ValueError("ensembles need ensemble_size >= 2")
        if self.swag_window < 2 or self.swag_samples < 2:
            raise ValueError("swag_window and swag_samples must be >= 2")


@dataclass(frozen=True, eq=False)
class SwagPosterior:
    """Gaussian over weights: diagonal plus low-rank part from snapshot deviations."""

    mean: np.ndarray
    diag: np.ndarray
    deviations: np.ndarray  # (K, P): snapshot minus mean

    def __post_init__(self):
        if self.diag.shape != self.mean.shape or self.deviations.shape[1:] != self.mean.shape:
            raise ValueError("posterior blocks must share the parameter dimension")
        if np.any(self.diag < 0):
            raise ValueError("diagonal variances must be >= 0")

    @classmethod
    def from_snapshots(cls, snapshots: np.ndarray) -> "SwagPosterior":
        snaps = np.asarray(snapshots, dtype=np.float64)
        if snaps.ndim != 2 or len(snaps) < 2:
            raise ValueError("need at least 2 snapshots")
        # shifting by the first snapshot keeps identical snapshots exactly degenerate
        mean = snaps[0] + (snaps - snaps[0]).mean(axis=0)
        dev = snaps - mean
        return cls(mean, (dev**2).mean(axis=0), dev)

    @property
    def rank(self) -> int:
        return len(self.deviations)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """``n`` draws ``mean + sqrt(diag/2) z1 + D^T z2 / sqrt(2 (K-1))``."""
        k = self.rank
        z1 = rng.standard_normal((n, self.mean.size))
        z2 = rng.standard_normal((n, k))
        return (
            self.mean
            + np.sqrt(self.diag / 2.0) * z1
            + (z2 @ self.deviations) / math.sqrt(2.0 * (k - 1))
        )


@dataclass(frozen=True)
class UncertainPrediction:
    y_hat: float
    sigma2_raw: float
    sigma2_calibrated: float | None = None

    def __post_init__(self):
        if not self.sigma2_raw >= 0:
            raise ValueError("sigma2_raw must be >= 0")
        if self.sigma2_calibrated is not None and not self.sigma2_calibrated >= 0:
            raise ValueError("sigma2_calibrated must be >= 0")


def nearest_distances(queries: np.ndarray, reference: np.ndarray, metric: str) -> np.ndarray:
    """Distance from each query row to its nearest reference row.

    ``metric`` is ``"euclidean"`` on real vectors or ``"tanimoto"`` on
    binary fingerprint rows.
    """
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    out = np.empty(len(q))
    if metric == "euclidean":
        r_sq = (r**2).sum(axis=1)
        for k in range(0, len(q), _CHUNK):
            block = q[k : k + _CHUNK]
            d2 = (block**2).sum(axis=1)[:, None] + r_sq[None, :] - 2.0 * block @ r.T
            out[k : k + _CHUNK] = np.sqrt(np.clip(d2.min(axis=1), 0.0, None))
    elif metric == "tanimoto":
        r_cnt = r.sum(axis=1)
        for k in range(0, len(q), _CHUNK):
            block = q[k : k + _CHUNK]
            inter = block @ r.T
            union = block.sum(axis=1)[:, None] + r_cnt[None, :] - inter
            sim = np.divide(inter, union, out=np.ones_like(inter), where=union > 0)
            out[k : k + _CHUNK] = 1.0 - sim.max(axis=1)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return out


def combine_de_mve(var_de, member_sigma2) -> np.ndarray:
    """Average of the ensemble variance and the mean member MVE variance.

    ``member_sigma2`` has one row per member.
    """
    return 0.5 * (np.asarray(var_de) + np.mean(member_sigma2, axis=0))


def _exact_zero(d: np.ndarray, queries: np.ndarray, reference: np.ndarray) -> np.ndarray:
    # the expanded euclidean form leaves ~1e-8 residue for exact matches
    if len(reference) == 0:
        return d
    lookup = {row.tobytes() for row in reference}
    hits = np.array([row.tobytes() in lookup for row in queries], dtype=bool)
    d = d.copy()
    d[hits] = 0.0
    return d


@dataclass(eq=False)
class FittedEstimator:
    """Fitted estimator; :meth:`predict_many` is pure except for ``random``.

    The random baseline owns a seeded generator and draws fresh
    uncertainties on every call, so it must be used by a single caller.
    """

    kind: EstimatorKind
    members: tuple[ModelParams, ...]
    swag: SwagPosterior | None = None
    reference: np.ndarray | None = field(default=None, repr=False)
    seed: int = 0
    fingerprint_radius: int = 2
    fingerprint_bits: int = 1024
    _rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self._rng is None:
            self._rng = np.random.default_rng(self.seed)

    @property
    def base(self) -> ModelParams:
        return self.members[0]

    def _fingerprints(self, graphs: Sequence[MolecularGraph]) -> np.ndarray:
        return np.array(
            [morgan_fingerprint(g, self.fingerprint_radius, self.fingerprint_bits).to_array() for g in graphs],
            dtype=np.float64,
        ).reshape(len(graphs), self.fingerprint_bits)

    def predict_many(self, graphs: Sequence[MolecularGraph]) -> tuple[np.ndarray, np.ndarray]:
        """Arrays ``(y_hat, sigma2_raw)`` for ``graphs``."""
        graphs = list(graphs)
        name = self.kind.name
        if name in ("de", "de_mve", "mve"):
            outs = [predict_batch(m, graphs) for m in self.members]
            ys = np.stack([o[0] for o in outs])
            y_hat = ys.mean(axis=0)
            if name == "mve":
                return y_hat, outs[0][1]
            var_de = (ys - ys[0]).var(axis=0)
            if name == "de":
                return y_hat, var_de
            return y_hat, combine_de_mve(var_de, np.stack([o[1] for o in outs]))
        if name == "swag":
            # fresh generator per call keeps predictions a pure function of the inputs
            thetas = self.swag.sample(np.random.default_rng(self.seed), self.kind.swag_samples)
            cfg = self.base.config
            ys = np.stack([predict_batch(ModelParams(cfg, t), graphs)[0] for t in thetas])
            return ys.mean(axis=0), ys.var(axis=0)
        y_hat, _, emb = predict_batch(self.base, graphs)
        if name == "random":
            return y_hat, self._rng.uniform(0.0, 1.0, size=len(graphs))
        if name == "ts_euclidean":
            d = nearest_distances(emb, self.reference, "euclidean")
            return y_hat, _exact_zero(d, emb, self.reference)
        fps = self._fingerprints(graphs)
        return y_hat, nearest_distances(fps, self.reference, "tanimoto")

    def predict(self, g: MolecularGraph) -> UncertainPrediction:
        y, s2 = self.predict_many([g])
        return UncertainPrediction(float(y[0]), float(s2[0]))

    def point_model(self) -> Callable[[Sequence[MolecularGraph]], np.ndarray]:
        """Callable ``graphs -> y_hat`` for counterfactual ranking."""
        return lambda graphs: self.predict_many(graphs)[0]


def predict(est: FittedEstimator, g: MolecularGraph) -> UncertainPrediction:
    return est.predict(g)


def _child(rng: np.random.Generator) -> np.random.Generator:
    return np.random.default_rng(int(rng.integers(2**63)))


def fit(
    kind: EstimatorKind,
    train_set,
    rc: RegressorConfig,
    tc: TrainConfig,
    rng: np.random.Generator,
    base: ModelParams | None = None,
) -> FittedEstimator:
    """Train the models ``kind`` needs on ``train_set``.

    ``base`` reuses an already trained MSE model for the estimators that
    wrap one (random, trust scores); SWAG always trains its own.
    """
    train_set = list(train_set)
    if not train_set:
        raise ValueError("cannot fit on an empty training set")
    name = kind.name
    seed = int(rng.integers(2**63))
    n = len(train_set)
    if name in ("de", "de_mve"):
        members = []
        trainer = train_mse if name == "de" else train_mve
        for _ in range(kind.ensemble_size):
            idx = rng.integers(n, size=n)
            members.append(trainer([train_set[i] for i in idx], rc, tc, _child(rng)))
        return FittedEstimator(kind, tuple(members), seed=seed)
    if name == "mve":
        return FittedEstimator(kind, (train_mve(train_set, rc, tc, _child(rng)),), seed=seed)
    if name == "swag":
        if kind.swag_window > tc.epochs:
            raise ValueError(f"swag_window {kind.swag_window} exceeds {tc.epochs} training epochs")
        snapshots = []
        first = tc.epochs - kind.swag_window

        def collect(epoch, theta):
            if epoch >= first:
                snapshots.append(theta)

        final = train_mse(train_set, rc, tc, _child(rng), on_epoch_end=collect)
        posterior = SwagPosterior.from_snapshots(np.stack(snapshots))
        return FittedEstimator(kind, (final,), swag=posterior, seed=seed)
    if base is None:
        base = train_mse(train_set, rc, tc, _child(rng))
    est = FittedEstimator(kind, (base,), seed=seed)
    graphs = [s.graph for s in train_set]
    if name == "ts_tanimoto":
        est.reference = est._fingerprints(graphs)
    elif name == "ts_euclidean":
        est.reference = predict_batch(base, graphs)[2]
    return est


def trust_score_classification(x, same_class_set, other_class_set, dist: Callable) -> float:
    """Nearest same-class distance over nearest other-class distance."""
    if not same_class_set or not other_class_set:
        raise ValueError("both reference sets must be non-empty")
    near_same = min(dist(x, s) for s in same_class_set)
    near_other = min(dist(x, o) for o in other_class_set)
    if near_other == 0:
        warnings.warn("nearest other-class element is at distance 0; trust score is +inf", RuntimeWarning)
        return math.inf
    return near_same / near_other


# ----------------------------------------------------------------------
# checkpoints


def save_estimator(est: FittedEstimator, directory) -> None:
    """Write member checkpoints plus kind metadata into ``directory``.

    The random baseline is saved with its seed only, so a reloaded copy
    restarts its uncertainty stream from the beginning.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": ESTIMATOR_FORMAT,
        "kind": {
            "name": est.kind.name,
            "ensemble_size": est.kind.ensemble_size,
            "swag_window": est.kind.swag_window,
            "swag_samples": est.kind.swag_samples,
        },
        "seed": est.seed,
        "n_members": len(est.members),
        "fingerprint_radius": est.fingerprint_radius,
        "fingerprint_bits": est.fingerprint_bits,
    }
    (d / "estimator.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for k, m in enumerate(est.members):
        save_params(m, d / f"member{k}.npz")
    arrays = {}
    if est.swag is not None:
        arrays.update(swag_mean=est.swag.mean, swag_diag=est.swag.diag, swag_dev=est.swag.deviations)
    if est.reference is not None:
        arrays["reference"] = est.reference
    if arrays:
        with open(d / "arrays.npz", "wb") as fh:
            np.savez(fh, **arrays)


def load_estimator(directory) -> FittedEstimator:
    d = Path(directory)
    meta = json.loads((d / "estimator.json").read_text())
    if meta.get("format") != ESTIMATOR_FORMAT:
        raise ValueError(f"unsupported estimator format {meta.get('format')!r}")
    members = tuple(load_params(d / f"member{k}.npz") for k in range(meta["n_members"]))
    swag = reference = None
    if (d / "arrays.npz").exists():
        with np.load(d / "arrays.npz", allow_pickle=False) as a:
            if "swag_mean" in a:
                swag = SwagPosterior(a["swag_mean"].copy(), a["swag_diag"].copy(), a["swag_dev"].copy())
            if "reference" in a:
                reference = a["reference"].copy()
    return FittedEstimator(
        EstimatorKind(**meta["kind"]),
        members,
        swag=swag,
        reference=reference,
        seed=meta["seed"],
        fingerprint_radius=meta["fingerprint_radius"],
        fingerprint_bits=meta["fingerprint_bits"],
    )
