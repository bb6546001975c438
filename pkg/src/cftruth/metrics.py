"""Evaluation quantities for predictions with attached uncertainties.

The uncertainty error reduction (UER) curve filters a record set at a
threshold on max-normalized uncertainty and tracks how an accumulated
error statistic of the retained records drops relative to the full set.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "ACCUMULATORS",
    "ERROR_FLOOR",
    "EvalRecord",
    "RetentionThreshold",
    "UerCurve",
    "UndefinedMetricError",
    "nll",
    "pearson_rho",
    "r_squared",
    "relative_truthfulness",
    "retention_threshold",
    "rll",
    "truthful",
    "uer_curve",
    "uer_curve_arrays",
]

ACCUMULATORS = ("mean", "max", "median")
# squared errors and variances below this are floored inside rll
ERROR_FLOOR = 1e-8


class UndefinedMetricError(ValueError):
    """The metric has no defined value for this input (e.g. constant data)."""


@dataclass(frozen=True)
class EvalRecord:
    y: float
    y_hat: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")

    @property
    def abs_error(self) -> float:
        return abs(self.y - self.y_hat)


@dataclass(frozen=True, eq=False)
class UerCurve:
    """Exact UER step curve.

    ``delta_rel[k]`` holds on ``[grid[k], grid[k+1])``.  ``delta_rel`` is
    clamped to [0, 1]; ``delta_rel_raw`` keeps the unclamped values and
    ``n_clamped`` counts grid points where they differ.  ``degenerate``
    marks all-equal uncertainties, where the curve is all-or-nothing.
    """

    grid: np.ndarray
    gamma: np.ndarray
    delta_rel: np.ndarray
    delta_rel_raw: np.ndarray
    auc: float
    auc_raw: float
    n_clamped: int
    degenerate: bool
    accumulator: str

    def at(self, xi) -> np.ndarray | float:
        """Clamped relative reduction at arbitrary thresholds in [0, 1]."""
        idx = np.searchsorted(self.grid, xi, side="right") - 1
        out = self.delta_rel[np.clip(idx, 0, len(self.grid) - 1)]
        return float(out) if np.ndim(out) == 0 else out


def _prefix_stat(errors_sorted: np.ndarray, ends: np.ndarray, g: str) -> np.ndarray:
    """``g`` over ``errors_sorted[:e]`` for each ``e`` in ``ends`` (0 for empty)."""
    out = np.zeros(len(ends))
    if g == "mean":
        csum = np.concatenate([[0.0], np.cumsum(errors_sorted)])
        nz = ends > 0
        out[nz] = csum[ends[nz]] / ends[nz]
    elif g == "max":
        cmax = np.maximum.accumulate(errors_sorted)
        nz = ends > 0
        out[nz] = cmax[ends[nz] - 1]
    elif g == "median":
        lo: list[float] = []  # max-heap via negation
        hi: list[float] = []
        taken = 0
        for k, e in enumerate(ends):
            while taken < e:
                x = errors_sorted[taken]
                if lo and x > -lo[0]:
                    heapq.heappush(hi, x)
                else:
                    heapq.heappush(lo, -x)
                if len(lo) > len(hi) + 1:
                    heapq.heappush(hi, -heapq.heappop(lo))
                elif len(hi) > len(lo):
                    heapq.heappush(lo, -heapq.heappop(hi))
                taken += 1
            if e:
                out[k] = -lo[0] if len(lo) > len(hi) else (-lo[0] + hi[0]) / 2
    else:
        raise ValueError(f"unknown accumulator {g!r}; expected one of {ACCUMULATORS}")
    return out


def uer_curve_arrays(errors, sigma2, g: str = "mean") -> UerCurve:
    """UER curve from absolute errors and raw uncertainties."""
    errors = np.asarray(errors, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if errors.ndim != 1 or errors.shape != sigma2.shape or errors.size == 0:
        raise ValueError("errors and sigma2 must be non-empty 1-d arrays of equal length")
    if np.any(sigma2 < 0) or np.any(errors < 0):
        raise ValueError("errors and uncertainties must be non-negative")
    if g not in ACCUMULATORS:
        raise ValueError(f"unknown accumulator {g!r}; expected one of {ACCUMULATORS}")
    smax = sigma2.max()
    degenerate = bool(np.all(sigma2 == sigma2[0]))
    s = sigma2 / smax if smax > 0 else np.ones_like(sigma2)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    e_sorted = errors[order]
    grid = np.unique(np.concatenate([[0.0, 1.0], s_sorted]))
    # records kept at threshold t: those with s <= t
    ends = np.searchsorted(s_sorted, grid, side="right")
    gamma = _prefix_stat(e_sorted, ends, g)
    peak = gamma.max()
    full = gamma[-1]
    raw = (full - gamma) / peak if peak > 0 else np.zeros_like(gamma)
    clamped = np.clip(raw, 0.0, 1.0)
    widths = np.diff(grid)
    return UerCurve(
        grid=grid,
        gamma=gamma,
        delta_rel=clamped,
        delta_rel_raw=raw,
        auc=float(np.dot(widths, clamped[:-1])),
        auc_raw=float(np.dot(widths, raw[:-1])),
        n_clamped=int(np.count_nonzero(clamped != raw)),
        degenerate=degenerate,
        accumulator=g,
    )


def uer_curve(records: Sequence[EvalRecord], g: str = "mean") -> UerCurve:
    """UER curve over ``records`` with accumulator ``g`` (mean, max or median)."""
    errors = [r.abs_error for r in records]
    sigma2 = [r.sigma2 for r in records]
    return uer_curve_arrays(errors, sigma2, g)


def pearson_rho(errors, sigmas) -> float:
    x = np.asarray(errors, dtype=np.float64)
    y = np.asarray(sigmas, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two 1-d arrays of equal length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0:
        raise UndefinedMetricError("correlation is undefined for constant input")
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def nll(delta_y, variance):
    """Gaussian negative log likelihood ``0.5 * (dy^2 / v + log(2 pi v))``."""
    v = np.asarray(variance, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("variance must be positive")
    dy = np.asarray(delta_y, dtype=np.float64)
    out = 0.5 * (dy**2 / v + np.log(2 * np.pi * v))
    return float(out) if out.ndim == 0 else out


def rll(records: Sequence[EvalRecord] | None = None, *, errors=None, sigma2=None) -> float:
    """Relative log likelihood: 0 at the constant-RMSE variance, 1 at the per-sample optimum.

    Pass either records or ``errors=``/``sigma2=`` arrays.  Squared errors
    and variances are floored at :data:`ERROR_FLOOR`.
    """
    if records is not None:
        errors = [r.abs_error for r in records]
        sigma2 = [r.sigma2 for r in records]
    dy = np.asarray(errors, dtype=np.float64)
    v = np.maximum(np.asarray(sigma2, dtype=np.float64), ERROR_FLOOR)
    if dy.size == 0 or dy.shape != v.shape:
        raise ValueError("need non-empty errors and variances of equal length")
    dy2 = np.maximum(dy**2, ERROR_FLOOR)
    rmse2 = max(float(np.mean(dy**2)), ERROR_FLOOR)
    base = nll(dy, np.full_like(dy, rmse2)).sum()
    denom = nll(dy, dy2).sum() - base
    if denom == 0:
        raise UndefinedMetricError("RLL undefined: every error equals the RMSE")
    return float((nll(dy, v).sum() - base) / denom)


def truthful(original: EvalRecord, counterfactual: EvalRecord) -> bool:
    """True iff the closed error intervals around the two ground truths are disjoint."""
    a_lo, a_hi = original.y - original.abs_error, original.y + original.abs_error
    b_lo, b_hi = counterfactual.y - counterfactual.abs_error, counterfactual.y + counterfactual.abs_error
    return bool(max(a_lo, b_lo) > min(a_hi, b_hi))


def relative_truthfulness(bits) -> float:
    """Fraction of truthful counterfactuals; accepts bits or (original, cf) record pairs."""
    bits = [truthful(*b) if isinstance(b, tuple) else bool(b) for b in bits]
    if not bits:
        raise UndefinedMetricError("truthfulness of an empty set is undefined")
    return sum(bits) / len(bits)


class RetentionThreshold(NamedTuple):
    xi: float
    n_target: int
    n_retained: int

    @property
    def ties(self) -> bool:
        return self.n_retained > self.n_target


def retention_threshold(sigmas, fraction: float) -> RetentionThreshold:
    """Threshold keeping the ``ceil(fraction * n)`` lowest uncertainties.

    Ties at the threshold may keep more; ``n_retained`` and ``ties`` report it.
    """
    s = np.sort(np.asarray(sigmas, dtype=np.float64))
    if s.size == 0:
        raise ValueError("sigmas must be non-empty")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    # round away float noise such as 0.2 * 10 = 2.0000000000000004
    k = min(s.size, max(1, math.ceil(round(fraction * s.size, 9))))
    xi = float(s[k - 1])
    return RetentionThreshold(xi, k, int(np.searchsorted(s, xi, side="right")))


def r_squared(ys, y_hats) -> float:
    y = np.asarray(ys, dtype=np.float64)
    p = np.asarray(y_hats, dtype=np.float64)
    if y.shape != p.shape or y.size < 2:
        raise ValueError("need two arrays of equal length >= 2")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 undefined for constant targets")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot
