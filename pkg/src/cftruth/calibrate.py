"""Isotonic calibration of raw uncertainties onto the absolute-error scale."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = ["IsotonicMap", "apply", "fit_isotonic", "load_map", "pava", "save_map"]

MAP_FORMAT = "cftruth.isotonic/1"


@dataclass(frozen=True, eq=False)
class IsotonicMap:
    """Monotone piecewise-linear map; clamps to the end values outside the breakpoints."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=np.float64).copy()
        vals = np.asarray(self.values, dtype=np.float64).copy()
        if bp.ndim != 1 or bp.shape != vals.shape or bp.size < 1:
            raise ValueError("breakpoints and values must be equal-length 1-d arrays")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly ascending")
        if np.any(np.diff(vals) < 0):
            raise ValueError("values must be non-decreasing")
        bp.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    def __call__(self, sigma2_raw):
        return apply(self, sigma2_raw)

    def __eq__(self, other):
        return (
            isinstance(other, IsotonicMap)
            and np.array_equal(self.breakpoints, other.breakpoints)
            and np.array_equal(self.values, other.values)
        )


def pava(y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Weighted pool-adjacent-violators: non-decreasing least-squares fit to ``y``."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    # blocks as parallel stacks of (weighted mean, weight, length)
    means: list[float] = []
    weights: list[float] = []
    sizes: list[int] = []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            m1, w1, s1 = means.pop(), weights.pop(), sizes.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            weights.append(wt)
            sizes.append(s1 + s2)
    return np.repeat(means, sizes)


def fit_isotonic(pairs) -> IsotonicMap:
    """Fit on ``(sigma2_raw, abs_error)`` pairs.

    Pairs sharing a raw value are averaged first and weighted by their
    count; the resulting map interpolates linearly between distinct raw
    values.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be a sequence of (sigma2_raw, abs_error)")
    if len(arr) < 2:
        raise ValueError("isotonic calibration needs at least 2 pairs")
    raw, err = arr[:, 0], arr[:, 1]
    if np.any(err < 0):
        raise ValueError("absolute errors must be non-negative")
    if not np.all(np.isfinite(arr)):
        raise ValueError("pairs must be finite")
    xs, inverse, counts = np.unique(raw, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=err)
    tied_means = sums / counts
    if len(xs) < 2:
        warnings.warn("fewer than 2 distinct raw uncertainties; calibration map is constant", RuntimeWarning)
        return IsotonicMap(xs, np.array([err.mean()]))
    fitted = pava(tied_means, counts)
    # float rounding in pooled means can leave 1-ulp descents
    fitted = np.maximum.accumulate(fitted)
    return IsotonicMap(xs, fitted)


def apply(m: IsotonicMap, sigma2_raw):
    """Evaluate the map; scalars in, float out; arrays in, arrays out."""
    out = np.interp(sigma2_raw, m.breakpoints, m.values)
    return float(out) if np.ndim(out) == 0 else out


def save_map(m: IsotonicMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {MAP_FORMAT}\n# sigma2_raw calibrated\n")
        for x, v in zip(m.breakpoints, m.values):
            fh.write(f"{x:.17g} {v:.17g}\n")


def load_map(path) -> IsotonicMap:
    xs, vs = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            x, v = line.split()
            xs.append(float(x))
            vs.append(float(v))
    return IsotonicMap(np.array(xs), np.array(vs))
