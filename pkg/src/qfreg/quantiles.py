"""Probability grids, empirical quantile functions, monotone projection,
and quadrature over the grid.

Everything here is a pure function of its inputs; no shared state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Interpolation rule used by empirical_quantile. This is the continuous
# "type 7" rule: Q(p) = x_(floor(h)) + (h - floor(h)) * (x_(floor(h)+1) - x_(floor(h)))
# with h = (n - 1) p + 1 on 1-indexed order statistics. Alternates can be
# registered here if a different convention is ever needed.
QUANTILE_RULE = "linear"


@dataclass(frozen=True)
class ProbabilityGrid:
    """Strictly increasing evaluation probabilities in (0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 1:
            raise ValueError("grid must be a non-empty 1-D array of probabilities")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid contains non-finite probabilities")
        if np.any(pts <= 0.0) or np.any(pts > 1.0):
            raise ValueError("grid probabilities must lie in (0, 1]")
        if pts.size > 1 and np.any(np.diff(pts) <= 0.0):
            raise ValueError("grid probabilities must be strictly increasing")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.size

    @classmethod
    def default(cls) -> "ProbabilityGrid":
        """The canonical 100-point grid {0.01, 0.02, ..., 1.00}."""
        return build_grid(100)

    def __eq__(self, other):
        return isinstance(other, ProbabilityGrid) and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class QuantileFunction:
    """A nondecreasing function of probability sampled on a grid.

    Values are in response units (mg/dL for CGM glucose).
    """

    grid: ProbabilityGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.m,):
            raise ValueError(
                f"values shape {vals.shape} does not match grid size {self.grid.m}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("quantile values must be finite")
        if np.any(np.diff(vals) < -1e-9):
            raise ValueError("quantile values must be nondecreasing along the grid")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_samples(cls, samples, grid: ProbabilityGrid) -> "QuantileFunction":
        return empirical_quantile(samples, grid)

    @classmethod
    def projected(cls, values, grid: ProbabilityGrid) -> "QuantileFunction":
        """Build from possibly non-monotone values via monotone projection."""
        return cls(grid, pava_project(values))


def build_grid(m: int) -> ProbabilityGrid:
    """Equispaced grid {k/m : k = 1..m}.

    Parameters
    ----------
    m : int
        Number of grid points, at least 2.
    """
    if int(m) != m or m < 2:
        raise ValueError(f"grid size must be an integer >= 2, got {m!r}")
    m = int(m)
    return ProbabilityGrid(np.arange(1, m + 1) / m)


def empirical_quantile(samples, grid: ProbabilityGrid) -> QuantileFunction:
    """Empirical quantile function of a sample, evaluated on the grid.

    Uses linear interpolation between order statistics (QUANTILE_RULE).
    A single-observation sample gives a constant quantile function.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("cannot compute quantiles of an empty sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample contains NaN or infinite values")
    vals = np.quantile(x, grid.points, method=QUANTILE_RULE)
    return QuantileFunction(grid, vals)


def pava_project(values, weights=None) -> np.ndarray:
    """Weighted least-squares projection onto the nondecreasing cone.

    Pool-adjacent-violators: scan left to right, merging a new block into
    its predecessor whenever a strict decrease in block means occurs.
    Equal adjacent values already satisfy the constraint and are left as
    separate blocks. With uniform weights the projection preserves the
    arithmetic mean; the operation is idempotent.

    Parameters
    ----------
    values : array_like
        Finite values to project.
    weights : array_like, optional
        Positive weights, same length as ``values``.

    Returns
    -------
    numpy.ndarray
        Nondecreasing vector of the same length.
    """
    v = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    if weights is None:
        w = np.ones_like(v)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape != v.shape:
            raise ValueError(f"weights length {w.size} != values length {v.size}")
        if np.any(~np.isfinite(w)) or np.any(w <= 0.0):
            raise ValueError("weights must be finite and strictly positive")
    n = v.size
    if n <= 1:
        return v.copy()

    # Block stack: means, weights, and lengths of merged runs.
    means = np.empty(n)
    wsum = np.empty(n)
    size = np.empty(n, dtype=np.intp)
    top = -1
    for i in range(n):
        top += 1
        means[top] = v[i]
        wsum[top] = w[i]
        size[top] = 1
        while top > 0 and means[top] < means[top - 1]:
            tot = wsum[top - 1] + wsum[top]
            means[top - 1] = (wsum[top - 1] * means[top - 1] + wsum[top] * means[top]) / tot
            wsum[top - 1] = tot
            size[top - 1] += size[top]
            top -= 1
    return np.repeat(means[: top + 1], size[: top + 1])


def integrate_grid(values, grid: ProbabilityGrid) -> float:
    """Integral of a grid function over [0, 1].

    Trapezoid rule on [p_1, p_m] plus a left end-rectangle on [0, p_1]
    carrying the first value, so the default grid integrates over the
    full unit interval.
    """
    v = np.asarray(values, dtype=float).ravel()
    p = grid.points
    if v.shape != p.shape:
        raise ValueError(f"values length {v.size} != grid size {p.size}")
    left = p[0] * v[0]
    if v.size == 1:
        return float(left)
    return float(left + np.trapezoid(v, p))
