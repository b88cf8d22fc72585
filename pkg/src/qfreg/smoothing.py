"""Linear smoothers for coefficient functions on the probability grid.

Two kinds: the identity (default), and a penalized cubic B-spline with a
second-difference penalty. Uniform extended knots make the penalty null
space span constants and linear functions, so those are reproduced
exactly at any penalty strength. The penalty is chosen per curve either
by generalized cross-validation or to match a fixed effective degrees of
freedom; every choice yields an explicit m x m linear operator.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline

from .quantiles import ProbabilityGrid

_SPLINE_DEGREE = 3


@dataclass(frozen=True)
class SmootherSpec:
    """Configuration (and, once resolved, the frozen per-curve penalties).

    kind : "identity" or "spline"
    df : target effective degrees of freedom; None means GCV selection
    n_basis : B-spline basis size; None picks a grid-size default
    lambdas : per-curve penalties resolved on a reference fit, reused verbatim
        (e.g. inside bootstrap replicates) so the operator stays fixed
    """

    kind: str = "identity"
    df: Optional[float] = None
    n_basis: Optional[int] = None
    lambdas: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in ("identity", "spline"):
            raise ValueError(f"unknown smoother kind {self.kind!r}")


def default_basis_size(m: int) -> int:
    return int(min(30, max(6, m // 3)))


def _basis(grid: ProbabilityGrid, n_basis: int) -> np.ndarray:
    a, b = float(grid.points[0]), float(grid.points[-1])
    nseg = n_basis - _SPLINE_DEGREE
    if nseg < 1:
        raise ValueError(f"n_basis must be at least {_SPLINE_DEGREE + 1}, got {n_basis}")
    h = (b - a) / nseg
    knots = a + h * np.arange(-_SPLINE_DEGREE, nseg + _SPLINE_DEGREE + 1)
    return BSpline.design_matrix(grid.points, knots, _SPLINE_DEGREE).toarray()


class _SplineOperator:
    """Demmler-Reinsch form of S(lam) = B (B'B + lam D'D)^-1 B'."""

    def __init__(self, grid: ProbabilityGrid, n_basis: int):
        m = grid.m
        if n_basis > m:
            n_basis = m
        B = _basis(grid, n_basis)
        D = np.diff(np.eye(n_basis), n=2, axis=0)
        BtB = B.T @ B
        try:
            R = np.linalg.cholesky(BtB)
        except np.linalg.LinAlgError:
            # basis nearly rank deficient for this grid; regularize minimally
            R = np.linalg.cholesky(BtB + 1e-10 * np.trace(BtB) / n_basis * np.eye(n_basis))
        Rinv = np.linalg.inv(R.T)
        s, U = np.linalg.eigh(Rinv.T @ (D.T @ D) @ Rinv)
        s = np.clip(s, 0.0, None)
        self.s = s
        self.Q = B @ (Rinv @ U)  # (m, n_basis), Q Q' = hat matrix at lam=0
        self.n_basis = n_basis

    def weights(self, lam: float) -> np.ndarray:
        return 1.0 / (1.0 + lam * self.s)

    def apply(self, lam: float, y: np.ndarray) -> np.ndarray:
        return self.Q @ (self.weights(lam) * (self.Q.T @ y))

    def edf(self, lam: float) -> float:
        return float(self.weights(lam).sum())

    def matrix(self, lam: float) -> np.ndarray:
        return (self.Q * self.weights(lam)) @ self.Q.T

    def gcv_lambda(self, y: np.ndarray) -> float:
        m = y.size
        coef = self.Q.T @ y
        resid0 = y - self.Q @ coef
        base = float(resid0 @ resid0)
        s_pos = self.s[self.s > 1e-12]
        scale = float(np.median(s_pos)) if s_pos.size else 1.0
        grid = np.concatenate(([0.0], 10.0 ** np.linspace(-8.0, 8.0, 49) / scale))
        best_lam, best_gcv = 0.0, np.inf
        for lam in grid:
            w = self.weights(lam)
            rss = base + float(np.sum(((1.0 - w) * coef) ** 2))
            edf = float(w.sum())
            if m - edf <= 0:
                continue
            gcv = m * rss / (m - edf) ** 2
            if gcv < best_gcv:
                best_gcv, best_lam = gcv, lam
        return best_lam

    def df_lambda(self, df: float) -> float:
        """Penalty whose effective degrees of freedom equal df (bisection)."""
        null_dim = float(np.sum(self.s <= 1e-12))
        if df >= self.edf(0.0):
            return 0.0
        if df <= null_dim:
            return 1e12 / max(float(np.median(self.s[self.s > 1e-12])), 1e-12)
        lo, hi = -25.0, 25.0
        scale = float(np.median(self.s[self.s > 1e-12]))
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.edf(np.exp(mid) / scale) > df:
                lo = mid
            else:
                hi = mid
        return float(np.exp(0.5 * (lo + hi)) / scale)


_operator_cache: dict[tuple, _SplineOperator] = {}


def _get_operator(grid: ProbabilityGrid, n_basis: int) -> _SplineOperator:
    key = (grid.points.tobytes(), n_basis)
    op = _operator_cache.get(key)
    if op is None:
        op = _operator_cache[key] = _SplineOperator(grid, n_basis)
    return op


def smooth_rows(
    rows: np.ndarray, grid: ProbabilityGrid, spec: SmootherSpec
) -> tuple[np.ndarray, SmootherSpec]:
    """Apply the smoother to each row of an (L, m) matrix.

    Returns the smoothed matrix and the spec with per-row penalties
    resolved (so a later call reproduces the identical linear operator).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != grid.m:
        raise ValueError(f"rows have {rows.shape[1]} columns, grid has {grid.m}")
    if spec.kind == "identity":
        return rows.copy(), spec
    if spec.df is not None and not (0.0 < spec.df < grid.m):
        raise ValueError(f"smoother df must lie in (0, {grid.m}), got {spec.df}")
    n_basis = spec.n_basis or default_basis_size(grid.m)
    op = _get_operator(grid, n_basis)
    if spec.lambdas is not None:
        if len(spec.lambdas) != rows.shape[0]:
            raise ValueError("resolved lambdas do not match the number of curves")
        lambdas = tuple(spec.lambdas)
    elif spec.df is not None:
        lambdas = (op.df_lambda(spec.df),) * rows.shape[0]
    else:
        lambdas = tuple(op.gcv_lambda(rows[l]) for l in range(rows.shape[0]))
    out = np.vstack([op.apply(lam, row) for lam, row in zip(lambdas, rows)])
    return out, replace(spec, n_basis=n_basis, lambdas=lambdas)


def smoother_matrix(grid: ProbabilityGrid, spec: SmootherSpec, row: int = 0) -> np.ndarray:
    """Explicit m x m matrix of the (resolved) smoother for one curve."""
    if spec.kind == "identity":
        return np.eye(grid.m)
    if spec.lambdas is None:
        raise ValueError("smoother not resolved yet; run smooth_rows first")
    op = _get_operator(grid, spec.n_basis or default_basis_size(grid.m))
    return op.matrix(spec.lambdas[row])
