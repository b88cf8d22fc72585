"""Independent oracles the tests check implementations against.

These deliberately avoid the algorithms used by the package: monotone
projection is solved by exhaustive enumeration of block partitions,
REML by closed forms on balanced designs, and quantiles by the textbook
order-statistic formula.
"""

from itertools import combinations

import numpy as np


def monotone_projection_enumeration(values, weights=None) -> np.ndarray:
    """Exact weighted projection onto the nondecreasing cone by brute force.

    The projection is constant on consecutive blocks with each block at
    its weighted mean, so enumerating all 2^(n-1) consecutive-block
    partitions and keeping the feasible candidate with the smallest
    objective recovers it exactly. Only usable for short vectors.
    """
    v = np.asarray(values, dtype=float)
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    n = v.size
    if n == 1:
        return v.copy()
    best, best_obj = None, np.inf
    for k in range(n):
        for cuts in combinations(range(1, n), k):
            bounds = (0,) + cuts + (n,)
            x = np.empty(n)
            ok = True
            prev = -np.inf
            for a, b in zip(bounds[:-1], bounds[1:]):
                mean = float(np.average(v[a:b], weights=w[a:b]))
                if mean < prev:
                    ok = False
                    break
                x[a:b] = mean
                prev = mean
            if not ok:
                continue
            obj = float(np.sum(w * (x - v) ** 2))
            if obj < best_obj:
                best_obj, best = obj, x
    return best


def balanced_oneway_reml(y: np.ndarray):
    """Closed-form REML estimates for a balanced one-way layout.

    y is (n_subjects, J). Returns (sigma2, g) = (MSW, (MSB - MSW) / J),
    valid in the interior (MSB > MSW).
    """
    nsub, J = y.shape
    subj_means = y.mean(axis=1)
    grand = y.mean()
    msw = np.sum((y - subj_means[:, None]) ** 2) / (nsub * (J - 1))
    msb = J * np.sum((subj_means - grand) ** 2) / (nsub - 1)
    return msw, (msb - msw) / J


def ols_restricted_deviance(X: np.ndarray, y: np.ndarray) -> float:
    """REML deviance of the independent-errors model, in closed form."""
    n, L = X.shape
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(np.sum((y - X @ beta) ** 2))
    nstar = n - L
    return nstar * (1.0 + np.log(2.0 * np.pi * rss / nstar))


def type7_quantile(samples, p: float) -> float:
    """Hand-rolled order-statistic quantile with linear interpolation."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    h = (n - 1) * p + 1.0  # 1-indexed
    lo = int(np.floor(h))
    lo = min(max(lo, 1), n)
    hi = min(lo + 1, n)
    return float(x[lo - 1] + (h - lo) * (x[hi - 1] - x[lo - 1]))


def trapezoid_with_left_rectangle(values, points) -> float:
    """Direct transcription of the package's quadrature contract."""
    values = np.asarray(values, dtype=float)
    points = np.asarray(points, dtype=float)
    total = points[0] * values[0]
    for i in range(len(points) - 1):
        total += 0.5 * (values[i] + values[i + 1]) * (points[i + 1] - points[i])
    return float(total)
