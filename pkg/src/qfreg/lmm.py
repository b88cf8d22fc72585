"""Gaussian linear mixed models with one grouping factor, fit by REML.

The model is y = X beta + Z u + e with per-group random coefficients
u_g ~ N(0, G), e ~ N(0, sigma2 I), and K in {1, 2} random-effect columns
(intercept, or intercept plus a slope such as the visit index). The
covariance is parameterized as G = sigma2 * Lam Lam' with Lam lower
triangular and log-scaled diagonal ("log-Cholesky"), so G is PSD by
construction and G = 0 is approachable. beta and sigma2 are profiled out
of the restricted likelihood; the remaining K(K+1)/2 parameters are
minimized by Nelder-Mead with restarts.

Per-group Woodbury identities keep every deviance evaluation O(G) in the
number of groups, using sufficient statistics precomputed once per design
and once per response vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import minimize

LOG_2PI = np.log(2.0 * np.pi)

# Fitted G eigenvalues below this are reported as exactly 0 (variance
# component on the boundary).
BOUNDARY_EIGENVALUE = 1e-10

# Log-diagonal entries of Lam are clipped to this range inside the
# objective so the optimizer cannot overflow exp().
_THETA_LOG_CLIP = 25.0

_BIG = 1e30


class RankDeficiencyError(ValueError):
    """Fixed-effects design (or a profiled system) is numerically singular."""


def _pivoted_cholesky_rank(a: np.ndarray, rel_tol: float = 1e-10) -> int:
    """Rank of a symmetric PSD matrix via pivoted Cholesky."""
    a = a.copy()
    p = a.shape[0]
    thresh = rel_tol * max(np.max(np.diag(a)), 0.0)
    perm = np.arange(p)
    for k in range(p):
        d = np.diag(a)[k:]
        j = k + int(np.argmax(d))
        if a[j, j] <= thresh:
            return k
        a[[k, j]] = a[[j, k]]
        a[:, [k, j]] = a[:, [j, k]]
        perm[[k, j]] = perm[[j, k]]
        a[k, k] = np.sqrt(a[k, k])
        a[k + 1 :, k] /= a[k, k]
        a[k + 1 :, k + 1 :] -= np.outer(a[k + 1 :, k], a[k + 1 :, k])
    return p


@dataclass
class MixedModelSpec:
    """Design of one mixed model: fixed effects, random effects, grouping.

    Rows are re-sorted internally so groups are contiguous; all public
    outputs are mapped back to the caller's row order.
    """

    X: np.ndarray
    Z: np.ndarray
    groups: np.ndarray

    # filled in __post_init__
    n_obs: int = field(init=False)
    n_fixed: int = field(init=False)
    n_random: int = field(init=False)
    n_groups: int = field(init=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        groups = np.asarray(self.groups)
        if X.ndim != 2 or Z.ndim != 2:
            raise ValueError("X and Z must be 2-D arrays")
        n, L = X.shape
        if Z.shape[0] != n or groups.shape != (n,):
            raise ValueError("X, Z, and groups must agree on the number of rows")
        K = Z.shape[1]
        if K not in (1, 2):
            raise ValueError(f"only K in {{1, 2}} random-effect columns supported, got {K}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
            raise ValueError("X and Z must be finite")

        _, idx = np.unique(groups, return_inverse=True)
        order = np.argsort(idx, kind="stable")
        self.X = X
        self.Z = Z
        self.n_obs = n
        self.n_fixed = L
        self.n_random = K
        self.n_groups = int(idx.max()) + 1
        self._order = order
        self._group_idx = idx
        Xs = np.ascontiguousarray(X[order])
        Zs = np.ascontiguousarray(Z[order])
        sizes = np.bincount(idx, minlength=self.n_groups)
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        self._Xs, self._Zs = Xs, Zs
        self._starts = starts
        self._sizes = sizes

        XtX = Xs.T @ Xs
        if _pivoted_cholesky_rank(XtX) < L:
            raise RankDeficiencyError(
                "fixed-effects design X is rank deficient (pivoted Cholesky, rel tol 1e-10)"
            )
        self._XtX = XtX
        self._ld_XtX = 2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(XtX))))
        # Per-group cross products of the random design, response-independent.
        G_, = (self.n_groups,)
        self._ZtZ = np.empty((G_, K, K))
        self._ZtX = np.empty((G_, K, L))
        for a in range(K):
            for b in range(a, K):
                s = np.add.reduceat(Zs[:, a] * Zs[:, b], starts)
                self._ZtZ[:, a, b] = s
                self._ZtZ[:, b, a] = s
            for l in range(L):
                self._ZtX[:, a, l] = np.add.reduceat(Zs[:, a] * Xs[:, l], starts)

    @property
    def group_labels(self) -> np.ndarray:
        """Distinct group labels in internal (sorted) group order."""
        return np.unique(np.asarray(self.groups))

    def n_theta(self) -> int:
        return self.n_random * (self.n_random + 1) // 2


class _YStats(NamedTuple):
    """Response-dependent sufficient statistics (in sorted row order)."""

    Xty: np.ndarray  # (L,)
    Zty: np.ndarray  # (G, K)
    yty: float
    ys: np.ndarray  # sorted response, kept for exact RSS refinement


def _y_stats(spec: MixedModelSpec, y: np.ndarray) -> _YStats:
    y = np.asarray(y, dtype=float).ravel()
    if y.shape != (spec.n_obs,):
        raise ValueError(f"response length {y.size} != n_obs {spec.n_obs}")
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")
    ys = y[spec._order]
    Zty = np.stack(
        [np.add.reduceat(spec._Zs[:, a] * ys, spec._starts) for a in range(spec.n_random)],
        axis=1,
    )
    return _YStats(Xty=spec._Xs.T @ ys, Zty=Zty, yty=float(ys @ ys), ys=ys)


def _y_stats_batch(spec: MixedModelSpec, Y: np.ndarray) -> list[_YStats]:
    """Column-wise _YStats for a response matrix, in one vectorized pass."""
    Ys = np.ascontiguousarray(np.asarray(Y, dtype=float)[spec._order])
    XtY = spec._Xs.T @ Ys  # (L, m)
    ZtY = np.stack(
        [
            np.add.reduceat(spec._Zs[:, a, None] * Ys, spec._starts, axis=0)
            for a in range(spec.n_random)
        ],
        axis=1,
    )  # (G, K, m)
    ytys = np.einsum("nm,nm->m", Ys, Ys)
    return [
        _YStats(Xty=XtY[:, j], Zty=ZtY[:, :, j], yty=float(ytys[j]), ys=Ys[:, j])
        for j in range(Ys.shape[1])
    ]


def theta_to_lambda(theta: np.ndarray, k: int) -> np.ndarray:
    """Lower-triangular Cholesky factor Lam of G/sigma2 from theta.

    Layout is column-major over the lower triangle with diagonal entries
    stored as logs: K=1 -> (log l11); K=2 -> (log l11, l21, log l22).
    """
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != k * (k + 1) // 2:
        raise ValueError(f"theta length {theta.size} != K(K+1)/2 = {k * (k + 1) // 2}")
    lam = np.zeros((k, k))
    pos = 0
    for j in range(k):
        lam[j, j] = np.exp(np.clip(theta[pos], -_THETA_LOG_CLIP, _THETA_LOG_CLIP))
        pos += 1
        for i in range(j + 1, k):
            lam[i, j] = theta[pos]
            pos += 1
    return lam


def lambda_to_theta(lam: np.ndarray) -> np.ndarray:
    k = lam.shape[0]
    out = []
    for j in range(k):
        out.append(np.log(lam[j, j]))
        for i in range(j + 1, k):
            out.append(lam[i, j])
    return np.array(out)


@dataclass(frozen=True)
class VarianceComponents:
    """Random-effect covariance G, residual variance, and raw parameters."""

    G: np.ndarray
    sigma2: float
    theta: np.ndarray

    @classmethod
    def from_theta(cls, theta, sigma2: float) -> "VarianceComponents":
        theta = np.asarray(theta, dtype=float).ravel()
        k = {1: 1, 3: 2}.get(theta.size)
        if k is None:
            raise ValueError(f"theta length {theta.size} not supported (K in {{1,2}})")
        lam = theta_to_lambda(theta, k)
        return cls(G=sigma2 * (lam @ lam.T), sigma2=float(sigma2), theta=theta)

    def to_theta(self) -> np.ndarray:
        """Recover theta from (G, sigma2); requires G positive definite."""
        lam = np.linalg.cholesky(self.G / self.sigma2)
        return lambda_to_theta(lam)


@dataclass
class LMMFit:
    """One fitted mixed model."""

    beta: np.ndarray
    vcov_beta: np.ndarray
    components: VarianceComponents
    blups: np.ndarray  # (n_groups, K), internal sorted group order
    reml_deviance: float
    converged: bool
    n_iterations: int


class _Profile(NamedTuple):
    deviance: float
    beta: np.ndarray
    rss: float
    A: np.ndarray
    minv: np.ndarray  # (G, K, K)
    lam: np.ndarray


def _profile(spec: MixedModelSpec, ys: _YStats, theta: np.ndarray) -> Optional[_Profile]:
    """Profiled REML pieces at theta, or None when the system degenerates."""
    K, L = spec.n_random, spec.n_fixed
    nstar = spec.n_obs - L
    lam = theta_to_lambda(theta, K)

    if K == 1:
        gam = lam[0, 0] ** 2
        zz = spec._ZtZ[:, 0, 0]
        m = 1.0 + gam * zz
        w = gam / m
        zx = spec._ZtX[:, 0, :]
        zy = ys.Zty[:, 0]
        A = spec._XtX - (zx * w[:, None]).T @ zx
        b = ys.Xty - zx.T @ (w * zy)
        ld_m = float(np.log(m).sum())
        minv = (1.0 / m)[:, None, None]
    else:
        ztz, ztx, zty = spec._ZtZ, spec._ZtX, ys.Zty
        a11, a21, a22 = lam[0, 0], lam[1, 0], lam[1, 1]
        s11, s12, s22 = ztz[:, 0, 0], ztz[:, 0, 1], ztz[:, 1, 1]
        m11 = 1.0 + a11 * a11 * s11 + 2.0 * a11 * a21 * s12 + a21 * a21 * s22
        m12 = a22 * (a11 * s12 + a21 * s22)
        m22 = 1.0 + a22 * a22 * s22
        det = m11 * m22 - m12 * m12
        if np.any(det <= 0.0) or not np.all(np.isfinite(det)):
            return None
        minv = np.empty((spec.n_groups, 2, 2))
        minv[:, 0, 0] = m22 / det
        minv[:, 0, 1] = minv[:, 1, 0] = -m12 / det
        minv[:, 1, 1] = m11 / det
        ld_m = float(np.log(det).sum())
        # C = Lam' Z'X, D = Lam' Z'y per group
        C = np.empty((spec.n_groups, 2, L))
        C[:, 0, :] = a11 * ztx[:, 0, :] + a21 * ztx[:, 1, :]
        C[:, 1, :] = a22 * ztx[:, 1, :]
        D = np.empty((spec.n_groups, 2))
        D[:, 0] = a11 * zty[:, 0] + a21 * zty[:, 1]
        D[:, 1] = a22 * zty[:, 1]
        A = spec._XtX - np.einsum("gai,gab,gbj->ij", C, minv, C)
        b = ys.Xty - np.einsum("gai,gab,gb->i", C, minv, D)

    try:
        cho = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    beta = np.linalg.solve(A, b)
    ld_A = 2.0 * float(np.sum(np.log(np.diag(cho))))

    # RSS from moments; refine with a direct residual pass when the moment
    # form loses all significant digits (near-interpolating fits).
    ztr = ys.Zty - spec._ZtX @ beta
    if K == 1:
        corr = float(np.sum(w * ztr[:, 0] * ztr[:, 0]))
    else:
        E = np.empty_like(ztr)
        E[:, 0] = a11 * ztr[:, 0] + a21 * ztr[:, 1]
        E[:, 1] = a22 * ztr[:, 1]
        corr = float(np.einsum("ga,gab,gb->", E, minv, E))
    rr = ys.yty - 2.0 * beta @ ys.Xty + beta @ spec._XtX @ beta
    if rr < 1e-8 * max(ys.yty, 1.0):
        r = ys.ys - spec._Xs @ beta
        rr = float(r @ r)
    rss = rr - corr
    rss = max(rss, 1e-12 * rr, 1e-300)
    dev = ld_m + ld_A - spec._ld_XtX + nstar * (1.0 + LOG_2PI + np.log(rss / nstar))
    if not np.isfinite(dev):
        return None
    return _Profile(deviance=float(dev), beta=beta, rss=rss, A=A, minv=minv, lam=lam)


def _deviance_k1(spec: MixedModelSpec, ys: _YStats, t0: float) -> float:
    """Lean K=1 deviance for the optimizer's inner loop.

    Same math as _profile, stripped to the minimum number of array
    operations; the rich _profile recomputes everything at the optimum.
    """
    if t0 > _THETA_LOG_CLIP:
        t0 = _THETA_LOG_CLIP
    elif t0 < -_THETA_LOG_CLIP:
        t0 = -_THETA_LOG_CLIP
    gam = math.exp(2.0 * t0)
    zz = spec._ZtZ[:, 0, 0]
    m = 1.0 + gam * zz
    w = gam / m
    zx = spec._ZtX[:, 0, :]
    zy = ys.Zty[:, 0]
    wzy = w * zy
    L = spec.n_fixed
    nstar = spec.n_obs - L
    if L == 1:
        x = zx[:, 0]
        a11 = spec._XtX[0, 0] - float(x @ (w * x))
        if a11 <= 0.0:
            return _BIG
        b1 = ys.Xty[0] - float(x @ wzy)
        beta1 = b1 / a11
        ztr = zy - x * beta1
        rr = ys.yty - 2.0 * beta1 * ys.Xty[0] + beta1 * beta1 * spec._XtX[0, 0]
        if rr < 1e-8 * max(ys.yty, 1.0):
            r = ys.ys - spec._Xs[:, 0] * beta1
            rr = float(r @ r)
        rss = rr - float(ztr @ (w * ztr))
        rss = max(rss, 1e-12 * rr, 1e-300)
        ld_A = math.log(a11)
    else:
        A = spec._XtX - (zx * w[:, None]).T @ zx
        b = ys.Xty - zx.T @ wzy
        try:
            cho = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            return _BIG
        beta = np.linalg.solve(A, b)
        ld_A = 2.0 * float(np.sum(np.log(np.diag(cho))))
        ztr = zy - zx @ beta
        rr = ys.yty - 2.0 * beta @ ys.Xty + beta @ spec._XtX @ beta
        if rr < 1e-8 * max(ys.yty, 1.0):
            r = ys.ys - spec._Xs @ beta
            rr = float(r @ r)
        rss = rr - float(ztr @ (w * ztr))
        rss = max(rss, 1e-12 * rr, 1e-300)
    dev = (
        float(np.log(m).sum())
        + ld_A
        - spec._ld_XtX
        + nstar * (1.0 + LOG_2PI + math.log(rss / nstar))
    )
    return dev if math.isfinite(dev) else _BIG


def profiled_reml_deviance(spec: MixedModelSpec, y, theta) -> float:
    """-2 x restricted log-likelihood, profiled over beta and sigma2.

    Includes the +log|X'X| normalization so the G -> 0 limit equals the
    OLS restricted deviance (n - L) * (1 + log(2 pi RSS / (n - L))).
    """
    prof = _profile(spec, _y_stats(spec, y), np.asarray(theta, dtype=float))
    if prof is None:
        raise RankDeficiencyError("profiled system X'V^-1 X is singular at this theta")
    return prof.deviance


def _initial_theta(spec: MixedModelSpec, ys: _YStats) -> np.ndarray:
    """Method-of-moments start: split OLS residual variance into
    between-group and within-group parts. Falls back to zeros."""
    try:
        beta0 = np.linalg.solve(spec._XtX, ys.Xty)
        r = ys.ys - spec._Xs @ beta0
        gmeans = np.add.reduceat(r, spec._starts) / spec._sizes
        within = r - np.repeat(gmeans, spec._sizes)
        dof_w = max(spec.n_obs - spec.n_groups, 1)
        s2_w = float(within @ within) / dof_w
        s2_w = max(s2_w, 1e-8 * max(float(r @ r) / max(spec.n_obs, 1), 1e-12))
        jbar = float(np.mean(spec._sizes))
        var_b = float(np.var(gmeans, ddof=1)) if spec.n_groups > 1 else 0.0
        g0 = max(var_b - s2_w / jbar, 1e-3 * s2_w)
        t_int = 0.5 * np.log(g0 / s2_w)
        if spec.n_random == 1:
            theta = np.array([t_int])
        else:
            # modest start for the slope component, uncorrelated
            z2 = spec._Zs[:, 1]
            scale2 = max(float(np.mean(z2 * z2)), 1e-8)
            t_slope = 0.5 * np.log(max(0.1 * g0 / s2_w / scale2, 1e-8))
            theta = np.array([t_int, 0.0, t_slope])
        if np.all(np.isfinite(theta)):
            return np.clip(theta, -10.0, 10.0)
    except (np.linalg.LinAlgError, FloatingPointError):
        pass
    return np.zeros(spec.n_theta())


# Deterministic perturbations applied to the incumbent optimum before
# each Nelder-Mead restart.
_RESTART_STEPS = (0.1, -0.1)


def _parabolic_polish(objective, x, fx, h: float = 1e-4, sweeps: int = 2):
    """Coordinate-wise parabolic refinement of a located minimum.

    The simplex terminates at xatol resolution; two quadratic-fit sweeps
    push the localization to the objective's numerical noise floor, which
    variance components inherit with a factor ~2.
    """
    x = x.copy()
    for _ in range(sweeps):
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fp, fm = objective(xp), objective(xm)
            denom = fp - 2.0 * fx + fm
            if denom <= 0.0 or not np.isfinite(denom):
                continue
            step = 0.5 * h * (fm - fp) / denom
            if abs(step) > h:
                step = h if step > 0 else -h
            cand = x.copy()
            cand[i] += step
            fc = objective(cand)
            if fc <= fx:
                x, fx = cand, fc
    return x, fx


def fit_reml(
    spec: MixedModelSpec,
    y,
    init=None,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> LMMFit:
    """REML fit: Nelder-Mead on theta with two restarts, then closed-form
    beta, sigma2, BLUPs, and vcov(beta) at the optimum.

    ``init`` warm-starts the optimizer (e.g. from a neighbouring grid
    point); it changes speed, not the result. ``converged`` reflects
    whether the relative deviance change fell below ``tol`` before the
    iteration cap.
    """
    return _fit_prepared(spec, _y_stats(spec, y), init=init, tol=tol, max_iter=max_iter)


def _fit_prepared(
    spec: MixedModelSpec,
    ys: _YStats,
    init=None,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> LMMFit:
    if spec.n_obs <= spec.n_fixed + spec.n_random:
        raise ValueError(
            f"need n_obs > L + K = {spec.n_fixed + spec.n_random}, got {spec.n_obs}"
        )
    theta0 = _initial_theta(spec, ys) if init is None else np.asarray(init, dtype=float).ravel()
    if theta0.size != spec.n_theta():
        raise ValueError(f"init length {theta0.size} != {spec.n_theta()}")

    if spec.n_random == 1:

        def objective(theta):
            return _deviance_k1(spec, ys, float(theta[0]))

    else:

        def objective(theta):
            prof = _profile(spec, ys, theta)
            return _BIG if prof is None else prof.deviance

    d = spec.n_theta()
    f0 = objective(theta0)
    fatol = tol * (abs(f0) + 1.0)

    def run(x0, spread, xatol):
        simplex = np.tile(x0, (d + 1, 1))
        simplex[1:] += spread * np.eye(d)
        return minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options=dict(
                initial_simplex=simplex,
                xatol=xatol,
                fatol=fatol,
                maxiter=max_iter,
                maxfev=6 * max_iter,
            ),
        )

    # One tight run from the initial point (small simplex when warm
    # started), then cheap exploratory restarts; a restart that improves
    # on the incumbent is re-polished at full tightness.
    best = run(theta0, 0.02 if init is not None else 0.3, 5e-8)
    n_iter = best.nit
    for step in _RESTART_STEPS:
        probe = run(best.x + step, 0.05, 1e-3)
        n_iter += probe.nit
        if probe.fun < best.fun - fatol:
            polish = run(probe.x, 0.02, 5e-8)
            n_iter += polish.nit
            if polish.fun < best.fun:
                best = polish
    converged = bool(best.success)
    x_best, f_best = _parabolic_polish(objective, best.x, best.fun)

    prof = _profile(spec, ys, x_best)
    if prof is None:
        raise RankDeficiencyError("profiled system singular at the optimum")
    nstar = spec.n_obs - spec.n_fixed
    sigma2 = prof.rss / nstar
    gamma = prof.lam @ prof.lam.T
    G = sigma2 * gamma
    # boundary reporting: tiny eigenvalues of G are exact zeros
    evals, evecs = np.linalg.eigh(G)
    evals[evals < BOUNDARY_EIGENVALUE] = 0.0
    G = (evecs * evals) @ evecs.T

    # BLUPs: u_g = Gamma (Z'r - Z'Z Lam M^-1 Lam' Z'r), scaled by nothing
    # further since Gamma = G / sigma2 and V = sigma2 V0.
    ztr = ys.Zty - spec._ZtX @ prof.beta
    lam_t_ztr = np.einsum("ab,gb->ga", prof.lam.T, ztr)
    inner = np.einsum("gab,gb->ga", prof.minv, lam_t_ztr)
    correction = np.einsum("gab,bc,gc->ga", spec._ZtZ, prof.lam, inner)
    blups = (ztr - correction) @ gamma.T

    vcov = sigma2 * np.linalg.inv(prof.A)
    vcov = 0.5 * (vcov + vcov.T)
    return LMMFit(
        beta=prof.beta,
        vcov_beta=vcov,
        components=VarianceComponents(G=G, sigma2=float(sigma2), theta=x_best.copy()),
        blups=blups,
        reml_deviance=prof.deviance,
        converged=converged,
        n_iterations=int(n_iter),
    )


def predict_blup(fit: LMMFit, spec: MixedModelSpec, include_random: bool = True) -> np.ndarray:
    """Per-observation fitted values X beta (+ Z u), in input row order."""
    if fit.beta.shape != (spec.n_fixed,) or fit.blups.shape != (spec.n_groups, spec.n_random):
        raise ValueError("fit dimensions do not match the model spec")
    fitted = spec.X @ fit.beta
    if include_random:
        fitted = fitted + np.einsum("nk,nk->n", spec.Z, fit.blups[spec._group_idx])
    return fitted


def r_squared_components(fit: LMMFit, spec: MixedModelSpec) -> tuple[float, float]:
    """(marginal R2, conditional R2): fixed-effects variance share, and
    fixed-plus-random share, of the total fitted + residual variance."""
    var_f = float(np.var(spec.X @ fit.beta, ddof=1))
    var_r = float(np.mean(np.einsum("nk,kl,nl->n", spec.Z, fit.components.G, spec.Z)))
    total = var_f + var_r + fit.components.sigma2
    if total <= 0.0:
        raise ValueError("total variance is zero; R-squared undefined")
    return var_f / total, (var_f + var_r) / total
