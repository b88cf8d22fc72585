"""Pointwise mixed-model fitting over the probability grid, coefficient
smoothing, and cluster-bootstrap confidence bands.

The pipeline: fit one REML mixed model per grid point, smooth each
coefficient curve with a fixed linear operator, then bootstrap whole
subjects to get pointwise bands (bootstrap mean +/- 2 sd) and joint bands
(original estimate +/- q * sd, with q calibrated by simulating from the
bootstrap curves' principal components and taking the max standardized
deviation). Predicted subject curves are projected onto the nondecreasing
cone so they are valid quantile functions.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .lmm import (
    LMMFit,
    MixedModelSpec,
    RankDeficiencyError,
    VarianceComponents,
    _fit_prepared,
    _y_stats_batch,
    fit_reml,
    r_squared_components,
)
from .quantiles import ProbabilityGrid, QuantileFunction, pava_project
from .smoothing import SmootherSpec, smooth_rows

RANDOM_SPECS = ("intercept", "intercept+slope")


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for one work unit, derived from (seed, *key).

    Stream identity depends only on the integers, never on execution
    order, so parallel schedules reproduce serial results.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


@dataclass
class LongitudinalDataset:
    """Subject-visit records with covariates and functional (or scalar)
    responses on a shared probability grid."""

    subjects: np.ndarray  # (n_records,) subject label per record
    visits: np.ndarray  # (n_records,) visit index j per record
    X: np.ndarray  # (n_records, L) fixed design incl. intercept
    responses: np.ndarray  # (n_records, m), or (n_records,) in scalar mode
    grid: Optional[ProbabilityGrid]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.subjects = np.asarray(self.subjects)
        self.visits = np.asarray(self.visits, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.responses = np.asarray(self.responses, dtype=float)
        n = self.subjects.shape[0]
        if self.visits.shape != (n,) or self.X.shape[0] != n or self.responses.shape[0] != n:
            raise ValueError("subjects, visits, X, and responses must agree on record count")
        if self.grid is None:
            if self.responses.ndim != 1:
                raise ValueError("scalar mode (grid=None) needs a 1-D response vector")
        else:
            if self.responses.ndim != 2 or self.responses.shape[1] != self.grid.m:
                raise ValueError(
                    f"responses must be (n_records, {self.grid.m}) for this grid"
                )
        if not np.all(np.isfinite(self.responses)):
            raise ValueError("responses contain non-finite values")
        if not self.covariate_names:
            self.covariate_names = tuple(f"x{l}" for l in range(self.X.shape[1]))
        if len(self.covariate_names) != self.X.shape[1]:
            raise ValueError("covariate_names length must match X columns")

    @classmethod
    def from_quantile_functions(
        cls, subjects, visits, X, curves: Sequence[QuantileFunction], covariate_names=()
    ) -> "LongitudinalDataset":
        """Assemble from per-record quantile functions, which must all
        share one grid."""
        if not curves:
            raise ValueError("no response curves given")
        grid = curves[0].grid
        for q in curves[1:]:
            if q.grid != grid:
                raise ValueError("all responses must share the identical grid")
        Y = np.vstack([q.values for q in curves])
        return cls(subjects, visits, X, Y, grid, tuple(covariate_names))

    @property
    def n_records(self) -> int:
        return self.subjects.shape[0]

    @property
    def n_subjects(self) -> int:
        return np.unique(self.subjects).size

    @property
    def n_fixed(self) -> int:
        return self.X.shape[1]

    @property
    def scalar_mode(self) -> bool:
        return self.grid is None

    def random_design(self, random_spec: str) -> np.ndarray:
        if random_spec not in RANDOM_SPECS:
            raise ValueError(f"random_spec must be one of {RANDOM_SPECS}, got {random_spec!r}")
        ones = np.ones((self.n_records, 1))
        if random_spec == "intercept":
            return ones
        return np.column_stack([ones, self.visits])

    def model_spec(self, random_spec: str) -> MixedModelSpec:
        return MixedModelSpec(X=self.X, Z=self.random_design(random_spec), groups=self.subjects)

    def resample_subjects(self, rng: np.random.Generator) -> "LongitudinalDataset":
        """Cluster bootstrap draw: subjects with replacement, each bringing
        all its visits; duplicates get fresh ids."""
        labels, idx = np.unique(self.subjects, return_inverse=True)
        order = np.argsort(idx, kind="stable")
        sizes = np.bincount(idx)
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        draw = rng.integers(0, labels.size, labels.size)
        rows = np.concatenate([order[starts[g] : starts[g] + sizes[g]] for g in draw])
        new_subjects = np.repeat(np.arange(labels.size), sizes[draw])
        return LongitudinalDataset(
            subjects=new_subjects,
            visits=self.visits[rows],
            X=self.X[rows],
            responses=self.responses[rows],
            grid=self.grid,
            covariate_names=self.covariate_names,
        )


@dataclass
class FunctionalFit:
    """Pointwise coefficient estimates and their smoothed versions."""

    grid: ProbabilityGrid
    beta_raw: np.ndarray  # (L, m)
    beta_smooth: np.ndarray  # (L, m)
    smoother: SmootherSpec
    varcomps: list[VarianceComponents]  # one per grid point
    converged: np.ndarray  # (m,) bool
    random_spec: str
    coef_names: tuple[str, ...]
    blups: Optional[np.ndarray] = None  # (m, n_groups, K) pointwise BLUPs

    @property
    def thetas(self) -> np.ndarray:
        return np.vstack([vc.theta for vc in self.varcomps])


def fit_pointwise(
    data: LongitudinalDataset,
    random_spec: str = "intercept",
    warm_start: bool = True,
    keep_blups: bool = True,
    tol: float = 1e-8,
    init_thetas: Optional[np.ndarray] = None,
) -> FunctionalFit:
    """Fit one REML mixed model per grid point.

    When ``warm_start`` is on, grid point m+1 initializes at point m's
    optimum; ``init_thetas`` (e.g. a previous fit's optima) takes
    precedence per point. Either way only speed is affected. A point
    whose optimizer hits the iteration cap is flagged, not fatal.
    """
    if data.scalar_mode:
        raise ValueError("fit_pointwise needs functional responses (a grid)")
    if data.n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    spec = data.model_spec(random_spec)
    ystats = _y_stats_batch(spec, data.responses)
    m = data.grid.m
    L = spec.n_fixed
    beta = np.empty((L, m))
    varcomps: list[VarianceComponents] = []
    converged = np.zeros(m, dtype=bool)
    blups = np.empty((m, spec.n_groups, spec.n_random)) if keep_blups else None
    prev_theta = None
    for j in range(m):
        init = None
        if init_thetas is not None:
            init = init_thetas[j]
        elif warm_start and prev_theta is not None:
            init = prev_theta
        try:
            fit = _fit_prepared(spec, ystats[j], init=init, tol=tol)
        except RankDeficiencyError as err:
            raise RankDeficiencyError(
                f"rank-deficient fit at grid point p={data.grid.points[j]:g}: {err}"
            ) from err
        beta[:, j] = fit.beta
        varcomps.append(fit.components)
        converged[j] = fit.converged
        if keep_blups:
            blups[j] = fit.blups
        prev_theta = fit.components.theta
    return FunctionalFit(
        grid=data.grid,
        beta_raw=beta,
        beta_smooth=beta.copy(),
        smoother=SmootherSpec(kind="identity"),
        varcomps=varcomps,
        converged=converged,
        random_spec=random_spec,
        coef_names=data.covariate_names,
        blups=blups,
    )


def smooth_coefficients(fit: FunctionalFit, smoother: SmootherSpec) -> FunctionalFit:
    """Apply a linear smoother to each raw coefficient curve."""
    smoothed, resolved = smooth_rows(fit.beta_raw, fit.grid, smoother)
    return replace(fit, beta_smooth=smoothed, smoother=resolved)


class FPCAResult(NamedTuple):
    mean: np.ndarray  # (m,)
    eigenvalues: np.ndarray  # (Q,) nonincreasing, >= 0
    eigenvectors: np.ndarray  # (Q, m) orthonormal rows
    n_components: int


def fpca_decompose(matrix: np.ndarray, pve: float = 0.95, n_components: Optional[int] = None) -> FPCAResult:
    """Eigendecomposition of the sample covariance of curve replicates.

    Keeps the smallest number of components whose eigenvalue share reaches
    ``pve`` (or exactly ``n_components`` when given), never fewer than one.
    Eigenvalues are clipped at zero; each eigenvector's sign is fixed so
    its largest-magnitude entry is positive.
    """
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))
    B, m = mat.shape
    if B < 2:
        raise ValueError(f"need at least 2 replicates for FPCA, got {B}")
    if not (0.0 < pve <= 1.0):
        raise ValueError(f"pve must lie in (0, 1], got {pve}")
    mean = mat.mean(axis=0)
    centered = mat - mean
    cov = centered.T @ centered / (B - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order].T  # rows are eigenvectors
    total = evals.sum()
    if n_components is not None:
        q = max(1, min(int(n_components), m))
    elif total <= 0.0:
        q = 1
    else:
        q = int(np.searchsorted(np.cumsum(evals) / total, pve) + 1)
        q = min(q, m)
    flip = np.where(evecs[np.arange(evecs.shape[0]), np.argmax(np.abs(evecs), axis=1)] < 0, -1.0, 1.0)
    evecs = evecs * flip[:, None]
    return FPCAResult(mean=mean, eigenvalues=evals[:q], eigenvectors=evecs[:q], n_components=q)


def joint_band_quantile(
    mean: np.ndarray,
    variance: np.ndarray,
    eigenvalues: np.ndarray,
    eigenvectors: np.ndarray,
    n_sim: int = 10000,
    alpha: float = 0.05,
    seed: int | np.random.Generator = 0,
) -> float:
    """Critical multiplier for a simultaneous band.

    Simulates curves from the principal components, standardizes their
    deviations from the mean by the pointwise sd, and returns the
    empirical (1 - alpha) quantile (infimum convention) of the maximum
    over the grid. Grid points with zero variance are excluded from the
    maximum. All-zero eigenvalues give 0 (bands collapse).
    """
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    eigenvectors = np.atleast_2d(np.asarray(eigenvectors, dtype=float))
    if variance.shape != mean.shape or eigenvectors.shape[1] != mean.size:
        raise ValueError("mean, variance, and eigenvectors disagree on grid size")
    if np.any(variance < 0):
        raise ValueError("variance must be nonnegative")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    keep = eigenvalues > 0.0
    if not np.any(keep):
        return 0.0
    valid = variance > 0.0
    if not np.any(valid):
        return 0.0
    rng = seed if isinstance(seed, np.random.Generator) else child_rng(int(seed))
    scale = np.sqrt(eigenvalues[keep])
    draws = rng.standard_normal((int(n_sim), int(keep.sum()))) * scale
    dev = draws @ eigenvectors[keep][:, valid]
    u = np.max(np.abs(dev) / np.sqrt(variance[valid]), axis=1)
    return float(np.quantile(u, 1.0 - alpha, method="inverted_cdf"))


@dataclass
class BootstrapBands:
    """Cluster-bootstrap curves and the bands derived from them.

    Pointwise bands center on the bootstrap mean; joint bands center on
    the original-sample estimate. Both half-widths are multiples of the
    bootstrap pointwise sd.
    """

    grid: ProbabilityGrid
    coef_names: tuple[str, ...]
    n_boot: int
    alpha: float
    pve: float
    n_sim: int
    seed: int
    boot_matrix: np.ndarray  # (L, B, m) per-replicate smoothed estimates
    mean: np.ndarray  # (L, m) bootstrap column means
    variance: np.ndarray  # (L, m) bootstrap column variances (ddof=1)
    eigenvalues: list[np.ndarray]
    eigenvectors: list[np.ndarray]
    q_joint: np.ndarray  # (L,)
    estimate: np.ndarray  # (L, m) original-sample beta_smooth
    pointwise_lower: np.ndarray
    pointwise_upper: np.ndarray
    joint_lower: np.ndarray
    joint_upper: np.ndarray


_BOOT_STATE: dict = {}


def _boot_init(data, random_spec, smoother, init_thetas, tol):
    _BOOT_STATE.update(
        data=data, random_spec=random_spec, smoother=smoother, init_thetas=init_thetas, tol=tol
    )


def _boot_replicate_from_state(args) -> np.ndarray:
    seed, b = args
    return _one_bootstrap_replicate(
        _BOOT_STATE["data"],
        _BOOT_STATE["random_spec"],
        _BOOT_STATE["smoother"],
        _BOOT_STATE["init_thetas"],
        _BOOT_STATE["tol"],
        seed,
        b,
    )


_MAX_REDRAWS = 10


def _one_bootstrap_replicate(data, random_spec, smoother, init_thetas, tol, seed, b) -> np.ndarray:
    rng = child_rng(seed, b)
    for _ in range(_MAX_REDRAWS):
        sample = data.resample_subjects(rng)
        try:
            fit = fit_pointwise(
                sample,
                random_spec=random_spec,
                warm_start=True,
                keep_blups=False,
                tol=tol,
                init_thetas=init_thetas,
            )
        except RankDeficiencyError:
            continue
        fit = smooth_coefficients(fit, smoother)
        return fit.beta_smooth
    raise RankDeficiencyError(
        f"bootstrap replicate {b}: rank-deficient design in {_MAX_REDRAWS} consecutive redraws"
    )


def bootstrap_bands(
    data: LongitudinalDataset,
    fit: FunctionalFit,
    n_boot: int = 500,
    alpha: float = 0.05,
    pve: float = 0.95,
    n_sim: int = 10000,
    seed: int = 0,
    workers: int = 1,
) -> BootstrapBands:
    """Cluster bootstrap of the full pointwise-fit-then-smooth pipeline.

    Replicate b draws subjects with replacement using a stream derived
    from (seed, b), refits every grid point (warm-started at the original
    optima), and re-applies the fit's resolved smoother. Results are
    identical for any worker count.
    """
    if n_boot < 2:
        raise ValueError(f"need at least 2 bootstrap replicates, got {n_boot}")
    if n_boot < 50:
        warnings.warn(
            f"n_boot={n_boot} is small; bands may be unstable (50+ recommended)",
            stacklevel=2,
        )
    init_thetas = fit.thetas
    args = [(seed, b) for b in range(n_boot)]
    if workers > 1:
        ctx_args = (data, fit.random_spec, fit.smoother, init_thetas, 1e-8)
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_boot_init, initargs=ctx_args
        ) as pool:
            rows = list(pool.map(_boot_replicate_from_state, args, chunksize=4))
    else:
        rows = [
            _one_bootstrap_replicate(
                data, fit.random_spec, fit.smoother, init_thetas, 1e-8, seed, b
            )
            for b in range(n_boot)
        ]
    boot = np.stack(rows, axis=1)  # (L, B, m)
    mean = boot.mean(axis=1)
    variance = boot.var(axis=1, ddof=1)
    L = boot.shape[0]
    eigenvalues, eigenvectors, q_joint = [], [], np.empty(L)
    for l in range(L):
        fp = fpca_decompose(boot[l], pve=pve)
        eigenvalues.append(fp.eigenvalues)
        eigenvectors.append(fp.eigenvectors)
        q_joint[l] = joint_band_quantile(
            mean[l],
            variance[l],
            fp.eigenvalues,
            fp.eigenvectors,
            n_sim=n_sim,
            alpha=alpha,
            seed=child_rng(seed, 1_000_003, l),
        )
    sd = np.sqrt(variance)
    estimate = fit.beta_smooth
    return BootstrapBands(
        grid=fit.grid,
        coef_names=fit.coef_names,
        n_boot=n_boot,
        alpha=alpha,
        pve=pve,
        n_sim=n_sim,
        seed=seed,
        boot_matrix=boot,
        mean=mean,
        variance=variance,
        eigenvalues=eigenvalues,
        eigenvectors=eigenvectors,
        q_joint=q_joint,
        estimate=estimate,
        pointwise_lower=mean - 2.0 * sd,
        pointwise_upper=mean + 2.0 * sd,
        joint_lower=estimate - q_joint[:, None] * sd,
        joint_upper=estimate + q_joint[:, None] * sd,
    )


def predict_subject_quantiles(
    data: LongitudinalDataset,
    fit: FunctionalFit,
    include_random: bool = False,
) -> list[QuantileFunction]:
    """Per-record predicted quantile functions, projected onto the
    nondecreasing cone.

    Fixed-effects prediction sum_l X_l beta_l(p), plus the pointwise BLUP
    contribution when ``include_random`` (requires the fit to have kept
    its BLUPs).
    """
    if data.scalar_mode:
        raise ValueError("predictions need functional responses")
    pred = data.X @ fit.beta_smooth  # (n_records, m)
    if include_random:
        if fit.blups is None:
            raise ValueError("fit has no stored BLUPs; refit with keep_blups=True")
        spec = data.model_spec(fit.random_spec)
        Z = data.random_design(fit.random_spec)
        # blups: (m, n_groups, K) -> per record (n_records, m)
        rec_blups = fit.blups[:, spec._group_idx, :]  # (m, n_records, K)
        pred = pred + np.einsum("nk,mnk->nm", Z, rec_blups)
    return [QuantileFunction(data.grid, pava_project(row)) for row in pred]


class ScalarFit(NamedTuple):
    fit: LMMFit
    r2_marginal: float
    r2_conditional: float


def fit_scalar_multilevel(
    data: LongitudinalDataset, random_spec: str = "intercept+slope"
) -> ScalarFit:
    """Mixed model for scalar responses (e.g. per-period sample means)
    with correlated random intercept and slope, plus variance-explained
    summaries."""
    if not data.scalar_mode:
        raise ValueError("fit_scalar_multilevel needs scalar responses (grid=None)")
    spec = data.model_spec(random_spec)
    fit = fit_reml(spec, data.responses)
    marginal, conditional = r_squared_components(fit, spec)
    return ScalarFit(fit=fit, r2_marginal=marginal, r2_conditional=conditional)
