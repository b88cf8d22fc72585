import numpy as np
import pytest

from qfreg import MixedModelSpec, build_grid


@pytest.fixture
def default_grid():
    return build_grid(100)


@pytest.fixture
def rng():
    return np.random.default_rng(20240913)


def make_balanced_dataset(rng, n_subjects=30, n_visits=5, sd_u=2.0, sd_e=1.0, beta=(3.0,)):
    """Balanced random-intercept data with intercept-only fixed effects."""
    u = rng.normal(0.0, sd_u, n_subjects)
    y2d = beta[0] + u[:, None] + rng.normal(0.0, sd_e, (n_subjects, n_visits))
    y = y2d.ravel()
    n = n_subjects * n_visits
    spec = MixedModelSpec(
        X=np.ones((n, 1)), Z=np.ones((n, 1)), groups=np.repeat(np.arange(n_subjects), n_visits)
    )
    return spec, y, y2d


def make_unbalanced_dataset(rng, n_subjects=40, slope=False):
    """Unbalanced mixed-model data with one covariate and K in {1, 2}."""
    rows_X, rows_Z, groups, ys = [], [], [], []
    chol = np.linalg.cholesky(np.array([[4.0, 0.6], [0.6, 0.25]]))
    for i in range(n_subjects):
        J = int(rng.integers(3, 8))
        u = chol @ rng.normal(size=2)
        for j in range(1, J + 1):
            x1 = rng.normal()
            mu = 2.0 + 0.5 * x1 + u[0] + (u[1] * j if slope else 0.0)
            rows_X.append((1.0, x1))
            rows_Z.append((1.0, float(j)) if slope else (1.0,))
            groups.append(i)
            ys.append(mu + rng.normal(0.0, 1.2))
    spec = MixedModelSpec(
        X=np.asarray(rows_X), Z=np.asarray(rows_Z), groups=np.asarray(groups)
    )
    return spec, np.asarray(ys)
