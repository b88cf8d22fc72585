import numpy as np
import pytest

from qfreg import (
    MixedModelSpec,
    RankDeficiencyError,
    VarianceComponents,
    fit_reml,
    predict_blup,
    profiled_reml_deviance,
    r_squared_components,
)
from qfreg.lmm import lambda_to_theta, theta_to_lambda

from conftest import make_balanced_dataset, make_unbalanced_dataset
from oracles import balanced_oneway_reml, ols_restricted_deviance


class TestSpecValidation:
    def test_rank_deficient_x(self, rng):
        n = 60
        x = rng.normal(size=n)
        X = np.column_stack([np.ones(n), x, 2.0 * x])  # collinear
        with pytest.raises(RankDeficiencyError):
            MixedModelSpec(X=X, Z=np.ones((n, 1)), groups=np.repeat(np.arange(10), 6))

    def test_k3_rejected(self, rng):
        n = 30
        with pytest.raises(ValueError, match="K"):
            MixedModelSpec(X=np.ones((n, 1)), Z=np.ones((n, 3)), groups=np.arange(n) % 5)

    def test_group_relabeling_is_canonical(self, rng):
        spec, y, _ = make_balanced_dataset(rng)
        relabeled = MixedModelSpec(
            X=spec.X, Z=spec.Z, groups=np.asarray([f"s{g:02d}" for g in spec.groups])
        )
        f1, f2 = fit_reml(spec, y), fit_reml(relabeled, y)
        np.testing.assert_allclose(f1.beta, f2.beta, atol=1e-12)


class TestThetaRoundTrip:
    @pytest.mark.parametrize(
        "theta,sigma2",
        [
            (np.array([0.3]), 1.7),
            (np.array([-1.2]), 0.4),
            (np.array([0.1, -0.4, -0.8]), 2.2),
        ],
    )
    def test_round_trip(self, theta, sigma2):
        vc = VarianceComponents.from_theta(theta, sigma2)
        np.testing.assert_allclose(vc.to_theta(), theta, atol=1e-12)

    def test_lambda_layout(self):
        lam = theta_to_lambda(np.array([np.log(2.0), 0.7, np.log(0.5)]), 2)
        np.testing.assert_allclose(lam, [[2.0, 0.0], [0.7, 0.5]])
        np.testing.assert_allclose(
            lambda_to_theta(lam), [np.log(2.0), 0.7, np.log(0.5)], atol=1e-14
        )

    def test_bad_theta_length(self, rng):
        spec, y, _ = make_balanced_dataset(rng)
        with pytest.raises(ValueError, match="theta length"):
            profiled_reml_deviance(spec, y, np.array([0.0, 0.0]))


class TestProfiledDeviance:
    def test_matches_ols_limit_intercept_only(self, rng):
        n = 150
        X = np.ones((n, 1))
        y = rng.normal(size=n)
        spec = MixedModelSpec(X=X, Z=np.ones((n, 1)), groups=np.arange(n) % 15)
        dev = profiled_reml_deviance(spec, y, np.array([-30.0]))
        assert dev == pytest.approx(ols_restricted_deviance(X, y), abs=1e-8)

    def test_matches_ols_limit_k2(self, rng):
        spec, y = make_unbalanced_dataset(rng, slope=True)
        dev = profiled_reml_deviance(spec, y, np.array([-30.0, 0.0, -30.0]))
        assert dev == pytest.approx(ols_restricted_deviance(spec.X, y), rel=1e-10)

    def test_anova_theta_is_local_min(self, rng):
        spec, y, y2d = make_balanced_dataset(rng, n_subjects=40, n_visits=6)
        sigma2, g = balanced_oneway_reml(y2d)
        theta_star = np.array([0.5 * np.log(g / sigma2)])
        dev_star = profiled_reml_deviance(spec, y, theta_star)
        for _ in range(100):
            delta = rng.uniform(-1.5, 1.5)
            if abs(delta) < 1e-3:
                continue
            assert dev_star <= profiled_reml_deviance(spec, y, theta_star + delta) + 1e-9

    def test_scale_shifts_deviance_by_constant(self, rng):
        spec, y, _ = make_balanced_dataset(rng)
        nstar = spec.n_obs - spec.n_fixed
        offset = 2.0 * nstar * np.log(2.0)
        for t in (-1.0, 0.0, 0.8):
            d1 = profiled_reml_deviance(spec, y, np.array([t]))
            d2 = profiled_reml_deviance(spec, 2.0 * y, np.array([t]))
            assert d2 - d1 == pytest.approx(offset, rel=1e-10)


class TestFitReml:
    def test_noiseless(self, rng):
        n = 120
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        spec = MixedModelSpec(X=X, Z=np.ones((n, 1)), groups=np.repeat(np.arange(20), 6))
        fit = fit_reml(spec, X @ np.array([1.0, 2.0]))
        np.testing.assert_allclose(fit.beta, [1.0, 2.0], atol=1e-8)
        assert fit.components.sigma2 < 1e-10
        np.testing.assert_allclose(fit.components.G, 0.0, atol=1e-10)

    def test_balanced_anova_oracle(self, rng):
        for _ in range(10):
            spec, y, y2d = make_balanced_dataset(rng)
            sigma2, g = balanced_oneway_reml(y2d)
            assert g > 0  # interior by construction
            fit = fit_reml(spec, y)
            assert fit.components.sigma2 == pytest.approx(sigma2, rel=1e-6)
            assert fit.components.G[0, 0] == pytest.approx(g, rel=1e-6)

    def test_beta_is_gls_at_thetahat(self, rng):
        spec, y = make_unbalanced_dataset(rng)
        fit = fit_reml(spec, y)
        gamma = fit.components.G / fit.components.sigma2
        V0 = np.eye(spec.n_obs) + spec.Z @ gamma @ spec.Z.T * (
            spec.groups[:, None] == spec.groups[None, :]
        )
        Vinv = np.linalg.inv(V0)
        beta_gls = np.linalg.solve(spec.X.T @ Vinv @ spec.X, spec.X.T @ Vinv @ y)
        np.testing.assert_allclose(fit.beta, beta_gls, atol=1e-8)

    def test_deviance_not_worse_than_init(self, rng):
        spec, y = make_unbalanced_dataset(rng)
        init = np.array([1.3])
        fit = fit_reml(spec, y, init=init)
        assert fit.reml_deviance <= profiled_reml_deviance(spec, y, init) + 1e-9

    def test_scenario1_slice_recovers_level(self):
        # cross-section of the scenario-1 generator at the top grid point
        from qfreg import ScenarioConfig, simulate_scenario1

        estimates = []
        for r in range(20):
            cfg = ScenarioConfig(scenario=1, n=2000, J=5, rho=0.0, m=2, replicates=1, seed=42)
            data = simulate_scenario1(cfg, 1000 + r)
            spec = data.model_spec("intercept")
            fit = fit_reml(spec, data.responses[:, -1])
            estimates.append(fit.beta[0])
        squared_bias = (np.mean(estimates) - 160.0) ** 2
        assert squared_bias <= 0.12

    def test_location_scale_equivariance(self, rng):
        spec, y = make_unbalanced_dataset(rng, slope=True)
        a, b = 2.5, -7.0
        f1 = fit_reml(spec, y)
        f2 = fit_reml(spec, a * y + b)
        np.testing.assert_allclose(f2.beta[0], a * f1.beta[0] + b, rtol=1e-6)
        np.testing.assert_allclose(f2.beta[1:], a * f1.beta[1:], rtol=1e-6)
        np.testing.assert_allclose(f2.components.sigma2, a**2 * f1.components.sigma2, rtol=1e-6)
        np.testing.assert_allclose(f2.components.G, a**2 * f1.components.G, rtol=1e-5, atol=1e-8)

    def test_permutation_invariance(self, rng):
        # Reordering observations permutes floating-point summation order,
        # which perturbs the REML objective at its noise floor and moves
        # the optimum by ~sqrt(eps/H); beta is far more stable than the
        # variance components, which inherit the theta localization limit.
        spec, y = make_unbalanced_dataset(rng)
        perm = rng.permutation(spec.n_obs)
        spec_p = MixedModelSpec(X=spec.X[perm], Z=spec.Z[perm], groups=spec.groups[perm])
        f1, f2 = fit_reml(spec, y), fit_reml(spec_p, y[perm])
        np.testing.assert_allclose(f1.beta, f2.beta, atol=1e-9)
        np.testing.assert_allclose(f1.components.G, f2.components.G, rtol=1e-6)
        assert f1.components.sigma2 == pytest.approx(f2.components.sigma2, rel=1e-7)

    def test_group_block_permutation_bit_identical(self, rng):
        # Moving whole subjects around (within-subject order kept) does not
        # change any summation order after canonical re-sorting.
        spec, y = make_unbalanced_dataset(rng)
        sizes = np.bincount(np.unique(spec.groups, return_inverse=True)[1])
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        block_order = rng.permutation(len(sizes))
        perm = np.concatenate([np.arange(starts[g], starts[g] + sizes[g]) for g in block_order])
        spec_p = MixedModelSpec(X=spec.X[perm], Z=spec.Z[perm], groups=spec.groups[perm])
        f1, f2 = fit_reml(spec, y), fit_reml(spec_p, y[perm])
        np.testing.assert_array_equal(f1.beta, f2.beta)
        np.testing.assert_array_equal(f1.components.G, f2.components.G)
        assert f1.components.sigma2 == f2.components.sigma2

    def test_local_optimality(self, rng):
        spec, y = make_unbalanced_dataset(rng, slope=True)
        fit = fit_reml(spec, y)
        theta_hat = fit.components.theta
        for _ in range(50):
            delta = rng.normal(size=theta_hat.size)
            delta *= 0.1 / np.linalg.norm(delta)
            assert fit.reml_deviance <= profiled_reml_deviance(spec, y, theta_hat + delta) + 1e-7

    def test_vcov_symmetric_psd(self, rng):
        spec, y = make_unbalanced_dataset(rng, slope=True)
        fit = fit_reml(spec, y)
        np.testing.assert_allclose(fit.vcov_beta, fit.vcov_beta.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(fit.vcov_beta) >= -1e-12)

    def test_warm_start_same_answer(self, rng):
        spec, y = make_unbalanced_dataset(rng)
        f_cold = fit_reml(spec, y)
        f_warm = fit_reml(spec, y, init=f_cold.components.theta + 0.4)
        np.testing.assert_allclose(f_cold.beta, f_warm.beta, atol=1e-8)
        assert f_cold.components.sigma2 == pytest.approx(f_warm.components.sigma2, rel=1e-6)

    def test_too_few_observations(self):
        spec = MixedModelSpec(X=np.ones((2, 1)), Z=np.ones((2, 1)), groups=np.array([0, 1]))
        with pytest.raises(ValueError, match="n_obs"):
            fit_reml(spec, np.array([1.0, 2.0]))

    def test_wrong_response_length(self, rng):
        spec, y, _ = make_balanced_dataset(rng)
        with pytest.raises(ValueError, match="length"):
            fit_reml(spec, y[:-1])


class TestAgainstStatsmodels:
    """Cross-check on unbalanced designs against an independent solver."""

    def test_random_intercept(self, rng):
        sm = pytest.importorskip("statsmodels.api")
        spec, y = make_unbalanced_dataset(rng)
        fit = fit_reml(spec, y)
        res = sm.MixedLM(y, spec.X, groups=spec.groups).fit(reml=True, method="lbfgs")
        np.testing.assert_allclose(fit.beta, res.fe_params, rtol=1e-4)
        assert fit.components.sigma2 == pytest.approx(res.scale, rel=1e-3)
        # statsmodels reports cov_re already on the response scale
        assert fit.components.G[0, 0] == pytest.approx(
            float(np.asarray(res.cov_re)[0, 0]), rel=1e-3
        )

    def test_random_intercept_slope(self, rng):
        sm = pytest.importorskip("statsmodels.api")
        spec, y = make_unbalanced_dataset(rng, slope=True)
        fit = fit_reml(spec, y)
        res = sm.MixedLM(y, spec.X, groups=spec.groups, exog_re=spec.Z).fit(
            reml=True, method="lbfgs", maxiter=2000
        )
        np.testing.assert_allclose(fit.beta, res.fe_params, rtol=1e-4)
        np.testing.assert_allclose(
            fit.components.G, np.asarray(res.cov_re) * res.scale, rtol=2e-2, atol=1e-3
        )


class TestPredictBlup:
    def test_zero_g_equals_ols(self, rng):
        # independent errors; REML puts G on the boundary for this seed
        n = 200
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ np.array([1.0, 0.5]) + np.random.default_rng(3).normal(0, 1.0, n)
        spec = MixedModelSpec(X=X, Z=np.ones((n, 1)), groups=np.arange(n) % 40)
        fit = fit_reml(spec, y)
        assert fit.components.G[0, 0] == 0.0
        beta_ols, *_ = np.linalg.lstsq(X, y, rcond=None)
        np.testing.assert_allclose(predict_blup(fit, spec), X @ beta_ols, atol=1e-6)

    def test_residuals_orthogonal_to_x(self, rng):
        spec, y = make_unbalanced_dataset(rng, slope=True)
        fit = fit_reml(spec, y)
        resid = y - predict_blup(fit, spec)
        np.testing.assert_allclose(spec.X.T @ resid, 0.0, atol=1e-6)

    def test_shrinkage_closed_form(self, rng):
        spec, y, _ = make_balanced_dataset(rng, n_subjects=25, n_visits=4)
        fit = fit_reml(spec, y)
        g, s2 = fit.components.G[0, 0], fit.components.sigma2
        J = 4
        resid_means = (y - spec.X @ fit.beta).reshape(25, J).mean(axis=1)
        expected = (J * g / (J * g + s2)) * resid_means
        np.testing.assert_allclose(fit.blups[:, 0], expected, atol=1e-8)

    def test_dimension_mismatch(self, rng):
        spec, y, _ = make_balanced_dataset(rng)
        other, y2 = make_unbalanced_dataset(rng)
        fit = fit_reml(spec, y)
        with pytest.raises(ValueError, match="dimensions"):
            predict_blup(fit, other)


class TestRSquared:
    def test_zero_g_marginal_equals_conditional(self, rng):
        n = 200
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = X @ np.array([1.0, 0.5]) + np.random.default_rng(3).normal(0, 1.0, n)
        spec = MixedModelSpec(X=X, Z=np.ones((n, 1)), groups=np.arange(n) % 40)
        fit = fit_reml(spec, y)
        marg, cond = r_squared_components(fit, spec)
        assert marg == pytest.approx(cond, abs=1e-12)

    def test_pure_noise_marginal_near_zero(self):
        r = np.random.default_rng(11)
        n = 5000
        X = np.column_stack([np.ones(n), r.normal(size=n)])
        y = r.normal(size=n)
        spec = MixedModelSpec(X=X, Z=np.ones((n, 1)), groups=np.arange(n) % 500)
        fit = fit_reml(spec, y)
        marg, _ = r_squared_components(fit, spec)
        assert marg == pytest.approx(0.0, abs=0.01)

    def test_bounds_and_ordering(self, rng):
        for _ in range(5):
            spec, y = make_unbalanced_dataset(rng, slope=True)
            fit = fit_reml(spec, y)
            marg, cond = r_squared_components(fit, spec)
            assert 0.0 <= marg <= 1.0
            assert 0.0 <= cond <= 1.0
            assert cond >= marg - 1e-12
