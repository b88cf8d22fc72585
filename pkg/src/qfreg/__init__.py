"""Multilevel function-on-scalar regression for quantile-function responses.

Pointwise REML mixed models over a probability grid, linear smoothing of
the coefficient curves, cluster-bootstrap pointwise and simultaneous
confidence bands, and monotone projection of predicted quantile curves,
plus synthetic-data studies and a CLI.
"""

__version__ = "0.1.0"

from .quantiles import (
    ProbabilityGrid,
    QuantileFunction,
    build_grid,
    empirical_quantile,
    integrate_grid,
    pava_project,
)
from .lmm import (
    LMMFit,
    MixedModelSpec,
    RankDeficiencyError,
    VarianceComponents,
    fit_reml,
    predict_blup,
    profiled_reml_deviance,
    r_squared_components,
)
from .smoothing import SmootherSpec
from .inference import (
    BootstrapBands,
    FunctionalFit,
    LongitudinalDataset,
    ScalarFit,
    bootstrap_bands,
    fit_pointwise,
    fit_scalar_multilevel,
    fpca_decompose,
    joint_band_quantile,
    predict_subject_quantiles,
    smooth_coefficients,
)
from .simulate import (
    MSESummary,
    ScenarioConfig,
    SimulationReport,
    coverage_study,
    mse_functional,
    mse_study,
    pointwise_mse_curve,
    simulate_scenario1,
    simulate_scenario2,
    summarize_mse,
    true_coefficients,
)

__all__ = [
    "ProbabilityGrid",
    "QuantileFunction",
    "build_grid",
    "empirical_quantile",
    "integrate_grid",
    "pava_project",
    "LMMFit",
    "MixedModelSpec",
    "RankDeficiencyError",
    "VarianceComponents",
    "fit_reml",
    "predict_blup",
    "profiled_reml_deviance",
    "r_squared_components",
    "SmootherSpec",
    "BootstrapBands",
    "FunctionalFit",
    "LongitudinalDataset",
    "ScalarFit",
    "bootstrap_bands",
    "fit_pointwise",
    "fit_scalar_multilevel",
    "fpca_decompose",
    "joint_band_quantile",
    "predict_subject_quantiles",
    "smooth_coefficients",
    "MSESummary",
    "ScenarioConfig",
    "SimulationReport",
    "coverage_study",
    "mse_functional",
    "mse_study",
    "pointwise_mse_curve",
    "simulate_scenario1",
    "simulate_scenario2",
    "summarize_mse",
    "true_coefficients",
    "__version__",
]
