"""Command-line interface: quantiles | fit | simulate | coverage."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .inference import bootstrap_bands, fit_pointwise, fit_scalar_multilevel, predict_subject_quantiles, smooth_coefficients
from .io import (
    SchemaError,
    assemble_dataset,
    load_cgm_csv,
    load_covariates_csv,
    run_metadata,
    write_fit_outputs,
    write_quantiles_csv,
    write_report,
)
from .lmm import RankDeficiencyError
from .quantiles import build_grid
from .simulate import ScenarioConfig, coverage_study, mse_study
from .smoothing import SmootherSpec

_RANDOM_CHOICES = {"intercept": "intercept", "intercept-slope": "intercept+slope"}


@dataclass
class RunConfig:
    """Validated options for one CLI invocation."""

    command: str
    out: Path
    grid_size: int = 100
    n_boot: int = 500
    alpha: float = 0.05
    pve: float = 0.95
    n_sim: int = 10000
    smoother: str = "identity"
    random_spec: str = "intercept"
    seed: int = 0
    workers: int = 1
    cgm: Optional[Path] = None
    covariates: Optional[Path] = None
    formula: str = "~ 1"
    response: str = "quantile"
    days_per_period: Optional[float] = None
    scenario: int = 1
    n: int = 300
    J: int = 5
    rho: float = 0.0
    L: int = 1
    reps: int = 200

    def validate(self):
        if self.grid_size < 2:
            raise ValueError("--grid-size must be >= 2")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("--alpha must lie in (0, 1)")
        if not (0.0 < self.pve <= 1.0):
            raise ValueError("--pve must lie in (0, 1]")
        if self.n_boot < 2:
            raise ValueError("--boot must be >= 2")
        if self.n_sim < 1:
            raise ValueError("--ns must be >= 1")
        if self.workers < 1:
            raise ValueError("--workers must be >= 1")
        if self.command in ("simulate", "coverage"):
            if self.reps < 2:
                raise ValueError("--reps must be >= 2")
            if not (0.0 <= self.rho < 1.0):
                raise ValueError("--rho must lie in [0, 1)")
            if self.scenario not in (1, 2):
                raise ValueError("--scenario must be 1 or 2")
            if self.n < 2 or self.J < 1 or self.L < 1:
                raise ValueError("--n, --J, --L out of range")
        if self.command in ("quantiles", "fit") and self.cgm is None:
            raise ValueError("--cgm is required")
        if self.command == "fit" and self.covariates is None:
            raise ValueError("--covariates is required")
        if self.days_per_period is not None and self.days_per_period <= 0:
            raise ValueError("--days-per-period must be positive")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--grid-size", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--smoother", choices=["identity", "spline"], default="identity")


def _add_inference(p: argparse.ArgumentParser):
    p.add_argument("--boot", type=int, default=500, dest="n_boot")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--pve", type=float, default=0.95)
    p.add_argument("--ns", type=int, default=10000, dest="n_sim")
    p.add_argument(
        "--random", choices=sorted(_RANDOM_CHOICES), default="intercept", dest="random"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qfreg",
        description="Multilevel function-on-scalar regression for quantile-function responses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantiles", help="turn raw readings into per-period quantile functions")
    q.add_argument("--cgm", type=Path, required=True)
    q.add_argument("--days-per-period", type=float, default=None)
    _add_common(q)

    f = sub.add_parser("fit", help="fit the model and write coefficients, bands, predictions")
    f.add_argument("--cgm", type=Path, required=True)
    f.add_argument("--covariates", type=Path, required=True)
    f.add_argument("--formula", type=str, default="~ 1")
    f.add_argument("--response", choices=["quantile", "mean"], default="quantile")
    f.add_argument("--days-per-period", type=float, default=None)
    _add_common(f)
    _add_inference(f)

    s = sub.add_parser("simulate", help="Monte Carlo error study on a synthetic scenario")
    s.add_argument("--scenario", type=int, default=1)
    s.add_argument("--n", type=int, default=300)
    s.add_argument("--J", type=int, default=5)
    s.add_argument("--rho", type=float, default=0.0)
    s.add_argument("--L", type=int, default=1)
    s.add_argument("--reps", type=int, default=200)
    _add_common(s)

    c = sub.add_parser("coverage", help="confidence-band coverage study")
    c.add_argument("--scenario", type=int, default=1)
    c.add_argument("--n", type=int, default=300)
    c.add_argument("--J", type=int, default=5)
    c.add_argument("--rho", type=float, default=0.0)
    c.add_argument("--L", type=int, default=1)
    c.add_argument("--reps", type=int, default=100)
    _add_common(c)
    _add_inference(c)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(command=args.command, out=args.out)
    for name in vars(cfg):
        if hasattr(args, name):
            setattr(cfg, name, getattr(args, name))
    if hasattr(args, "random"):
        cfg.random_spec = _RANDOM_CHOICES[args.random]
    cfg.validate()
    return cfg


def _scenario_config(cfg: RunConfig) -> ScenarioConfig:
    return ScenarioConfig(
        scenario=cfg.scenario,
        n=cfg.n,
        J=cfg.J,
        rho=cfg.rho,
        L=cfg.L,
        m=cfg.grid_size,
        replicates=cfg.reps,
        seed=cfg.seed,
        random_spec=cfg.random_spec,
        smoother=SmootherSpec(kind=cfg.smoother),
        n_boot=cfg.n_boot,
        alpha=cfg.alpha,
        pve=cfg.pve,
        n_sim=cfg.n_sim,
        workers=cfg.workers,
    )


def _options_echo(cfg: RunConfig) -> dict:
    opts = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(cfg).items()}
    return opts


def run_quantiles(cfg: RunConfig) -> list[Path]:
    cells = load_cgm_csv(cfg.cgm, days_per_period=cfg.days_per_period)
    grid = build_grid(cfg.grid_size)
    out = cfg.out / "quantiles.csv"
    write_quantiles_csv(out, cells, grid)
    meta = run_metadata(
        "quantiles",
        _options_echo(cfg),
    )
    meta["cells"] = {f"{s}|{p}": int(v.size) for (s, p), v in cells.items()}
    mpath = cfg.out / "meta.json"
    import json

    mpath.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [out, mpath]


def run_fit(cfg: RunConfig) -> list[Path]:
    t0 = time.perf_counter()
    cells = load_cgm_csv(cfg.cgm, days_per_period=cfg.days_per_period)
    design, names = load_covariates_csv(cfg.covariates, cfg.formula)
    grid = build_grid(cfg.grid_size)
    scalar = cfg.response == "mean"
    data = assemble_dataset(cells, design, names, grid, scalar=scalar)
    written: list[Path] = []
    import json

    if scalar:
        result = fit_scalar_multilevel(data, random_spec=cfg.random_spec)
        import pandas as pd

        se = np.sqrt(np.diag(result.fit.vcov_beta))
        coef = pd.DataFrame(
            {"coefficient": list(names), "beta": result.fit.beta, "se": se}
        )
        path = cfg.out / "coefficients.csv"
        coef.to_csv(path, index=False)
        written.append(path)
        meta = run_metadata("fit", _options_echo(cfg), runtime_seconds=time.perf_counter() - t0)
        meta["r2_marginal"] = result.r2_marginal
        meta["r2_conditional"] = result.r2_conditional
        meta["seed"] = cfg.seed
        mpath = cfg.out / "meta.json"
        mpath.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        written.append(mpath)
        return written

    fit = fit_pointwise(data, random_spec=cfg.random_spec, keep_blups=True)
    fit = smooth_coefficients(fit, SmootherSpec(kind=cfg.smoother))
    bands = bootstrap_bands(
        data,
        fit,
        n_boot=cfg.n_boot,
        alpha=cfg.alpha,
        pve=cfg.pve,
        n_sim=cfg.n_sim,
        seed=cfg.seed,
        workers=cfg.workers,
    )
    predictions = predict_subject_quantiles(data, fit, include_random=True)
    written = write_fit_outputs(cfg.out, fit, bands, predictions, data)
    meta = run_metadata("fit", _options_echo(cfg), runtime_seconds=time.perf_counter() - t0)
    meta["seed"] = cfg.seed
    mpath = cfg.out / "meta.json"
    mpath.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(mpath)
    return written


def run_simulate(cfg: RunConfig) -> list[Path]:
    report = mse_study(_scenario_config(cfg))
    meta = run_metadata("simulate", _options_echo(cfg), runtime_seconds=report.runtime_seconds)
    return write_report(cfg.out, report, meta)


def run_coverage(cfg: RunConfig) -> list[Path]:
    report = coverage_study(_scenario_config(cfg))
    meta = run_metadata("coverage", _options_echo(cfg), runtime_seconds=report.runtime_seconds)
    return write_report(cfg.out, report, meta)


_RUNNERS = {
    "quantiles": run_quantiles,
    "fit": run_fit,
    "simulate": run_simulate,
    "coverage": run_coverage,
}


# Files each command may write; removed if the run fails partway so no
# partial outputs are left behind.
_OUTPUT_FILES = (
    "quantiles.csv",
    "coefficients.csv",
    "varcomps.csv",
    "predictions.csv",
    "report.json",
    "curves.csv",
    "meta.json",
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    cfg.out.mkdir(parents=True, exist_ok=True)
    try:
        _RUNNERS[cfg.command](cfg)
    except (SchemaError, RankDeficiencyError, ValueError, OSError) as err:
        for name in _OUTPUT_FILES:
            try:
                (cfg.out / name).unlink(missing_ok=True)
            except OSError:
                pass
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
