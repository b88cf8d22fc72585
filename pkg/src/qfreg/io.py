"""CSV ingestion, dataset assembly, and output serialization.

Input schemas (headers are exact):
  cgm.csv        subject_id,period,glucose   (or subject_id,timestamp,glucose
                 plus a days-per-period rule)
  covariates.csv subject_id[,period],<free columns>

Reals are serialized in shortest round-trip decimal form, so writing and
re-reading any output reproduces the values exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .inference import BootstrapBands, FunctionalFit, LongitudinalDataset
from .quantiles import ProbabilityGrid, QuantileFunction, empirical_quantile
from .simulate import ScenarioConfig, SimulationReport
from .smoothing import SmootherSpec

FORMAT_VERSION = 1


class SchemaError(ValueError):
    """Input file does not match the expected schema."""

    def __init__(self, message: str, file=None, row=None, column=None):
        parts = []
        if file is not None:
            parts.append(f"file {file}")
        if row is not None:
            parts.append(f"row {row}")
        if column is not None:
            parts.append(f"column {column!r}")
        where = f" ({', '.join(parts)})" if parts else ""
        super().__init__(message + where)
        self.file, self.row, self.column = file, row, column


def load_cgm_csv(path, days_per_period: Optional[float] = None) -> dict[tuple, np.ndarray]:
    """Group glucose readings into per-(subject, period) sample vectors.

    A ``period`` column is used as given; otherwise a ``timestamp`` column
    plus ``days_per_period`` assigns periods by elapsed days since each
    subject's first reading. Blank glucose entries are dropped (a cell
    left empty is dropped with a warning); non-numeric entries are an
    error naming the row.
    """
    path = Path(path)
    df = pd.read_csv(path)
    if "subject_id" not in df.columns:
        raise SchemaError("missing required column", file=path.name, column="subject_id")
    if "glucose" not in df.columns:
        raise SchemaError("missing required column", file=path.name, column="glucose")
    if "period" in df.columns:
        periods = df["period"].to_numpy()
    elif "timestamp" in df.columns and days_per_period:
        ts = pd.to_datetime(df["timestamp"], errors="coerce")
        if ts.isna().any():
            bad = int(np.argmax(ts.isna().to_numpy()))
            raise SchemaError("unparseable timestamp", file=path.name, row=bad + 2, column="timestamp")
        start = ts.groupby(df["subject_id"]).transform("min")
        elapsed_days = (ts - start).dt.total_seconds() / 86400.0
        periods = (elapsed_days // days_per_period).astype(int).to_numpy() + 1
    else:
        raise SchemaError(
            "need a 'period' column, or a 'timestamp' column with --days-per-period",
            file=path.name,
            column="period",
        )

    glucose = pd.to_numeric(df["glucose"], errors="coerce").to_numpy(dtype=float)
    raw_blank = df["glucose"].isna().to_numpy()
    bad = np.isnan(glucose) & ~raw_blank
    if bad.any():
        row = int(np.argmax(bad))
        raise SchemaError(
            f"non-numeric glucose value {df['glucose'].iloc[row]!r}",
            file=path.name,
            row=row + 2,  # 1-based, counting the header line
            column="glucose",
        )

    cells: dict[tuple, np.ndarray] = {}
    keep = ~np.isnan(glucose)
    frame = pd.DataFrame(
        {"subject_id": df["subject_id"].to_numpy(), "period": periods, "glucose": glucose}
    )
    for (subject, period), chunk in frame.groupby(["subject_id", "period"], sort=True):
        vals = chunk["glucose"].to_numpy()
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            warnings.warn(
                f"dropping empty cell (subject {subject!r}, period {period!r})", stacklevel=2
            )
            continue
        cells[(subject, period)] = vals
    if not cells:
        raise SchemaError("no usable (subject, period) cells", file=path.name)
    return cells


def parse_formula(formula: str) -> list[str]:
    """Right-hand-side terms of 'response ~ a + b'; '~ 1' means none."""
    rhs = formula.split("~")[-1]
    terms = [t.strip() for t in rhs.split("+")]
    terms = [t for t in terms if t and t != "1"]
    return terms


def load_covariates_csv(path, formula: str) -> tuple[pd.DataFrame, list[str]]:
    """Fixed-effects design per subject (or per subject-period).

    Returns a frame keyed by subject_id (and period when present) whose
    remaining columns are the design: an intercept, numeric terms passed
    through, and categorical terms expanded to reference-coded indicators
    (first level alphabetically is the reference).
    """
    path = Path(path)
    df = pd.read_csv(path)
    if "subject_id" not in df.columns:
        raise SchemaError("missing required column", file=path.name, column="subject_id")
    terms = parse_formula(formula)
    for term in terms:
        if term not in df.columns:
            raise SchemaError("unknown formula term", file=path.name, column=term)
    keys = ["subject_id"] + (["period"] if "period" in df.columns else [])
    out = df[keys].copy()
    names = ["intercept"]
    out["intercept"] = 1.0
    for term in terms:
        col = df[term]
        as_num = pd.to_numeric(col, errors="coerce")
        if as_num.notna().all():
            out[term] = as_num.astype(float)
            names.append(term)
        else:
            levels = sorted(col.astype(str).unique())
            for level in levels[1:]:  # first level is the reference
                name = f"{term}={level}"
                out[name] = (col.astype(str) == level).astype(float)
                names.append(name)
    return out, names


def assemble_dataset(
    cells: dict[tuple, np.ndarray],
    covariates: pd.DataFrame,
    design_names: list[str],
    grid: Optional[ProbabilityGrid],
    scalar: bool = False,
) -> LongitudinalDataset:
    """Join CGM cells with covariate rows into a model-ready dataset.

    Responses are empirical quantile functions on ``grid`` (or per-cell
    sample means when ``scalar``). Subjects without covariates are dropped
    with a warning.
    """
    by_period = "period" in covariates.columns
    key_cols = ["subject_id", "period"] if by_period else ["subject_id"]
    lookup = covariates.set_index(key_cols)
    subjects, periods, rows, resp = [], [], [], []
    dropped = set()
    for (subject, period), samples in cells.items():
        key = (subject, period) if by_period else subject
        try:
            row = lookup.loc[key]
        except KeyError:
            dropped.add(subject)
            continue
        if isinstance(row, pd.DataFrame):
            row = row.iloc[0]
        subjects.append(subject)
        periods.append(period)
        rows.append(row[design_names].to_numpy(dtype=float))
        if scalar:
            resp.append(float(np.mean(samples)))
        else:
            resp.append(empirical_quantile(samples, grid).values)
    if dropped:
        warnings.warn(
            f"dropping {len(dropped)} subject(s) without covariates: "
            f"{sorted(map(str, dropped))[:5]}...",
            stacklevel=2,
        )
    if not subjects:
        raise SchemaError("no records left after joining CGM cells with covariates")
    periods_arr = np.asarray(periods, dtype=float)
    return LongitudinalDataset(
        subjects=np.asarray(subjects),
        visits=periods_arr,
        X=np.vstack(rows),
        responses=np.asarray(resp) if scalar else np.vstack(resp),
        grid=None if scalar else grid,
        covariate_names=tuple(design_names),
    )


def _df_to_csv(df: pd.DataFrame, path: Path):
    df.to_csv(path, index=False)


def write_quantiles_csv(path, cells: dict[tuple, np.ndarray], grid: ProbabilityGrid):
    records = []
    for (subject, period), samples in cells.items():
        q = empirical_quantile(samples, grid)
        for p, v in zip(grid.points, q.values):
            records.append((subject, period, p, v))
    _df_to_csv(pd.DataFrame(records, columns=["subject_id", "period", "p", "value"]), Path(path))


def write_fit_outputs(
    outdir: Path,
    fit: FunctionalFit,
    bands: BootstrapBands,
    predictions: list[QuantileFunction],
    data: LongitudinalDataset,
) -> list[Path]:
    """coefficients.csv, varcomps.csv, predictions.csv under outdir."""
    outdir = Path(outdir)
    written = []
    p = fit.grid.points
    rows = []
    for l, name in enumerate(fit.coef_names):
        for j in range(fit.grid.m):
            rows.append(
                (
                    name,
                    p[j],
                    fit.beta_raw[l, j],
                    fit.beta_smooth[l, j],
                    bands.variance[l, j],
                    bands.pointwise_lower[l, j],
                    bands.pointwise_upper[l, j],
                    bands.joint_lower[l, j],
                    bands.joint_upper[l, j],
                    bands.q_joint[l],
                )
            )
    coef = pd.DataFrame(
        rows,
        columns=[
            "coefficient",
            "p",
            "beta_raw",
            "beta_smooth",
            "v",
            "pointwise_lo",
            "pointwise_hi",
            "joint_lo",
            "joint_hi",
            "q_joint",
        ],
    )
    path = outdir / "coefficients.csv"
    _df_to_csv(coef, path)
    written.append(path)

    K = fit.varcomps[0].G.shape[0]
    vrows = []
    for j, vc in enumerate(fit.varcomps):
        entry = [p[j]]
        for a in range(K):
            for b in range(a, K):
                entry.append(vc.G[a, b])
        entry.extend([vc.sigma2, bool(fit.converged[j])])
        vrows.append(entry)
    g_names = [f"g{a + 1}{b + 1}" for a in range(K) for b in range(a, K)]
    varcomps = pd.DataFrame(vrows, columns=["p"] + g_names + ["sigma2", "converged"])
    path = outdir / "varcomps.csv"
    _df_to_csv(varcomps, path)
    written.append(path)

    prows = []
    for r in range(data.n_records):
        subj, per = data.subjects[r], data.visits[r]
        for j in range(fit.grid.m):
            prows.append((subj, per, p[j], predictions[r].values[j]))
    preds = pd.DataFrame(prows, columns=["subject", "period", "p", "predicted"])
    path = outdir / "predictions.csv"
    _df_to_csv(preds, path)
    written.append(path)
    return written


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, SmootherSpec):
        return asdict(value)
    return value


def report_payload(report: SimulationReport) -> dict:
    """Deterministic JSON payload of a study report (no runtime)."""
    cfg = asdict(report.config)
    cfg["smoother"] = _jsonable(report.config.smoother)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "mu": _jsonable(report.mu),
        "sigma": _jsonable(report.sigma),
        "bias_sq": _jsonable(report.bias_sq),
        "coverage_joint": _jsonable(report.coverage_joint),
        "coverage_pointwise": _jsonable(report.coverage_pointwise),
        "mse_values": _jsonable(report.mse_values),
        "joint_hits": _jsonable(report.joint_hits),
        "pointwise_fractions": _jsonable(report.pointwise_fractions),
    }
    return payload


def write_report(outdir: Path, report: SimulationReport, meta: dict) -> list[Path]:
    """report.json (+ curves.csv for error-curve studies) and meta.json."""
    outdir = Path(outdir)
    written = []
    path = outdir / "report.json"
    path.write_text(json.dumps(report_payload(report), indent=2, sort_keys=True) + "\n")
    written.append(path)
    if report.mse_curves is not None:
        grid = report.config.grid()
        curves = pd.DataFrame(
            {
                "p": grid.points,
                "mu": np.atleast_1d(report.mu),
                "sigma": np.atleast_1d(report.sigma),
            }
        )
        cpath = outdir / "curves.csv"
        _df_to_csv(curves, cpath)
        written.append(cpath)
    mpath = outdir / "meta.json"
    mpath.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(mpath)
    return written


def run_metadata(command: str, options: dict, runtime_seconds: Optional[float] = None) -> dict:
    import pandas
    import scipy

    meta = {
        "format_version": FORMAT_VERSION,
        "command": command,
        "options": {k: _jsonable(v) for k, v in options.items()},
        "versions": {
            "qfreg": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pandas.__version__,
        },
    }
    if runtime_seconds is not None:
        meta["runtime_seconds"] = runtime_seconds
    return meta
