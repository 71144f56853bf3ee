"""Command-line interface: ``strdecomp {decompose,forecast,simulate}``.

Exit status 0 on success, 2 for configuration errors, 3 for data errors and
4 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import AUTO, ConfigError, DataError, RunConfig, load_config
from .cv import CvConfig, FoldError, SaturationError, optimize_lambdas, write_trace
from .estimator import (
    ConvergenceError,
    ar1_covariance,
    confidence_intervals,
    fit_gls,
    fit_ols,
    fit_robust,
    forecast,
)
from .model import CovariateSpec, IdentifiabilityError, ModelSpec, SeasonalSpec, TimeSeriesData, assemble
from .simgen import COMPONENTS, SimConfig, default_model, rmse_experiment, write_rmse_csv
from .sparsemat import RankDeficiencyError
from .topology import make_graph

log = logging.getLogger("strdecomp")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
NUMERIC_ERRORS = (
    RankDeficiencyError,
    IdentifiabilityError,
    SaturationError,
    FoldError,
    ConvergenceError,
    np.linalg.LinAlgError,
    RuntimeError,
)


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else repr(v)


# ---------------------------------------------------------------------------
# input


def read_table(path: Path) -> dict[str, list[str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read input {path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise DataError(f"input {path} is not UTF-8 text") from None
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise DataError(f"input {path} has no header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"input {path} has duplicate column names")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataError(f"input row {i + 2} has {len(r)} cells, header has {len(header)}")
    return {h: [r[j].strip() for r in body] for j, h in enumerate(header)}


def _column(table, name, *, allow_blank: bool, what: str) -> np.ndarray:
    if name not in table:
        raise DataError(f"{what} column {name!r} not found; columns are {list(table)}")
    out = np.empty(len(table[name]))
    for i, cell in enumerate(table[name]):
        if cell == "":
            if not allow_blank:
                raise DataError(f"{what} column {name!r} is blank in data row {i + 1}")
            out[i] = np.nan
            continue
        try:
            out[i] = float(cell)
        except ValueError:
            raise DataError(f"{what} column {name!r} has non-numeric value {cell!r} in data row {i + 1}") from None
        if not math.isfinite(out[i]):
            raise DataError(f"{what} column {name!r} has non-finite value in data row {i + 1}")
    return out


def _extend_times(times: list[str], h: int) -> list[str]:
    if h == 0:
        return list(times)
    try:
        t = np.array([float(x) for x in times])
        step = np.diff(t)
        if len(t) >= 2 and np.allclose(step, step[0]):
            return list(times) + [repr(float(t[-1] + step[0] * (k + 1))) for k in range(h)]
    except ValueError:
        pass
    try:
        t = np.array(times, dtype="datetime64")
        step = np.diff(t)
        if len(t) >= 2 and np.all(step == step[0]):
            return list(times) + [str(t[-1] + step[0] * (k + 1)) for k in range(h)]
    except ValueError:
        pass
    return list(times) + [""] * h


def build_spec(cfg: RunConfig, table, n_total: int) -> tuple[ModelSpec, list[str]]:
    """Model specification with ``auto`` entries set to 1, and the names of those entries."""
    free = []

    def val(v, name):
        if v == AUTO:
            free.append(name)
            return 1.0
        return float(v)

    seasonals = []
    for s in cfg.seasonal:
        lam = tuple(val(v, f"{s.name}.{lab}") for v, lab in zip(s.lambdas, ("tt", "st", "ss")))
        if s.cycle is not None:
            seasonals.append(SeasonalSpec.cycle(s.cycle, lam, phase=s.phase, name=s.name))
        else:
            try:
                topo = make_graph(s.successors, s.labels)
            except ValueError as exc:
                raise ConfigError(f"seasonal {s.name!r}: {exc}") from None
            nodes = _column(table, s.map_column, allow_blank=False, what="season map")[:n_total]
            if np.any(nodes != np.round(nodes)):
                raise DataError(f"season map column {s.map_column!r} must hold integer node ids")
            try:
                seasonals.append(SeasonalSpec(topo, lam, season_map=nodes.astype(np.int64), name=s.name))
            except ValueError as exc:
                raise DataError(f"seasonal {s.name!r}: {exc}") from None
    trend = val(cfg.trend, "trend")
    names = [s.name for s in cfg.seasonal]
    covs = []
    for c in cfg.covariates:
        labels = {"static": (), "flexible": ("tt",), "seasonal": ("tt", "st", "ss")}[c.kind]
        th = tuple(val(v, f"{c.name}.{lab}") for v, lab in zip(c.thetas, labels))
        values = _column(table, c.column, allow_blank=False, what="covariate")[:n_total]
        ref = names.index(c.season) if c.kind == "seasonal" else None
        covs.append(CovariateSpec(c.kind, values, th, ref, name=c.name))
    try:
        spec = ModelSpec(trend, seasonals, covs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec, free


def _load_series(cfg: RunConfig, horizon: int = 0):
    if cfg.input is None:
        raise ConfigError("input is required")
    table = read_table(cfg.input)
    n_rows = len(next(iter(table.values()))) if table else 0
    y = _column(table, cfg.value_column, allow_blank=True, what="value")
    needs_future = bool(cfg.covariates) or any(s.map_column for s in cfg.seasonal)
    if horizon and needs_future:
        # the last `horizon` rows carry future covariates; their values must be blank
        if n_rows <= horizon:
            raise DataError(f"input has {n_rows} rows; covariates for a {horizon}-step forecast need more")
        if not np.all(np.isnan(y[-horizon:])):
            raise DataError(f"the last {horizon} value cells must be blank: they are the forecast period")
        y = y[:-horizon]
    n = len(y)
    if n < 3:
        raise DataError(f"need at least 3 rows of data, got {n}")
    if np.all(np.isnan(y)):
        raise DataError("the value column has no observations")
    if cfg.log:
        obs = y[~np.isnan(y)]
        if np.any(obs <= 0):
            raise DataError("log transform needs positive values")
        y = np.log(y)
    if needs_future and n_rows - n not in (0, horizon):
        raise DataError(f"input has {n_rows} rows, expected {n} or {n + horizon}")
    if cfg.time_column and cfg.time_column not in table:
        raise DataError(f"time column {cfg.time_column!r} not found")
    times = table[cfg.time_column] if cfg.time_column else [str(i) for i in range(n_rows)]
    return table, TimeSeriesData(y), list(times[:n])


# ---------------------------------------------------------------------------
# runs


def cv_config(settings: dict, free) -> CvConfig:
    """Search settings from the ``cv`` section for the parameters in ``free``."""
    starts = settings.get("starts", [settings.get("start", {})])
    for st in starts:
        unknown = set(st) - set(free)
        if unknown:
            raise ConfigError(f"cv start values name parameters that are not searched: {sorted(unknown)}")
    return CvConfig(
        mode=settings.get("mode", "loocv"),
        K=settings.get("K", 5),
        g=settings.get("g", 1),
        max_evals=settings.get("max_evals", 200),
        tol=settings.get("tol", 1e-6),
        step=settings.get("step", 1.0),
        free=list(free),
        starts=[[math.log(st.get(name, 1.0)) for name in free] for st in starts],
    )


def _select(cfg: RunConfig, spec: ModelSpec, free, data, outdir: Path):
    if not free:
        return spec, None
    search = optimize_lambdas(spec, data, cv_config(cfg.cv, free))
    write_trace(search, outdir / "cv_trace.csv")
    log.info("cv score %.10g after %d evaluations", search.score, len(search.trace))
    return search.spec, search


def _write_lambdas(path: Path, spec: ModelSpec, free, search) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "value", "source"])
        for name, v in zip(spec.lambda_names(), spec.lambda_vector()):
            w.writerow([name, repr(float(v)), "cv" if name in free else "fixed"])
        if search is not None:
            w.writerow(["cv_score", repr(float(search.score)), _search_note(search)])


def _search_note(search) -> str:
    return f"{len(search.trace)} evaluations" + ("" if search.converged else ", budget exhausted")


def write_components(path: Path, times, observed, fit, intervals) -> list[str]:
    table = fit.components.table()
    parts = [k for k in table if k != "remainder"]
    header = ["time", "observed"] + list(table) + [f"{p}_{b}" for p in parts for b in ("lower", "upper")]
    cols = [observed] + [table[k] for k in table]
    for p in parts:
        lo, hi = intervals[p] if intervals else (None, None)
        cols += [lo, hi]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, t in enumerate(times):
            w.writerow([t] + [_fmt(c[i]) if c is not None else "" for c in cols])
    return header


def _fit(cfg: RunConfig, spec: ModelSpec, data: TimeSeriesData):
    ds = assemble(spec, data)
    if cfg.fit == "robust":
        return fit_robust(ds)
    if cfg.fit == "gls":
        return fit_gls(ds, ar1_covariance(data.n, cfg.gls["ar1"], cfg.gls["variance"]))
    return fit_ols(ds)


def run_decompose(cfg: RunConfig, outdir: Path) -> int:
    table, data, times = _load_series(cfg)
    spec, free = build_spec(cfg, table, data.n)
    spec, search = _select(cfg, spec, free, data, outdir)
    fit = _fit(cfg, spec, data)
    intervals = confidence_intervals(fit, cfg.level) if fit.fit_kind != "robust" else None
    write_components(outdir / "components.csv", times, data.y, fit, intervals)
    _write_lambdas(outdir / "lambdas.csv", spec, free, search)
    from .plot import decomposition_svg

    decomposition_svg(outdir / "decomposition.svg", times, data.y, fit, intervals)
    print(f"decomposed {data.n} points (sigma_R = {fit.sigma_R:.6g}); results in {outdir}")
    return 0


def run_forecast(cfg: RunConfig, outdir: Path) -> int:
    if cfg.horizon is None:
        raise ConfigError("forecast needs horizon")
    if cfg.fit != "ols":
        raise ConfigError("forecast supports fit: ols only")
    h = cfg.horizon
    table, data, times = _load_series(cfg, h)
    n_total = data.n + h
    spec, free = build_spec(cfg, table, n_total)
    fit_spec = _truncate(spec, data.n)
    fit_spec, search = _select(cfg, fit_spec, free, data, outdir)
    full = spec.with_lambdas(fit_spec.lambda_vector())
    res = forecast(full, data, h, level=cfg.level)
    ext_times = _extend_times(times, h)
    observed = np.r_[data.y, np.full(h, np.nan)]
    intervals = confidence_intervals(res, cfg.level)
    write_components(outdir / "components.csv", ext_times, observed, res, intervals)
    _write_lambdas(outdir / "lambdas.csv", full, free, search)
    fc = res.forecast
    with open(outdir / "forecast.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "mean", "sd", "lower", "upper"])
        for i in range(h):
            w.writerow([ext_times[data.n + i], _fmt(fc.mean[i]), _fmt(fc.sd[i]), _fmt(fc.lower[i]), _fmt(fc.upper[i])])
    from .plot import decomposition_svg

    x = np.arange(data.n, data.n + h, dtype=float)
    decomposition_svg(outdir / "decomposition.svg", None, observed, res, intervals, forecast=(x, fc.lower, fc.upper))
    print(f"forecast {h} steps from {data.n} points; results in {outdir}")
    return 0


def _truncate(spec: ModelSpec, n: int) -> ModelSpec:
    seas = []
    for s in spec.seasonals:
        if s.season_map is not None and len(s.season_map) > n:
            s = SeasonalSpec(s.topology, s.lambdas, season_map=s.season_map[:n], name=s.name)
        seas.append(s)
    return ModelSpec(spec.trend_lambda, seas, spec.extended(n).covariates)


def run_simulate(cfg: RunConfig, outdir: Path, seed: int | None = None) -> int:
    if cfg.simulate is None:
        raise ConfigError("simulate needs a simulate section")
    sim = cfg.simulate
    model = default_model()
    cv = cv_config(cfg.cv or {}, model.lambda_names())
    results = []
    reps_path = outdir / "replications.csv"
    with open(reps_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dgp", "gamma", "replication"] + list(COMPONENTS) + ["cv_score", "evaluations"])
        for dgp in sim["dgp"]:
            for gamma in sim["gamma"]:
                sc = SimConfig(
                    dgp, sim["n"], sim["alpha"], sim["beta"], gamma, sim["replications"],
                    sim["seed"] if seed is None else seed,
                )

                def progress(r, rep, search, dgp=dgp, gamma=gamma):
                    w.writerow(
                        [dgp, repr(float(gamma)), r]
                        + [f"{rep[c]:.10g}" for c in COMPONENTS]
                        + [f"{search.score:.10g}", len(search.trace)]
                    )
                    fh.flush()
                    log.info("%s gamma=%g replication %d done", dgp, gamma, r)

                results.append(rmse_experiment(sc, model, cv, progress=progress))
    write_rmse_csv(results, outdir / "rmse.csv")
    print(f"wrote {outdir / 'rmse.csv'}")
    return 0


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strdecomp", description="Seasonal-trend decomposition by regularized regression")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("decompose", "decompose a series into trend, seasonal, covariate and remainder parts"),
        ("forecast", "decompose and extend the series beyond its end"),
        ("simulate", "run the simulation study on synthetic series"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("-c", "--config", required=True, help="YAML run configuration")
        s.add_argument("-o", "--output", default=".", help="output directory (created if missing)")
        s.add_argument("--seed", type=int, default=None, help="override the simulation seed")
        s.add_argument("--threads", type=int, default=None, help="limit numerical library threads")
        s.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        cfg = load_config(args.config)
        outdir = Path(args.output)
        outdir.mkdir(parents=True, exist_ok=True)
        if args.command == "decompose":
            return run_decompose(cfg, outdir)
        if args.command == "forecast":
            return run_forecast(cfg, outdir)
        return run_simulate(cfg, outdir, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numerical error: {str(exc).splitlines()[0]}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
