"""Cross-validated choice of smoothing parameters."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimator import solve_l2
from .model import ModelSpec, TimeSeriesData, assemble, split_components

log = logging.getLogger(__name__)

__all__ = [
    "SaturationError",
    "FoldError",
    "CvConfig",
    "Evaluation",
    "LambdaSearch",
    "loocv_score",
    "kfold_assign",
    "kfold_score",
    "cv_score",
    "nelder_mead",
    "optimize_lambdas",
    "write_trace",
]

SATURATION_TOL = 1e-8


class SaturationError(ValueError):
    """An observation has leverage numerically equal to one."""


class FoldError(RuntimeError):
    """A K-fold training fit failed."""


@dataclass
class CvConfig:
    """Cross-validation and search settings.

    Parameters
    ----------
    mode : {"loocv", "kfold"}
    K, g : int
        Number of folds and gap length for ``kfold``.
    max_evals : int
        Budget of score evaluations for the simplex search.
    tol : float
        Stop when the simplex score spread is below ``tol * (1 + |best|)``.
    x0 : sequence of float, optional
        Initial log-lambda point (default: all zeros).
    starts : sequence of sequences of float, optional
        Several initial points; one simplex search runs from each (with its
        own ``max_evals`` budget) and the best score wins.  Overrides ``x0``.
    step : float
        Initial simplex edge in log-lambda units.
    free : sequence of str, optional
        Names (see ``ModelSpec.lambda_names``) of the parameters to search;
        default is every positive parameter.  Others stay fixed.
    method : str
        Least-squares route passed to the estimator.
    """

    mode: str = "loocv"
    K: int = 5
    g: int = 1
    max_evals: int = 200
    tol: float = 1e-6
    x0: Sequence[float] | None = None
    starts: Sequence[Sequence[float]] | None = None
    step: float = 1.0
    free: Sequence[str] | None = None
    method: str = "auto"

    def __post_init__(self):
        if self.mode not in ("loocv", "kfold"):
            raise ValueError(f"cv mode must be loocv or kfold, got {self.mode!r}")
        if self.mode == "kfold" and (self.K < 2 or self.g < 1):
            raise ValueError(f"kfold needs K >= 2 and g >= 1, got K={self.K}, g={self.g}")
        if self.max_evals < 1:
            raise ValueError("max_evals must be positive")
        if self.starts is not None and len(self.starts) == 0:
            raise ValueError("starts must hold at least one initial point")


def loocv_score(spec: ModelSpec, data: TimeSeriesData, method: str = "auto") -> float:
    """Sum of squared leave-one-out residuals ``(y_i - yhat_i) / (1 - h_ii)``."""
    ds = assemble(spec, data)
    eng = solve_l2(ds, method)
    lev = eng.leverages()
    resid = eng.residuals()
    bad = np.flatnonzero(lev >= 1.0 - SATURATION_TOL)
    if len(bad):
        t = int(ds.obs_index[bad[0]])
        raise SaturationError(
            f"saturated at observation {t} (leverage {lev[bad[0]]:.12g}); increase the smoothing parameters"
        )
    e = resid / (1.0 - lev)
    return float(np.dot(e, e))


def kfold_assign(n: int, K: int, g: int) -> np.ndarray:
    """Fold of every time index: ``t`` (1-based) is in fold ``i`` iff
    ``(t - 1) mod (K g)`` lies in ``[i g, (i + 1) g - 1]``."""
    if K < 2 or g < 1:
        raise ValueError(f"need K >= 2 and g >= 1, got K={K}, g={g}")
    return (np.arange(n) % (K * g)) // g


def kfold_score(spec: ModelSpec, data: TimeSeriesData, K: int, g: int, method: str = "auto") -> float:
    """Sum of squared prediction errors over held-out folds.

    Each fold is predicted by a fit on the remaining observations, with the
    fold's values treated as missing.
    """
    folds = kfold_assign(data.n, K, g)
    total = 0.0
    for i in range(K):
        held = (folds == i) & data.observed
        if not held.any():
            continue
        try:
            train = data.with_missing(held)
            ds = assemble(spec, train)
            fitted = split_components(ds, solve_l2(ds, method).eta).fitted
        except Exception as exc:
            raise FoldError(f"fit for fold {i} failed: {exc}") from exc
        err = data.y[held] - fitted[held]
        total += float(np.dot(err, err))
    return total


def cv_score(spec: ModelSpec, data: TimeSeriesData, cfg: CvConfig) -> float:
    if cfg.mode == "loocv":
        return loocv_score(spec, data, cfg.method)
    return kfold_score(spec, data, cfg.K, cfg.g, cfg.method)


@dataclass
class Evaluation:
    index: int
    point: np.ndarray
    score: float
    error: str | None = None


@dataclass
class LambdaSearch:
    """Result of a smoothing-parameter search."""

    spec: ModelSpec
    names: list[str]
    log_point: np.ndarray
    score: float
    trace: list[Evaluation] = field(default_factory=list)
    converged: bool = False

    @property
    def lambdas(self) -> dict[str, float]:
        return dict(zip(self.spec.lambda_names(), self.spec.lambda_vector()))


def nelder_mead(f, x0, *, step: float = 1.0, max_evals: int = 200, tol: float = 1e-6):
    """Minimize ``f`` with the Nelder-Mead simplex method.

    Reflection 1, expansion 2, contraction 0.5, shrink 0.5.  Stops when the
    spread of simplex values falls below ``tol * (1 + |best|)`` or after
    ``max_evals`` evaluations.  Non-finite values count as failures and
    compare worse than any finite value.

    Returns ``(best_x, best_f, converged)`` over every point evaluated.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    evals = 0
    best = [x0.copy(), math.inf]

    def F(x):
        nonlocal evals
        evals += 1
        v = f(x)
        v = v if np.isfinite(v) else math.inf
        if v < best[1]:
            best[0], best[1] = x.copy(), v
        return v

    pts = [x0.copy()] + [x0 + step * np.eye(d)[i] for i in range(d)]
    vals = []
    for p in pts:
        if evals >= max_evals:
            break
        vals.append(F(p))
    pts = pts[: len(vals)]
    converged = False
    while len(vals) == d + 1 and evals < max_evals:
        order = np.argsort(vals, kind="stable")
        pts = [pts[i] for i in order]
        vals = [vals[i] for i in order]
        if vals[-1] - vals[0] < tol * (1.0 + abs(vals[0])):
            converged = True
            break
        c = np.mean(pts[:-1], axis=0)
        worst, fw = pts[-1], vals[-1]
        xr = c + (c - worst)
        fr = F(xr)
        if vals[0] <= fr < vals[-2]:
            pts[-1], vals[-1] = xr, fr
            continue
        if fr < vals[0]:
            if evals >= max_evals:
                pts[-1], vals[-1] = xr, fr
                break
            xe = c + 2.0 * (c - worst)
            fe = F(xe)
            pts[-1], vals[-1] = (xe, fe) if fe < fr else (xr, fr)
            continue
        if evals >= max_evals:
            break
        if fr < fw:
            xc = c + 0.5 * (xr - c)
            fc = F(xc)
            if fc <= fr:
                pts[-1], vals[-1] = xc, fc
                continue
        else:
            xc = c + 0.5 * (worst - c)
            fc = F(xc)
            if fc < fw:
                pts[-1], vals[-1] = xc, fc
                continue
        for i in range(1, d + 1):
            if evals >= max_evals:
                break
            pts[i] = pts[0] + 0.5 * (pts[i] - pts[0])
            vals[i] = F(pts[i])
    return best[0], best[1], converged


def optimize_lambdas(spec: ModelSpec, data: TimeSeriesData, cfg: CvConfig | None = None) -> LambdaSearch:
    """Search log-lambda space for the smallest cross-validation score.

    Returns the best point visited together with the full evaluation trace.
    """
    cfg = cfg or CvConfig()
    names = spec.lambda_names()
    base = np.asarray(spec.lambda_vector(), dtype=float)
    if cfg.free is None:
        free = [i for i, v in enumerate(base) if v > 0]
    else:
        unknown = set(cfg.free) - set(names)
        if unknown:
            raise ValueError(f"unknown smoothing parameters {sorted(unknown)}; known: {names}")
        free = [names.index(nm) for nm in cfg.free]
    if not free:
        raise ValueError("no free smoothing parameter to optimize")
    free_names = [names[i] for i in free]
    if cfg.starts is not None:
        starts = [np.asarray(x, dtype=float) for x in cfg.starts]
    else:
        starts = [np.zeros(len(free)) if cfg.x0 is None else np.asarray(cfg.x0, dtype=float)]
    for x0 in starts:
        if x0.shape != (len(free),) or not np.all(np.isfinite(x0)):
            raise ValueError(f"initial point must hold {len(free)} finite log-values")

    def make(x):
        v = base.copy()
        v[free] = np.exp(x)
        return spec.with_lambdas(v)

    trace: list[Evaluation] = []

    def score(x):
        try:
            s = cv_score(make(x), data, cfg)
            trace.append(Evaluation(len(trace), x.copy(), s))
        except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.debug("evaluation at %s failed: %s", x, exc)
            trace.append(Evaluation(len(trace), x.copy(), math.inf, str(exc)))
            return math.inf
        log.debug("cv %s -> %.10g", np.round(x, 4), s)
        return s

    x, s, converged = starts[0], math.inf, False
    for x0 in starts:
        xi, si, ci = nelder_mead(score, x0, step=cfg.step, max_evals=cfg.max_evals, tol=cfg.tol)
        if si < s:
            x, s, converged = xi, si, ci
    if not np.isfinite(s):
        msg = trace[-1].error if trace else "no evaluation"
        raise RuntimeError(f"every cross-validation evaluation failed (last: {msg})")
    return LambdaSearch(make(x), free_names, x, s, trace, converged)


def write_trace(result: LambdaSearch, path) -> None:
    """Evaluation trace as CSV: index, one log-lambda column per free parameter, score."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["evaluation"] + [f"log_{nm}" for nm in result.names] + ["score"])
        for ev in result.trace:
            w.writerow([ev.index] + [repr(float(v)) for v in ev.point] + [repr(float(ev.score))])
