"""Synthetic daily series with weekly and yearly seasonality, and the RMSE study.

``y_t = T_t + alpha * S^W_t + beta * S^Y_t + gamma * R_t`` with every
component except ``R`` normalized to mean 0 and variance 1 (``ddof=1``).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .cv import CvConfig, optimize_lambdas
from .estimator import fit_ols
from .model import ModelSpec, SeasonalSpec, TimeSeriesData, assemble

log = logging.getLogger(__name__)

__all__ = [
    "SimConfig",
    "SimInstance",
    "RmseResult",
    "normalize",
    "gen_deterministic",
    "gen_stochastic",
    "generate",
    "default_model",
    "rmse_experiment",
    "write_rmse_csv",
]

WEEK = 7
YEAR = 365
COMPONENTS = ("trend", "weekly", "yearly", "remainder")
_DGP_CODE = {"deterministic": 1, "stochastic": 2}


@dataclass
class SimConfig:
    dgp: str = "stochastic"
    n: int = 1096
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.2
    replications: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.dgp not in _DGP_CODE:
            raise ValueError(f"dgp must be deterministic or stochastic, got {self.dgp!r}")
        if self.n < 14:
            raise ValueError(f"series length must be at least 14, got {self.n}")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")


@dataclass
class SimInstance:
    """One simulated series; ``truth`` holds the unweighted components."""

    y: np.ndarray
    trend: np.ndarray
    weekly: np.ndarray
    yearly: np.ndarray
    remainder: np.ndarray
    alpha: float
    beta: float
    gamma: float

    @property
    def truth(self) -> dict[str, np.ndarray]:
        """Components as they enter ``y``."""
        return {
            "trend": self.trend,
            "weekly": self.alpha * self.weekly,
            "yearly": self.beta * self.yearly,
            "remainder": self.gamma * self.remainder,
        }


def normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    c = x - x.mean()
    return c / c.std(ddof=1)


def _rng(cfg: SimConfig, replication: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, _DGP_CODE[cfg.dgp], replication]))


def _mix(cfg, T, W, Y, R) -> SimInstance:
    y = T + cfg.alpha * W + cfg.beta * Y + cfg.gamma * R
    return SimInstance(y, T, W, Y, R, cfg.alpha, cfg.beta, cfg.gamma)


def _fourier(rng, period, t, pairs=5):
    k = np.arange(1, pairs + 1)[:, None]
    a, b = rng.standard_normal((2, pairs, 1))
    ang = 2 * np.pi * k * t[None, :] / period
    return normalize((a * np.cos(ang) + b * np.sin(ang)).sum(axis=0))


def gen_deterministic(cfg: SimConfig, rng: np.random.Generator | None = None) -> SimInstance:
    """Quadratic trend with random coefficients, Fourier seasonality (harmonics 1-5)."""
    rng = _rng(cfg) if rng is None else rng
    n = cfg.n
    t = np.arange(1, n + 1, dtype=float)
    n1, n2 = rng.standard_normal(2)
    T = normalize(n1 * (t + n / 2 * (n2 - 1)) ** 2)
    W = _fourier(rng, WEEK, t)
    Y = _fourier(rng, YEAR, t)
    R = rng.standard_normal(n)
    return _mix(cfg, T, W, Y, R)


def _smooth_periodic(rng, period, n):
    # integrate within one period; centring each stage keeps the cumulative sum periodic
    x = normalize(rng.standard_normal(period))
    x = normalize(np.cumsum(x))
    x = normalize(np.cumsum(x))
    reps = -(-n // period)
    return normalize(np.tile(x, reps)[:n])


def gen_stochastic(cfg: SimConfig, rng: np.random.Generator | None = None) -> SimInstance:
    """Twice-integrated noise trend; smooth periodic seasonal components."""
    rng = _rng(cfg) if rng is None else rng
    n = cfg.n
    T = normalize(np.cumsum(np.cumsum(rng.standard_normal(n))))
    W = _smooth_periodic(rng, WEEK, n)
    Y = _smooth_periodic(rng, YEAR, n)
    R = rng.standard_normal(n)
    return _mix(cfg, T, W, Y, R)


def generate(cfg: SimConfig, replication: int = 0) -> SimInstance:
    """Instance for one replication; its random stream depends only on
    ``(seed, dgp, replication)``."""
    rng = _rng(cfg, replication)
    return gen_deterministic(cfg, rng) if cfg.dgp == "deterministic" else gen_stochastic(cfg, rng)


def default_model() -> ModelSpec:
    return ModelSpec(
        1.0,
        [SeasonalSpec.cycle(WEEK, name="weekly"), SeasonalSpec.cycle(YEAR, name="yearly")],
    )


@dataclass
class RmseResult:
    """Pooled RMSE per component plus per-replication details."""

    config: SimConfig
    rmse: dict[str, float]
    per_replication: list[dict[str, float]] = field(default_factory=list)
    lambdas: list[dict[str, float]] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)


def _estimates(fit) -> dict[str, np.ndarray]:
    c = fit.components
    return {
        "trend": c.trend,
        "weekly": c.seasonal["weekly"],
        "yearly": c.seasonal["yearly"],
        "remainder": c.remainder,
    }


def rmse_experiment(
    cfg: SimConfig,
    model: ModelSpec | None = None,
    cv: CvConfig | None = None,
    *,
    progress=None,
) -> RmseResult:
    """Decompose ``cfg.replications`` simulated series with cross-validated
    smoothing parameters and pool the squared component errors.

    ``model`` must name its seasonal components ``weekly`` and ``yearly``.
    """
    model = model or default_model()
    cv = cv or CvConfig()
    sq = {c: 0.0 for c in COMPONENTS}
    count = 0
    out = RmseResult(cfg, {})
    for r in range(cfg.replications):
        inst = generate(cfg, r)
        data = TimeSeriesData(inst.y)
        try:
            search = optimize_lambdas(model, data, cv)
            fit = fit_ols(assemble(search.spec, data), cv.method)
        except Exception as exc:
            raise RuntimeError(f"replication {r} failed: {exc}") from exc
        est = _estimates(fit)
        rep = {}
        for comp, truth in inst.truth.items():
            e = est[comp] - truth
            sq[comp] += float(np.dot(e, e))
            rep[comp] = float(np.sqrt(np.mean(e * e)))
        count += cfg.n
        out.per_replication.append(rep)
        out.lambdas.append(search.lambdas)
        out.scores.append(search.score)
        log.info("replication %d: %s", r, {k: round(v, 5) for k, v in rep.items()})
        if progress is not None:
            progress(r, rep, search)
    out.rmse = {c: float(np.sqrt(sq[c] / count)) for c in COMPONENTS}
    return out


def write_rmse_csv(results, path) -> None:
    """Rows ``dgp, gamma, component, rmse`` for every result."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dgp", "gamma", "component", "rmse"])
        for res in results:
            for comp in COMPONENTS:
                w.writerow([res.config.dgp, repr(float(res.config.gamma)), comp, f"{res.rmse[comp]:.10g}"])
