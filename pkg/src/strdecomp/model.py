"""Model description and assembly of the stacked regression system.

The decomposition ``y = T + sum_i S_i + sum_p phi_p z_p + R`` is estimated
as one least-squares problem ``y_plus ~ X eta``.  The top block of ``X``
maps coefficients to observations; every further block is a smoothness
penalty scaled by its lambda (or theta), with matching zero entries in
``y_plus``.  Coefficients are ordered seasonal surfaces, trend, static
covariates, flexible covariates, seasonal covariates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .sparsemat import from_triplets
from .topology import (
    SeasonTopology,
    build_penalties,
    build_trend_penalty,
    cycle_season_map,
    difference_basis,
    difference_embedding,
    embed,
    make_cycle,
    validate_season_map,
)

log = logging.getLogger(__name__)

__all__ = [
    "IdentifiabilityError",
    "TimeSeriesData",
    "SeasonalSpec",
    "CovariateSpec",
    "ModelSpec",
    "DesignSystem",
    "Components",
    "build_extraction",
    "assemble",
    "split_components",
]


class IdentifiabilityError(ValueError):
    """A component has too many free coefficients for the data."""


@dataclass
class TimeSeriesData:
    """Regularly spaced observations; ``NaN`` marks a missing value."""

    y: np.ndarray
    start: float = 0.0
    step: float = 1.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.y.size < 3:
            raise ValueError(f"need at least 3 time points, got {self.y.size}")
        if np.isinf(self.y).any():
            raise ValueError("observations must be finite or NaN (missing)")
        if not self.observed.any():
            raise ValueError("all observations are missing")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.y)

    @property
    def times(self) -> np.ndarray:
        return self.start + self.step * np.arange(self.n)

    def with_missing(self, mask) -> "TimeSeriesData":
        y = self.y.copy()
        y[np.asarray(mask, dtype=bool)] = np.nan
        return TimeSeriesData(y, self.start, self.step)

    def extended(self, horizon: int) -> "TimeSeriesData":
        return TimeSeriesData(np.r_[self.y, np.full(horizon, np.nan)], self.start, self.step)


@dataclass
class SeasonalSpec:
    """One seasonal surface.

    ``season_map`` gives the node of every time index; it may be omitted for
    cycles, in which case time ``i`` maps to node ``(phase + i) mod m``.
    ``lambdas`` are the time, time-season and season penalty weights.
    """

    topology: SeasonTopology
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    season_map: np.ndarray | None = None
    phase: int = 0
    name: str = ""

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise ValueError(f"seasonal lambdas must be three non-negative numbers, got {self.lambdas}")
        if self.season_map is None and self.topology.kind != "cycle":
            raise ValueError("a graph topology needs an explicit season map")
        if self.season_map is not None:
            self.season_map = validate_season_map(self.topology, self.season_map)
        if not self.name:
            self.name = f"season{self.topology.n_nodes}"

    @classmethod
    def cycle(cls, m: int, lambdas=(1.0, 1.0, 1.0), *, phase: int = 0, name: str = "") -> "SeasonalSpec":
        return cls(make_cycle(m), lambdas, phase=phase, name=name or f"season{m}")

    @property
    def m(self) -> int:
        return self.topology.n_nodes

    def nodes(self, n: int) -> np.ndarray:
        if self.season_map is None:
            return cycle_season_map(self.m, n, self.phase)
        if len(self.season_map) < n:
            raise ValueError(f"season map of {self.name!r} covers {len(self.season_map)} times, need {n}")
        return self.season_map[:n]

    def same_structure(self, other: "SeasonalSpec", n: int) -> bool:
        return self.topology == other.topology and np.array_equal(self.nodes(n), other.nodes(n))


@dataclass
class CovariateSpec:
    """Covariate with a constant (``static``), smoothly varying (``flexible``)
    or seasonally varying (``seasonal``) coefficient."""

    kind: str
    values: np.ndarray
    thetas: tuple[float, ...] = ()
    season_ref: int | None = None
    name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        self.thetas = tuple(float(v) for v in self.thetas)
        want = {"static": 0, "flexible": 1, "seasonal": 3}
        if self.kind not in want:
            raise ValueError(f"covariate kind must be static, flexible or seasonal, got {self.kind!r}")
        if len(self.thetas) != want[self.kind]:
            raise ValueError(f"a {self.kind} covariate takes {want[self.kind]} theta values, got {len(self.thetas)}")
        if any(v < 0 for v in self.thetas):
            raise ValueError("theta values must be non-negative")
        if not np.isfinite(self.values).all():
            raise ValueError(f"covariate {self.name or self.kind!r} has non-finite values")
        if (self.kind == "seasonal") != (self.season_ref is not None):
            raise ValueError("season_ref is required for, and only for, seasonal covariates")


@dataclass
class ModelSpec:
    trend_lambda: float = 1.0
    seasonals: list[SeasonalSpec] = field(default_factory=list)
    covariates: list[CovariateSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.trend_lambda < 0:
            raise ValueError("trend lambda must be non-negative")
        for c in self.covariates:
            if c.kind == "seasonal" and not 0 <= c.season_ref < len(self.seasonals):
                raise ValueError(f"covariate {c.name!r} refers to unknown seasonal component {c.season_ref}")
        names = [s.name for s in self.seasonals] + [c.name for c in self.covariates if c.name]
        if len(set(names)) != len(names):
            raise ValueError(f"component names must be unique: {names}")

    def ordered_covariates(self) -> list[CovariateSpec]:
        order = {"static": 0, "flexible": 1, "seasonal": 2}
        return sorted(self.covariates, key=lambda c: order[c.kind])

    def covariate_names(self) -> list[str]:
        return [c.name or f"{c.kind}{i}" for i, c in enumerate(self.ordered_covariates())]

    # smoothing parameters, in the block order of the design
    def lambda_vector(self) -> list[float]:
        out: list[float] = []
        for s in self.seasonals:
            out += s.lambdas
        out.append(self.trend_lambda)
        for c in self.ordered_covariates():
            out += c.thetas
        return out

    def lambda_names(self) -> list[str]:
        out = []
        for s in self.seasonals:
            out += [f"{s.name}.tt", f"{s.name}.st", f"{s.name}.ss"]
        out.append("trend")
        for name, c in zip(self.covariate_names(), self.ordered_covariates()):
            if c.kind == "flexible":
                out.append(f"{name}.tt")
            elif c.kind == "seasonal":
                out += [f"{name}.tt", f"{name}.st", f"{name}.ss"]
        return out

    def with_lambdas(self, values: Sequence[float]) -> "ModelSpec":
        values = [float(v) for v in values]
        if len(values) != len(self.lambda_vector()):
            raise ValueError(f"expected {len(self.lambda_vector())} smoothing parameters, got {len(values)}")
        it = iter(values)
        seas = [replace(s, lambdas=(next(it), next(it), next(it))) for s in self.seasonals]
        trend = next(it)
        covs = [replace(c, thetas=tuple(next(it) for _ in c.thetas)) for c in self.ordered_covariates()]
        return ModelSpec(trend, seas, covs)

    def extended(self, n_new: int) -> "ModelSpec":
        for c in self.covariates:
            if len(c.values) < n_new:
                raise ValueError(f"covariate {c.name!r} has {len(c.values)} values; {n_new} are needed")
        return ModelSpec(
            self.trend_lambda,
            list(self.seasonals),
            [replace(c, values=c.values[:n_new]) for c in self.covariates],
        )


class _Lazy:
    """Deferred, cached construction of a penalty matrix."""

    def __init__(self, fn, *args, **kwargs):
        self.fn, self.args, self.kwargs = fn, args, kwargs

    def __call__(self):
        return _cached_build(self.fn, self.args, tuple(sorted(self.kwargs.items())))


@lru_cache(maxsize=8)
def _cached_build(fn, args, kwargs):
    return fn(*args, **dict(kwargs))


def _seasonal_penalties(topo, n, weights):
    def get(label, coords="reduced"):
        return getattr(_cached_build(build_penalties, (topo, n), (("coords", coords),)), "D_" + label)

    return [(label, w, _Lazy(get, label)) for label, w in zip(("tt", "st", "ss"), weights)]


def build_extraction(spec: SeasonalSpec, n: int) -> sp.csr_array:
    """``n x n(m-1)`` matrix picking the observed surface value at each time."""
    m = spec.m
    r = m - 1
    nodes = spec.nodes(n)
    t = np.arange(n)
    hit = nodes < r
    last = np.flatnonzero(~hit)
    rows = np.concatenate([t[hit], np.repeat(last, r)])
    cols = np.concatenate([t[hit] * r + nodes[hit], (last[:, None] * r + np.arange(r)).ravel()])
    vals = np.concatenate([np.ones(hit.sum()), -np.ones(len(last) * r)])
    return from_triplets(n, n * r, rows, cols, vals)


def _extraction_difference(spec: SeasonalSpec, n: int) -> sp.csr_array:
    m = spec.m
    nodes = spec.nodes(n)
    pick = from_triplets(n, m * n, np.arange(n), np.arange(n) * m + nodes, np.ones(n))
    return sp.csr_array(pick @ difference_embedding(m, n))


@dataclass
class _Block:
    name: str
    kind: str  # seasonal, trend, static, flexible, seasonal_cov
    cols: slice
    obs: sp.csr_array  # n x ncols, spec coordinates, all times
    penalties: list  # (label, weight, matrix)
    m: int | None = None
    ref: object = None


@dataclass
class DesignSystem:
    """The stacked system ``y_plus ~ X eta`` with its block layout.

    ``blocks`` maps component names to column slices of ``eta``;
    ``row_blocks`` maps ``"obs"`` and each retained penalty to row slices of ``X``.
    ``X_solve`` and ``basis`` give the same system in sparse difference
    coordinates: ``X_solve = X @ basis`` and ``eta = basis @ eta_solve``.
    """

    spec: ModelSpec
    data: TimeSeriesData
    parts: list[_Block]
    dropped: list[str]
    warnings: list[str]

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def obs_index(self) -> np.ndarray:
        return np.flatnonzero(self.data.observed)

    @property
    def n_obs(self) -> int:
        return int(self.data.observed.sum())

    @property
    def ncols(self) -> int:
        return self.parts[-1].cols.stop if self.parts else 0

    @property
    def blocks(self) -> dict[str, slice]:
        return {b.name: b.cols for b in self.parts}

    def _penalty_rows(self):
        for b in self.parts:
            for label, w, get in b.penalties:
                if w > 0:
                    yield b, label, w, get()

    @cached_property
    def row_blocks(self) -> dict[str, slice]:
        out = {"obs": slice(0, self.n_obs)}
        start = self.n_obs
        for b, label, _, D in self._penalty_rows():
            out[f"{b.name}.{label}"] = slice(start, start + D.shape[0])
            start += D.shape[0]
        return out

    def _stack(self, coords: str) -> sp.csr_array:
        obs = self.obs_index
        top = sp.hstack([self._obs_block(b, coords)[obs] for b in self.parts], format="csr")
        rows = [top]
        for b, label, w, D in self._penalty_rows():
            Dc = D if coords == "reduced" or b.kind not in ("seasonal", "seasonal_cov") else self._diff_penalties(b)[label]
            rows.append(
                sp.hstack(
                    [
                        sp.csr_array((D.shape[0], b.cols.start)),
                        w * Dc,
                        sp.csr_array((D.shape[0], self.ncols - b.cols.stop)),
                    ],
                    format="csr",
                )
            )
        X = sp.vstack(rows, format="csr")
        X.sum_duplicates()
        X.eliminate_zeros()
        X.sort_indices()
        return X

    def _obs_block(self, b: _Block, coords: str) -> sp.csr_array:
        if coords == "reduced" or b.kind not in ("seasonal", "seasonal_cov"):
            return b.obs
        spec = b.ref if b.kind == "seasonal" else self.spec.seasonals[b.ref.season_ref]
        Q = _extraction_difference(spec, self.n)
        if b.kind == "seasonal_cov":
            Q = sp.csr_array(sp.diags_array(b.ref.values) @ Q)
        return Q

    def _diff_penalties(self, b: _Block) -> dict:
        spec = b.ref if b.kind == "seasonal" else self.spec.seasonals[b.ref.season_ref]
        P = _cached_build(build_penalties, (spec.topology, self.n), (("coords", "difference"),))
        return {"tt": P.D_tt, "st": P.D_st, "ss": P.D_ss}

    @cached_property
    def X(self) -> sp.csr_array:
        return self._stack("reduced")

    @cached_property
    def X_solve(self) -> sp.csr_array:
        return self._stack("difference")

    @cached_property
    def basis(self) -> sp.csr_array:
        mats = []
        for b in self.parts:
            width = b.cols.stop - b.cols.start
            if b.kind in ("seasonal", "seasonal_cov"):
                mats.append(difference_basis(b.m, self.n))
            else:
                mats.append(sp.eye_array(width, format="csr"))
        return sp.csr_array(sp.block_diag(mats, format="csr"))

    @cached_property
    def y_plus(self) -> np.ndarray:
        y = self.data.y[self.obs_index]
        return np.r_[y, np.zeros(sum(D.shape[0] for _, _, _, D in self._penalty_rows()))]

    def observation_operator(self, name: str, times=None) -> sp.csr_array:
        """Rows mapping ``eta`` to a component's contribution at ``times`` (default: all)."""
        b = next(p for p in self.parts if p.name == name)
        O = b.obs if times is None else b.obs[np.asarray(times)]
        return sp.hstack(
            [sp.csr_array((O.shape[0], b.cols.start)), O, sp.csr_array((O.shape[0], self.ncols - b.cols.stop))],
            format="csr",
        )

    def component_names(self) -> list[str]:
        return [b.name for b in self.parts]


def assemble(spec: ModelSpec, data: TimeSeriesData) -> DesignSystem:
    """Lay out the blocks of the stacked system for ``spec`` on ``data``."""
    n = data.n
    n_obs = int(data.observed.sum())
    for c in spec.covariates:
        if len(c.values) != n:
            raise ValueError(f"covariate {c.name!r} has {len(c.values)} values, series has {n}")
    for i, a in enumerate(spec.seasonals):
        for b in spec.seasonals[i + 1:]:
            if a.same_structure(b, n):
                raise IdentifiabilityError(
                    f"seasonal components {a.name!r} and {b.name!r} share topology and season map"
                )

    parts: list[_Block] = []
    start = 0

    def add(name, kind, obs, penalties, m=None, ref=None):
        nonlocal start
        width = obs.shape[1]
        parts.append(_Block(name, kind, slice(start, start + width), sp.csr_array(obs), penalties, m, ref))
        start += width

    for s in spec.seasonals:
        add(s.name, "seasonal", build_extraction(s, n), _seasonal_penalties(s.topology, n, s.lambdas), m=s.m, ref=s)

    add("trend", "trend", sp.eye_array(n, format="csr"), [("tt", spec.trend_lambda, _Lazy(build_trend_penalty, n))])

    covs = spec.ordered_covariates()
    names = spec.covariate_names()
    statics = [(name, c) for name, c in zip(names, covs) if c.kind == "static"]
    if statics:
        A = np.column_stack([c.values for _, c in statics])
        add("static", "static", sp.csr_array(A), [], ref=statics)
    for name, c in zip(names, covs):
        if c.kind == "flexible":
            pens = [("tt", c.thetas[0], _Lazy(build_trend_penalty, n))]
            add(name, "flexible", sp.diags_array(c.values, format="csr"), pens, ref=c)
        elif c.kind == "seasonal":
            base = spec.seasonals[c.season_ref]
            Q = sp.diags_array(c.values) @ build_extraction(base, n)
            add(name, "seasonal_cov", Q, _seasonal_penalties(base.topology, n, c.thetas), m=base.m, ref=c)

    dropped, warns = [], []
    for b in parts:
        if not b.penalties:
            continue
        zero = [label for label, w, _ in b.penalties if w == 0]
        for label in zero:
            dropped.append(f"{b.name}.{label}")
            msg = f"penalty {b.name}.{label} has zero weight; its rows are removed"
            warns.append(msg)
            log.info(msg)
        width = b.cols.stop - b.cols.start
        if len(zero) == len(b.penalties) and width > n_obs:
            raise IdentifiabilityError(
                f"component {b.name!r} has {width} coefficients, {n_obs} observations and no "
                "smoothness penalty; give it a positive smoothing parameter"
            )
    return DesignSystem(spec, data, parts, dropped, warns)


@dataclass
class Components:
    """Per-component series of a fitted decomposition (length ``n`` each)."""

    trend: np.ndarray
    seasonal: dict[str, np.ndarray]
    surfaces: dict[str, np.ndarray]
    covariates: dict[str, np.ndarray]
    coefficients: dict[str, np.ndarray]
    fitted: np.ndarray
    remainder: np.ndarray

    def table(self) -> dict[str, np.ndarray]:
        out = {"trend": self.trend}
        out.update(self.seasonal)
        out.update(self.covariates)
        out["remainder"] = self.remainder
        return out


def split_components(ds: DesignSystem, eta) -> Components:
    """Split a coefficient vector into trend, seasonal and covariate series.

    The remainder is ``y - fitted`` at observed times and NaN elsewhere.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (ds.ncols,):
        raise ValueError(f"coefficient vector has length {eta.shape[0]}, design has {ds.ncols} columns")
    n = ds.n
    trend = np.zeros(n)
    seasonal, surfaces, covs, coefs = {}, {}, {}, {}
    for b in ds.parts:
        part = eta[b.cols]
        contrib = b.obs @ part
        if b.kind == "trend":
            trend = contrib
        elif b.kind == "seasonal":
            seasonal[b.name] = contrib
            surfaces[b.name] = embed(part, b.m)
        elif b.kind == "static":
            for (name, c), a in zip(b.ref, part):
                covs[name] = a * c.values
                coefs[name] = np.full(n, a)
        elif b.kind == "flexible":
            covs[b.name] = contrib
            coefs[b.name] = part.copy()
        else:
            covs[b.name] = contrib
            surf = embed(part, b.m)
            surfaces[b.name] = surf
            nodes = ds.spec.seasonals[b.ref.season_ref].nodes(n)
            coefs[b.name] = surf[nodes, np.arange(n)]
    fitted = trend + sum(seasonal.values(), np.zeros(n)) + sum(covs.values(), np.zeros(n))
    remainder = np.where(ds.data.observed, ds.data.y - fitted, np.nan)
    return Components(trend, seasonal, surfaces, covs, coefs, fitted, remainder)
