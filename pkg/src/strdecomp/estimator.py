"""Fitting the stacked system: least squares, L1 and correlated errors.

Two numerically equivalent routes are available for least-squares fits.

``sparse``
    Factorize the normal equations of the stacked design (seasonal blocks in
    difference coordinates, which keep ``X'X`` sparse).
``dual``
    Work in observation space.  Seasonal surfaces on plain cycles are
    integrated out using their closed-form prior covariance, leaving dense
    ``n x n`` algebra for the trend and covariate blocks.  This is much
    cheaper when a seasonal period is long (e.g. 365 days).

``auto`` picks ``dual`` when every seasonal block lives on a cycle with a
positive season-direction weight and the seasonal blocks are large.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog
from scipy.sparse.csgraph import structural_rank
from scipy.stats import norm

from ._cyclic import CyclicPrior
from .model import DesignSystem, ModelSpec, TimeSeriesData, assemble, split_components
from .sparsemat import NormalFactor, RankDeficiencyError, _report
from .topology import difference_embedding, reduce

log = logging.getLogger(__name__)

__all__ = [
    "FitResult",
    "Forecast",
    "ConvergenceError",
    "fit",
    "fit_ols",
    "fit_robust",
    "l1_solve",
    "fit_gls",
    "ar1_covariance",
    "confidence_intervals",
    "forecast",
]

DUAL_MIN_SEASONAL_COLS = 20000
DUAL_MAX_N = 6000


class ConvergenceError(RuntimeError):
    """An iterative fit stopped before meeting its tolerance."""

    def __init__(self, message, objective=None):
        super().__init__(message)
        self.objective = objective


# ---------------------------------------------------------------------------
# sparse route


class _SparseEngine:
    """Normal-equation factorization of the (optionally weighted) stacked design."""

    route = "sparse"

    def __init__(self, ds: DesignSystem, row_weights=None, obs_whitener=None, *, max_factor_nnz=None):
        self.ds = ds
        X = ds.X_solve
        y = ds.y_plus
        n_obs = ds.n_obs
        if obs_whitener is not None:
            W, pen_scale = obs_whitener
            top = W @ X[:n_obs].toarray() if not sp.issparse(W) else W @ X[:n_obs]
            X = sp.vstack([sp.csr_array(top), X[n_obs:] * pen_scale], format="csr")
            y = np.r_[W @ y[:n_obs], y[n_obs:] * pen_scale]
        self.X = X
        self.y = y
        self.factor = NormalFactor(X, row_weights, max_factor_nnz=max_factor_nnz)
        eta_d = self.factor.lstsq(y)
        self.report = _report(X, y, eta_d, self.factor) if row_weights is None else None
        self.eta = ds.basis @ eta_d

    def residuals(self) -> np.ndarray:
        """``y - fitted`` at the observed times."""
        return split_components(self.ds, self.eta).remainder[self.ds.obs_index]

    def leverages(self) -> np.ndarray:
        return self.factor.leverages(np.arange(self.ds.n_obs))

    def _operator(self, name: str) -> sp.csr_array:
        return sp.csr_array(self.ds.observation_operator(name) @ self.ds.basis)

    def variances(self) -> dict[str, np.ndarray]:
        ds = self.ds
        out = {}
        total = None
        for name in ds.component_names():
            O = self._operator(name)
            total = O if total is None else total + O
            if name == "static":
                b = next(p for p in ds.parts if p.kind == "static")
                cols = np.arange(b.cols.start, b.cols.stop)
                E = sp.csr_array((np.ones(len(cols)), (np.arange(len(cols)), cols)), shape=(len(cols), ds.ncols))
                v = self.factor.quadratic_diagonal(E @ ds.basis)
                for j, (cname, c) in enumerate(b.ref):
                    out[cname] = v[j] * c.values**2
            else:
                out[name] = self.factor.quadratic_diagonal(O)
        out["fitted"] = self.factor.quadratic_diagonal(total)
        return out

    def coef_variances(self) -> np.ndarray:
        return self.factor.quadratic_diagonal(self.ds.basis)

    def surface_variance(self, name: str) -> np.ndarray:
        b = next(p for p in self.ds.parts if p.name == name)
        if b.m is None:
            raise ValueError(f"{name!r} is not a seasonal surface")
        E = difference_embedding(b.m, self.ds.n)
        L = sp.hstack(
            [sp.csr_array((E.shape[0], b.cols.start)), E, sp.csr_array((E.shape[0], self.ds.ncols - b.cols.stop))],
            format="csr",
        )
        return self.factor.quadratic_diagonal(L).reshape(self.ds.n, b.m).T


# ---------------------------------------------------------------------------
# observation-space route


_KERNELS: OrderedDict = OrderedDict()
_KERNEL_CACHE_SIZE = 6


def _prior(m, kappa, lambdas, scale) -> tuple[CyclicPrior, np.ndarray]:
    key = (m, kappa.tobytes(), tuple(lambdas), float(scale))
    hit = _KERNELS.get(key)
    if hit is not None:
        _KERNELS.move_to_end(key)
        return hit
    prior = CyclicPrior(m, kappa, lambdas, scale)
    out = (prior, prior.covariance())
    _KERNELS[key] = out
    while len(_KERNELS) > _KERNEL_CACHE_SIZE:
        _KERNELS.popitem(last=False)
    return out


def dual_supported(ds: DesignSystem) -> bool:
    for b in ds.parts:
        if b.kind in ("seasonal", "seasonal_cov"):
            spec = b.ref if b.kind == "seasonal" else ds.spec.seasonals[b.ref.season_ref]
            lam = b.ref.lambdas if b.kind == "seasonal" else b.ref.thetas
            if spec.topology.kind != "cycle" or not lam[2] > 0:
                return False
    return True


class _DualEngine:
    """Least squares in observation space with seasonal surfaces integrated out.

    With prior covariances ``K_c`` of the observed seasonal values, noise
    covariance ``Sigma`` and dense blocks ``F`` (trend and covariates) with
    penalty ``P``::

        M = Sigma + sum_c K_c[o, o],      A = F' M^-1 F + P,
        b = A^-1 F' M^-1 y,               alpha = M^-1 (y - F b),
        s_c = Cov(S_c, y) alpha.

    This equals the stacked least-squares solution exactly.  When the dense
    blocks are the trend plus static covariates, ``alpha = R y`` is formed
    through ``R_trend = B' (I + B M B')^-1 B`` (``B'B`` the trend penalty
    restricted to observed times) followed by a generalized least-squares
    correction for the static coefficients, which avoids inverting ``M``.
    """

    route = "dual"

    def __init__(self, ds: DesignSystem, sigma_obs=None, prior_scale: float = 1.0):
        self.ds = ds
        n = ds.n
        o = ds.obs_index
        self.o = o
        y = ds.data.y[o]
        self.y = y
        self.sigma_obs = sigma_obs
        self.prior_scale = prior_scale
        self.seasonal = []
        dense = []
        for b in ds.parts:
            if b.kind in ("seasonal", "seasonal_cov"):
                if b.kind == "seasonal":
                    spec, lam, scale_vec = b.ref, b.ref.lambdas, None
                else:
                    spec, lam, scale_vec = ds.spec.seasonals[b.ref.season_ref], b.ref.thetas, b.ref.values
                prior, K = _prior(spec.m, spec.nodes(n).astype(np.int64), lam, prior_scale)
                if scale_vec is not None:
                    K = K * np.outer(scale_vec, scale_vec)
                self.seasonal.append((b, prior, K, scale_vec))
            else:
                dense.append((b, b.obs.toarray()))
        self.dense = dense
        self.F_all = np.hstack([F for _, F in dense]) if dense else np.zeros((n, 0))
        self.F = self.F_all[o]
        M = np.zeros((len(o), len(o))) if sigma_obs is None else np.array(sigma_obs, dtype=float)
        if sigma_obs is None:
            M[np.diag_indices_from(M)] = 1.0
        for _, _, K, _ in self.seasonal:
            M += K[np.ix_(o, o)]
        self.M = M
        self._wb = self._woodbury()
        if self._wb is None:
            self.b_hat = sla.cho_solve(self.Ac, self.MiF.T @ y)
            self.alpha = sla.cho_solve(self.Mc, y - self.F @ self.b_hat)
        self.report = None

    # general factors, formed on demand

    @cached_property
    def P(self) -> np.ndarray:
        blocks = []
        for b, F in self.dense:
            P = np.zeros((F.shape[1],) * 2)
            for _, w, get in b.penalties:
                if w > 0:
                    D = get()
                    P += (w * w / self.prior_scale) * (D.T @ D).toarray()
            blocks.append(P)
        return sla.block_diag(*blocks) if blocks else np.zeros((0, 0))

    @cached_property
    def Mc(self):
        try:
            return sla.cho_factor(self.M, lower=True)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("observation covariance is not positive definite") from None

    @cached_property
    def MiF(self) -> np.ndarray:
        return sla.cho_solve(self.Mc, self.F)

    @cached_property
    def Ac(self):
        try:
            return sla.cho_factor(self.F.T @ self.MiF + self.P, lower=True)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(
                "trend/covariate block is not identifiable; some smoothing parameter is zero "
                "or too small for the components to be identifiable"
            ) from None

    def _woodbury(self):
        kinds = [b.kind for b, _ in self.dense]
        if not kinds or kinds[0] != "trend" or any(k != "static" for k in kinds[1:]):
            return None
        tb = self.dense[0][0]
        (_, w, get), = tb.penalties
        if w <= 0:
            return None
        n = self.ds.n
        o = self.o
        y = self.y
        B = sp.csc_array(get()) * (w / np.sqrt(self.prior_scale))
        Bo = B[:, o]
        miss = np.setdiff1d(np.arange(n), o)
        Q = Rm = None
        if len(miss):
            # eliminate the trend at missing times: project onto the complement of range(B_m)
            Q, Rm = sla.qr(B[:, miss].toarray())
            k = len(miss)
            d = np.abs(np.diag(Rm))
            if k >= Q.shape[0] or d.min() <= 1e-10 * d.max():
                return None
            Bt = (Bo.T @ Q[:, k:]).T
            C = Bt @ self.M @ Bt.T
        else:
            C = np.asarray(Bo @ (Bo @ self.M).T)
            Bt = Bo.toarray()
        C[np.diag_indices_from(C)] += 1.0
        Lc = sla.cholesky(C, lower=True, overwrite_a=True, check_finite=False)
        W = sla.solve_triangular(Lc, Bt, lower=True, overwrite_b=True, check_finite=False)
        alpha = W.T @ (W @ y)
        RA = Gc = None
        a_hat = np.zeros(0)
        if len(self.dense) > 1:
            A_s = self.dense[1][1][o]
            WA = W @ A_s
            RA = W.T @ WA
            try:
                Gc = sla.cho_factor(WA.T @ WA, lower=True)
            except np.linalg.LinAlgError:
                raise RankDeficiencyError(
                    "static covariates are collinear with the trend null space or with each other"
                ) from None
            a_hat = sla.cho_solve(Gc, RA.T @ y)
            alpha = alpha - RA @ a_hat
        trend_o = y - self.M @ alpha
        if RA is not None:
            trend_o = trend_o - A_s @ a_hat
        trend = np.empty(n)
        trend[o] = trend_o
        if len(miss):
            k = len(miss)
            rhs = Q[:, :k].T @ (Bo @ trend_o)
            trend[miss] = -sla.solve_triangular(Rm[:k, :k], rhs)
        self.b_hat = np.concatenate([trend, a_hat])
        self.alpha = alpha
        return W, RA, Gc

    @cached_property
    def eta(self) -> np.ndarray:
        n = self.ds.n
        eta = np.empty(self.ds.ncols)
        pos = 0
        for b, F in self.dense:
            width = F.shape[1]
            eta[b.cols] = self.b_hat[pos:pos + width]
            pos += width
        u = np.zeros(n)
        u[self.o] = self.alpha
        for b, prior, _, scale_vec in self.seasonal:
            surf = prior.surface(u if scale_vec is None else scale_vec * u)
            eta[b.cols] = reduce(surf)
        return eta

    def residuals(self) -> np.ndarray:
        """``y - fitted`` at the observed times."""
        return self.alpha.copy() if self.sigma_obs is None else self.sigma_obs @ self.alpha

    def _resolvent(self) -> np.ndarray:
        """``M^-1 - M^-1 F A^-1 F' M^-1``; maps ``y`` to ``alpha``."""
        if self._wb is not None:
            W, RA, Gc = self._wb
            R = W.T @ W
            if RA is not None:
                R -= RA @ sla.cho_solve(Gc, RA.T)
            return R
        R = sla.cho_solve(self.Mc, np.eye(len(self.o)))
        if self.F.shape[1]:
            R -= self.MiF @ sla.cho_solve(self.Ac, self.MiF.T)
        return R

    def leverages(self, sigma_obs=None) -> np.ndarray:
        if self._wb is not None:
            W, RA, Gc = self._wb
            if sigma_obs is not None:
                L = sla.cholesky(sigma_obs, lower=True)
                W = W @ L
                RA = None if RA is None else L.T @ RA
            d = np.einsum("ij,ij->j", W, W)
            if RA is not None:
                d -= np.einsum("ij,ji->i", RA, sla.cho_solve(Gc, RA.T))
            return 1.0 - d
        R = self._resolvent()
        if sigma_obs is None:
            return 1.0 - np.diag(R)
        L = sla.cholesky(sigma_obs, lower=True)
        return 1.0 - np.einsum("ij,ij->j", L, R @ L)

    def _posterior_diag(self, Kfo, Kdiag, G) -> np.ndarray:
        """``diag(K - Kfo M^-1 Kfo') + diag(G A^-1 G')``."""
        KMi = sla.cho_solve(self.Mc, Kfo.T).T
        v = Kdiag - np.einsum("ij,ij->i", KMi, Kfo)
        if G.shape[1]:
            v += np.einsum("ij,ji->i", G, sla.cho_solve(self.Ac, G.T))
        return np.maximum(v, 0.0)

    def variances(self) -> dict[str, np.ndarray]:
        o = self.o
        n = self.ds.n
        out = {}
        Ktot = np.zeros((n, n))
        for b, _, K, _ in self.seasonal:
            Ktot += K
            Kfo = K[:, o]
            G = -Kfo @ self.MiF
            out[b.name] = self._posterior_diag(Kfo, np.diag(K).copy(), G)
        pos = 0
        zero = np.zeros((n, 0))
        Ai = sla.cho_solve(self.Ac, np.eye(self.P.shape[0])) if self.P.shape[0] else None
        for b, F_blk in self.dense:
            width = F_blk.shape[1]
            sl = slice(pos, pos + width)
            pos += width
            if b.kind == "static":
                for j, (cname, c) in enumerate(b.ref):
                    out[cname] = Ai[sl, sl][j, j] * c.values**2
            else:
                out[b.name] = np.einsum("ij,jk,ik->i", F_blk, Ai[sl, sl], F_blk, optimize=True)
        Kfo = Ktot[:, o]
        G = self.F_all - Kfo @ self.MiF if self.F_all.shape[1] else zero
        out["fitted"] = self._posterior_diag(Kfo, np.diag(Ktot).copy(), G)
        return out


# ---------------------------------------------------------------------------
# results


@dataclass
class Forecast:
    times: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


@dataclass
class FitResult:
    """A fitted decomposition.

    ``leverages`` are the hat-matrix diagonal over observation rows (least
    squares fits only).  Variances are computed on first access and scaled by
    ``variance_scale`` (``sigma_R**2`` for ordinary fits, 1 for GLS fits where
    the error covariance is given in absolute terms).
    """

    eta: np.ndarray
    components: object
    sigma_R: float
    leverages: np.ndarray | None
    fit_kind: str
    design: DesignSystem
    route: str
    variance_scale: float | None
    objective: float | None = None
    iterations: int | None = None
    report: object = None
    forecast: Forecast | None = None
    _engine: object = field(default=None, repr=False)

    def _require_cov(self):
        if self.variance_scale is None:
            raise ValueError(f"a {self.fit_kind} fit does not provide a covariance")

    @cached_property
    def component_variances(self) -> dict[str, np.ndarray]:
        """Per-time variance of every component contribution and of the fitted total."""
        self._require_cov()
        return {k: v * self.variance_scale for k, v in self._engine.variances().items()}

    def _sparse_engine(self):
        if isinstance(self._engine, _SparseEngine):
            return self._engine
        if self.fit_kind == "gls":
            return _gls_sparse_engine(self.design, self._sigma_obs)
        return _SparseEngine(self.design)

    @cached_property
    def coef_variances(self) -> np.ndarray:
        """Diagonal of ``Cov(eta)``."""
        self._require_cov()
        return self._sparse_engine().coef_variances() * self.variance_scale

    def surface_variance(self, name: str) -> np.ndarray:
        """``m x n`` variance of every node of a fitted seasonal surface."""
        self._require_cov()
        return self._sparse_engine().surface_variance(name) * self.variance_scale

    @property
    def fitted(self) -> np.ndarray:
        return self.components.fitted

    @property
    def rss(self) -> float:
        r = self.components.remainder
        return float(np.nansum(r * r))


def choose_route(ds: DesignSystem, method: str) -> str:
    if method not in ("auto", "sparse", "dual"):
        raise ValueError(f"method must be auto, sparse or dual, got {method!r}")
    if method == "auto":
        seasonal_cols = sum(b.cols.stop - b.cols.start for b in ds.parts if b.m is not None)
        big = seasonal_cols > DUAL_MIN_SEASONAL_COLS and ds.n <= DUAL_MAX_N
        return "dual" if big and dual_supported(ds) else "sparse"
    if method == "dual" and not dual_supported(ds):
        raise ValueError("the dual route needs cycle topologies with positive season-direction weights")
    return method


def solve_l2(ds: DesignSystem, method: str = "auto", *, max_factor_nnz=None):
    """Least-squares coefficients and the engine that produced them."""
    if choose_route(ds, method) == "dual":
        return _DualEngine(ds)
    return _SparseEngine(ds, max_factor_nnz=max_factor_nnz)


def _sigma_hat(ds: DesignSystem, resid, lev) -> float:
    dof = ds.n_obs - float(lev.sum())
    if not dof > 0:
        raise RankDeficiencyError(
            f"no residual degrees of freedom left ({ds.n_obs} observations, trace {lev.sum():.6g}); "
            "use larger smoothing parameters"
        )
    return float(np.sqrt(np.dot(resid, resid) / dof))


def fit_ols(ds: DesignSystem, method: str = "auto", *, max_factor_nnz=None) -> FitResult:
    """Penalized least-squares fit with ``sigma_R`` from the effective degrees of freedom."""
    eng = solve_l2(ds, method, max_factor_nnz=max_factor_nnz)
    comps = split_components(ds, eng.eta)
    lev = eng.leverages()
    resid = comps.remainder[ds.obs_index]
    sigma = _sigma_hat(ds, resid, lev)
    return FitResult(eng.eta, comps, sigma, lev, "ols", ds, eng.route, sigma**2, report=eng.report, _engine=eng)


def fit(spec: ModelSpec, data: TimeSeriesData, kind: str = "ols", **kwargs) -> FitResult:
    """Assemble and fit in one call; ``kind`` is ``ols``, ``robust`` or ``gls``."""
    ds = assemble(spec, data)
    if kind == "ols":
        return fit_ols(ds, **kwargs)
    if kind == "robust":
        return fit_robust(ds, **kwargs)
    if kind == "gls":
        return fit_gls(ds, **kwargs)
    raise ValueError(f"fit kind must be ols, robust or gls, got {kind!r}")


# ---------------------------------------------------------------------------
# L1


def _l1(X, eta, y) -> float:
    return float(np.abs(X @ eta - y).sum())


def _basis(X, r) -> np.ndarray:
    return np.argsort(np.abs(r), kind="stable")


def _vertex(X, y, r, order=None):
    """Basic solution through the ``p`` rows with the smallest residuals.

    Returns ``(eta, optimal)``; ``optimal`` certifies L1 optimality: the
    subgradient condition ``X_B' u = -X_N' sign(r_N)`` has a solution with
    ``|u| <= 1``.  ``eta`` is None when those rows are singular.
    """
    p = X.shape[1]
    if order is None:
        order = _basis(X, r)
    rows, rest = order[:p], order[p:]
    B = sp.csc_array(X[rows])
    # structurally singular input can crash the sparse LU
    if structural_rank(B) < p:
        return None, False
    try:
        lu = spla.splu(B)
    except RuntimeError:
        return None, False
    eta = lu.solve(y[rows])
    if not np.all(np.isfinite(eta)):
        return None, False
    sign = np.sign(X[rest] @ eta - y[rest])
    u = lu.solve(-(X[rest].T @ sign), trans="T")
    return eta, bool(np.all(np.abs(u) <= 1.0 + 1e-9))


def _l1_linprog(X, y):
    N, p = X.shape
    I = sp.eye_array(N, format="csr")
    A = sp.hstack([X, I, -I], format="csr")
    c = np.r_[np.zeros(p), np.ones(2 * N)]
    bounds = [(None, None)] * p + [(0, None)] * (2 * N)
    res = linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    return res.x[:p] if res.status == 0 else None


def l1_solve(
    X, y, *, max_iter: int = 200, rtol: float = 1e-8, eps: float | None = None, lp_fallback: bool = True,
    max_factor_nnz=None,
):
    """Minimize ``||y - X eta||_1`` for a sparse ``X`` of full column rank.

    Iteratively reweighted least squares with weights ``1/max(|r|, eps)``;
    ``eps`` defaults to ``1e-6`` times the spread of ``y``.  Before every
    step the basic solution through the ``p`` rows with the smallest
    residuals is tested for optimality and returned if certified.
    Otherwise iteration stops on a relative objective change below ``rtol``
    and the best iterate (least-squares start included) is returned, or
    replaced by the basic solution when that is no worse.  If the
    iterations stall, the exact linear program is solved instead
    (``lp_fallback``) or :class:`ConvergenceError` is raised.

    Returns ``(eta, objective, iterations)``.
    """
    X = sp.csr_array(X)
    y = np.asarray(y, dtype=float)
    if eps is None:
        spread = float(np.max(np.abs(y - np.median(y)))) or float(np.max(np.abs(y))) or 1.0
        eps = 1e-6 * spread
    eta = NormalFactor(X, max_factor_nnz=max_factor_nnz).lstsq(y)
    obj = _l1(X, eta, y)
    best, best_obj = eta, obj
    it = 0
    tested = None
    for it in range(1, max_iter + 1):
        r = X @ eta - y
        order = _basis(X, r)
        rows = np.sort(order[: X.shape[1]])
        # the certificate depends only on the row set
        if tested is None or not np.array_equal(rows, tested):
            tested = rows
            v, optimal = _vertex(X, y, r, order)
            if optimal:
                return v, _l1(X, v, y), it - 1
        w = 1.0 / np.maximum(np.abs(r), eps)
        eta = NormalFactor(X, w, max_factor_nnz=max_factor_nnz).lstsq(y)
        new = _l1(X, eta, y)
        if new < best_obj:
            best, best_obj = eta, new
        if abs(obj - new) <= rtol * max(abs(new), 1e-300):
            break
        obj = new
    else:
        if not lp_fallback:
            raise ConvergenceError(
                f"L1 iterations did not converge in {max_iter} steps (objective {best_obj:.10g})", best_obj
            )
        log.info("L1 iterations stalled at objective %.10g; solving the linear program", best_obj)
        lp = _l1_linprog(X, y)
        if lp is None:
            raise ConvergenceError(
                f"L1 iterations did not converge in {max_iter} steps and the linear program failed "
                f"(objective {best_obj:.10g})",
                best_obj,
            )
        lp_obj = _l1(X, lp, y)
        if lp_obj <= best_obj:
            best, best_obj = lp, lp_obj
    v, _ = _vertex(X, y, X @ best - y)
    if v is not None:
        v_obj = _l1(X, v, y)
        if v_obj <= best_obj:
            best, best_obj = v, v_obj
    return best, best_obj, it


def fit_robust(
    ds: DesignSystem, *, max_iter: int = 200, rtol: float = 1e-8, lp_fallback: bool = True, max_factor_nnz=None
) -> FitResult:
    """Least absolute deviations over all rows of the stacked system.

    ``sigma_R`` is the normal-consistent median absolute deviation of the
    remainder.  No covariance is reported.
    """
    y_obs = ds.y_plus[: ds.n_obs]
    spread = float(np.max(np.abs(y_obs - np.median(y_obs)))) or float(np.max(np.abs(y_obs))) or 1.0
    eta_d, obj, it = l1_solve(
        ds.X_solve, ds.y_plus, max_iter=max_iter, rtol=rtol, eps=1e-6 * spread, lp_fallback=lp_fallback,
        max_factor_nnz=max_factor_nnz,
    )
    eta = ds.basis @ eta_d
    comps = split_components(ds, eta)
    resid = comps.remainder[ds.obs_index]
    sigma = 1.4826 * float(np.median(np.abs(resid - np.median(resid))))
    return FitResult(eta, comps, sigma, None, "robust", ds, "sparse", None, objective=obj, iterations=it)


# ---------------------------------------------------------------------------
# GLS


def ar1_covariance(n: int, rho: float, sigma2: float = 1.0) -> np.ndarray:
    """Stationary AR(1) covariance ``sigma2 * rho**|i-j|``."""
    if not -1 < rho < 1:
        raise ValueError("AR(1) coefficient must lie in (-1, 1)")
    idx = np.arange(n)
    return sigma2 * rho ** np.abs(idx[:, None] - idx[None, :])


def _obs_covariance(ds: DesignSystem, sigma_eps) -> np.ndarray:
    """Covariance over observed rows as a dense matrix; accepts a scalar,
    per-time variances or a full matrix over all ``n`` times (or observed times)."""
    n, o = ds.n, ds.obs_index
    S = np.asarray(sigma_eps, dtype=float)
    if S.ndim == 0:
        S = np.full(n, float(S))
    if S.ndim == 1:
        if S.shape[0] == n:
            S = S[o]
        elif S.shape[0] != len(o):
            raise ValueError(f"variance vector has length {S.shape[0]}, expected {n} or {len(o)}")
        return np.diag(S)
    if S.shape == (n, n):
        S = S[np.ix_(o, o)]
    elif S.shape != (len(o), len(o)):
        raise ValueError(f"covariance has shape {S.shape}, expected ({n}, {n}) or ({len(o)}, {len(o)})")
    if not np.allclose(S, S.T, rtol=1e-12, atol=0):
        raise ValueError("error covariance must be symmetric")
    return S


def _gls_sparse_engine(ds, S):
    try:
        L = sla.cholesky(S, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("error covariance is not positive definite") from None
    scale = float(np.mean(np.diag(S)))
    W = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    if np.count_nonzero(S - np.diag(np.diag(S))) == 0:
        W = sp.diags_array(np.diag(W)).tocsr()
    return _SparseEngine(ds, obs_whitener=(W, 1.0 / np.sqrt(scale)))


def fit_gls(ds: DesignSystem, sigma_eps, method: str = "auto") -> FitResult:
    """Generalized least squares with error covariance ``sigma_eps`` over observations.

    Observation rows are whitened by the inverse Cholesky factor of the
    covariance; penalty rows are weighted by the mean error variance, so a
    covariance ``c * I`` leaves the estimate unchanged and scales ``Cov(eta)``
    by ``c``.
    """
    S = _obs_covariance(ds, sigma_eps)
    if not np.all(np.isfinite(S)):
        raise ValueError("error covariance has non-finite entries")
    try:
        sla.cholesky(S, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("error covariance is not positive definite") from None
    if choose_route(ds, method) == "dual":
        eng = _DualEngine(ds, sigma_obs=S, prior_scale=float(np.mean(np.diag(S))))
        lev = eng.leverages(S)
    else:
        eng = _gls_sparse_engine(ds, S)
        lev = eng.leverages()
    comps = split_components(ds, eng.eta)
    resid = comps.remainder[ds.obs_index]
    dof = ds.n_obs - float(lev.sum())
    sigma = float(np.sqrt(np.dot(resid, resid) / dof)) if dof > 0 else float("nan")
    res = FitResult(eng.eta, comps, sigma, lev, "gls", ds, eng.route, 1.0, report=eng.report, _engine=eng)
    res._sigma_obs = S
    return res


# ---------------------------------------------------------------------------
# intervals and forecasts


def _check_level(level):
    if not 0 < level < 1:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    return float(norm.ppf(0.5 + level / 2))


def confidence_intervals(fit: FitResult, level: float = 0.95) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``(lower, upper)`` per component: estimate -/+ z * sd with normal quantile ``z``."""
    z = _check_level(level)
    if fit.fit_kind not in ("ols", "gls"):
        raise ValueError("confidence intervals need an ols or gls fit")
    var = fit.component_variances
    out = {}
    for name, value in fit.components.table().items():
        if name == "remainder":
            continue
        half = z * np.sqrt(var[name])
        out[name] = (value - half, value + half)
    return out


def forecast(
    spec: ModelSpec, data: TimeSeriesData, horizon: int, *, level: float = 0.95, method: str = "auto"
) -> FitResult:
    """Fit on the series extended by ``horizon`` missing values.

    Covariates must already cover the extended index.  Prediction variance
    is the variance of the fitted total plus ``sigma_R**2``.
    """
    if int(horizon) != horizon or horizon < 1:
        raise ValueError(f"forecast horizon must be a positive integer, got {horizon}")
    z = _check_level(level)
    n = data.n
    ext = data.extended(int(horizon))
    res = fit_ols(assemble(spec.extended(ext.n), ext), method)
    fut = np.arange(n, ext.n)
    sd = np.sqrt(res.component_variances["fitted"][fut] + res.sigma_R**2)
    mean = res.fitted[fut]
    res.forecast = Forecast(ext.times[fut], mean, sd, mean - z * sd, mean + z * sd, level)
    return res
