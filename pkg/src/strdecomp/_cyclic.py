"""Closed-form prior covariance of a seasonal surface on a plain cycle.

On a cycle every penalty is circulant in the season direction, so the
discrete Fourier transform over seasons splits the surface into ``m``
independent time series.  Frequency ``j`` has the pentadiagonal precision

    P_j = l_tt**2 * L2 + l_st**2 * c_j * L1 + l_ss**2 * c_j**2 * I,
    c_j = 2 - 2 cos(2 pi j / m),

with ``L1``/``L2`` the Gram matrices of the first/second time differences.
Frequency 0 is exactly the part removed by the zero-sum constraint.  The
covariance of the surface values seen along the season map is then

    K[t, u] = (1/m) sum_{j=1}^{m-1} cos(theta_j (kappa_t - kappa_u)) P_j^{-1}[t, u].
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .topology import build_trend_penalty


def _first_difference(n):
    import scipy.sparse as sp

    return sp.diags_array([-np.ones(n - 1), np.ones(n - 1)], offsets=[0, 1], shape=(n - 1, n))


def gram_bands(n: int):
    """Diagonals of ``L2 = D2'D2`` (main, sub, subsub) and ``L1 = D1'D1`` (main, sub).

    Sub-diagonal arrays are indexed by the row: ``sub[i] = L[i, i-1]``.
    """
    D2 = build_trend_penalty(n)
    D1 = _first_difference(n)
    L2 = (D2.T @ D2).todia()
    L1 = (D1.T @ D1).todia()

    def band(L, k):
        out = np.zeros(n)
        out[k:] = L.diagonal(-k)
        return out

    return band(L2, 0), band(L2, 1), band(L2, 2), band(L1, 0), band(L1, 1)


@njit(cache=True)
def _factor(p0, p1, p2, L0, L1, L2):
    n = p0.shape[0]
    for i in range(n):
        l2 = p2[i] / L0[i - 2] if i >= 2 else 0.0
        l1 = 0.0
        if i >= 1:
            l1 = (p1[i] - (l2 * L1[i - 1] if i >= 2 else 0.0)) / L0[i - 1]
        d = p0[i] - l1 * l1 - l2 * l2
        if not d > 0.0:
            return False
        L0[i] = np.sqrt(d)
        L1[i] = l1
        L2[i] = l2
    return True


@njit(cache=True)
def _solve(L0, L1, L2, b, x):
    n = b.shape[0]
    z = np.empty(n)
    for i in range(n):
        v = b[i]
        if i >= 1:
            v -= L1[i] * z[i - 1]
        if i >= 2:
            v -= L2[i] * z[i - 2]
        z[i] = v / L0[i]
    for i in range(n - 1, -1, -1):
        v = z[i]
        if i + 1 < n:
            v -= L1[i + 1] * x[i + 1]
        if i + 2 < n:
            v -= L2[i + 2] * x[i + 2]
        x[i] = v / L0[i]


@njit(cache=True)
def _precision(j, m, a_tt, a_st, a_ss, d0, d1, d2, e0, e1, p0, p1, p2):
    c = 2.0 - 2.0 * np.cos(2.0 * np.pi * j / m)
    for i in range(d0.shape[0]):
        p0[i] = a_tt * d0[i] + a_st * c * e0[i] + a_ss * c * c
        p1[i] = a_tt * d1[i] + a_st * c * e1[i]
        p2[i] = a_tt * d2[i]


@njit(cache=True)
def _ldl(p0, p1, p2, D, l1, l2):
    n = p0.shape[0]
    for i in range(n):
        a2 = p2[i] / D[i - 2] if i >= 2 else 0.0
        a1 = 0.0
        if i >= 1:
            a1 = (p1[i] - (a2 * l1[i - 1] * D[i - 2] if i >= 2 else 0.0)) / D[i - 1]
        d = p0[i] - a1 * a1 * (D[i - 1] if i >= 1 else 0.0) - a2 * a2 * (D[i - 2] if i >= 2 else 0.0)
        if not d > 0.0:
            return False
        D[i] = d
        l1[i] = a1
        l2[i] = a2
    return True


@njit(cache=True, fastmath=True)
def _kernel(kappa, m, a_tt, a_st, a_ss, d0, d1, d2, e0, e1, out):
    n = kappa.shape[0]
    p0 = np.empty(n)
    p1 = np.empty(n)
    p2 = np.empty(n)
    D = np.empty(n)
    # padded so that l1[i + 1], l2[i + 2] exist for every row i
    l1 = np.zeros(n + 2)
    l2 = np.zeros(n + 2)
    x0 = np.zeros(n + 2)
    x1 = np.zeros(n + 2)
    x2 = np.zeros(n + 2)
    cc = np.empty(n)
    ss = np.empty(n)
    out[:, :] = 0.0
    for j in range(1, m // 2 + 1):
        _precision(j, m, a_tt, a_st, a_ss, d0, d1, d2, e0, e1, p0, p1, p2)
        if not _ldl(p0, p1, p2, D, l1[:n], l2[:n]):
            return False
        w = (1.0 if 2 * j == m else 2.0) / m
        th = 2.0 * np.pi * j / m
        for i in range(n):
            cc[i] = np.cos(th * kappa[i])
            ss[i] = np.sin(th * kappa[i])
        x0[:] = 0.0
        x1[:] = 0.0
        x2[:] = 0.0
        # rows of the inverse X from the last; with P = L D L' (unit L):
        # X[i, k] = [i == k] / D[i] - l1[i+1] X[i+1, k] - l2[i+2] X[i+2, k],  k >= i,
        # where X[i+1, i] = X[i, i+1] and X[i+2, i] = X[i, i+2] by symmetry
        for i in range(n - 1, -1, -1):
            a = l1[i + 1]
            b = l2[i + 2]
            ci = w * cc[i]
            si = w * ss[i]
            # zero-based slices let the compiler vectorize
            v0 = x0[i + 1:n]
            v1 = x1[i + 1:n]
            v2 = x2[i + 1:n]
            c = cc[i + 1:n]
            sn = ss[i + 1:n]
            orow = out[i, i + 1:n]
            for k in range(v0.shape[0]):
                v = -a * v1[k] - b * v2[k]
                v0[k] = v
                orow[k] += v * (ci * c[k] + si * sn[k])
            v = 1.0 / D[i] - a * x0[i + 1] - b * x0[i + 2]
            x0[i] = v
            out[i, i] += v * (ci * cc[i] + si * ss[i])
            # row i + 1 is read at column i by row i - 1
            x1[i] = x0[i + 1]
            x0, x1, x2 = x2, x0, x1
    for i in range(n):
        for k in range(i):
            out[i, k] = out[k, i]
    return True


@njit(cache=True)
def _surface(kappa, m, a_tt, a_st, a_ss, d0, d1, d2, e0, e1, u, out):
    n = kappa.shape[0]
    p0 = np.empty(n)
    p1 = np.empty(n)
    p2 = np.empty(n)
    L0 = np.empty(n)
    L1 = np.empty(n)
    L2 = np.empty(n)
    bc = np.empty(n)
    bs = np.empty(n)
    xc = np.empty(n)
    xs = np.empty(n)
    for k in range(m):
        for t in range(n):
            out[k, t] = 0.0
    for j in range(1, m // 2 + 1):
        _precision(j, m, a_tt, a_st, a_ss, d0, d1, d2, e0, e1, p0, p1, p2)
        if not _factor(p0, p1, p2, L0, L1, L2):
            return False
        w = (1.0 if 2 * j == m else 2.0) / m
        th = 2.0 * np.pi * j / m
        for t in range(n):
            bc[t] = np.cos(th * kappa[t]) * u[t]
            bs[t] = np.sin(th * kappa[t]) * u[t]
        _solve(L0, L1, L2, bc, xc)
        _solve(L0, L1, L2, bs, xs)
        for k in range(m):
            ck = w * np.cos(th * k)
            sk = w * np.sin(th * k)
            for t in range(n):
                out[k, t] += ck * xc[t] + sk * xs[t]
    return True


MIN_SHIFT_RATIO = 1e-12


class IllConditionedPrior(np.linalg.LinAlgError):
    """The prior cannot be represented accurately in double precision."""


class CyclicPrior:
    """Prior of a zero-sum surface on ``cycle(m)`` with penalty weights ``lambdas``.

    ``kappa`` is the season node of each time index (length ``n``).
    """

    def __init__(self, m: int, kappa, lambdas, scale: float = 1.0):
        self.m = int(m)
        self.kappa = np.ascontiguousarray(kappa, dtype=np.int64)
        self.n = self.kappa.shape[0]
        l_tt, l_st, l_ss = (float(v) for v in lambdas)
        if not l_ss > 0:
            raise ValueError("the closed-form prior needs a positive season-direction weight")
        self.coef = (l_tt**2 / scale, l_st**2 / scale, l_ss**2 / scale)
        self.bands = gram_bands(self.n)
        ratio = self.shift_ratio()
        if ratio < MIN_SHIFT_RATIO:
            raise IllConditionedPrior(
                f"season-direction weight {l_ss:.3g} is too small next to the time-direction weights "
                f"({ratio:.2e} relative); it is lost to rounding, so increase it"
            )

    def shift_ratio(self) -> float:
        """Smallest ratio of the season-direction shift to the largest diagonal entry.

        The shift alone fixes the variance of surfaces that are constant in
        time; once it drops below rounding level of the diagonal that
        variance, and every quantity built on it, is meaningless.
        """
        a_tt, a_st, a_ss = self.coef
        d0, e0 = self.bands[0], self.bands[3]
        j = np.arange(1, self.m // 2 + 1)
        c = 2.0 - 2.0 * np.cos(2.0 * np.pi * j / self.m)
        top = a_tt * d0.max() + a_st * c * e0.max() + a_ss * c * c
        return float(np.min(a_ss * c * c / top))

    def covariance(self) -> np.ndarray:
        """``K[t, u]``: prior covariance of the observed surface values."""
        out = np.empty((self.n, self.n))
        if not _kernel(self.kappa, self.m, *self.coef, *self.bands, out):
            raise np.linalg.LinAlgError("seasonal precision is not positive definite")
        return out

    def surface(self, u) -> np.ndarray:
        """Full ``m x n`` surface ``Cov(S, observed values) @ u``."""
        out = np.empty((self.m, self.n))
        u = np.ascontiguousarray(u, dtype=float)
        if not _surface(self.kappa, self.m, *self.coef, *self.bands, u, out):
            raise np.linalg.LinAlgError("seasonal precision is not positive definite")
        return out
