"""Sparse matrix helpers and the normal-equations solver.

Matrices are ``scipy.sparse.csr_array`` in canonical form: duplicate
entries summed, column indices sorted within each row.  The solver
factorizes ``X'X`` once with a fill-reducing ordering and reuses the
factor for the solution, leverages and covariance diagonals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

__all__ = [
    "RankDeficiencyError",
    "LinearSolveReport",
    "NormalFactor",
    "from_triplets",
    "matvec",
    "normal_equations_solve",
    "columnwise_inverse_diagonal",
    "dump_triplets",
    "load_triplets",
]

PIVOT_TOL = 1e-12
GRADIENT_TOL = 1e-8


class RankDeficiencyError(ValueError):
    """The stacked system does not have full column rank."""


def from_triplets(nrows, ncols, rows, cols, vals) -> sp.csr_array:
    """Canonical CSR matrix from ``(row, col, value)`` triplets; duplicates are summed."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    if not (len(rows) == len(cols) == len(vals)):
        raise ValueError("triplet arrays must have equal length")
    if len(rows) and (rows.min() < 0 or rows.max() >= nrows or cols.min() < 0 or cols.max() >= ncols):
        raise IndexError(f"triplet index outside a {nrows}x{ncols} matrix")
    M = sp.coo_array((vals, (rows, cols)), shape=(nrows, ncols)).tocsr()
    M.sum_duplicates()
    M.sort_indices()
    return M


def matvec(M, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != M.shape[1]:
        raise ValueError(f"cannot multiply a {M.shape[0]}x{M.shape[1]} matrix by a vector of length {v.shape[0]}")
    return sp.csr_array(M) @ v


def dump_triplets(M, path) -> None:
    """Write ``row col value`` lines (17 significant digits), header ``nrows ncols``."""
    C = sp.csr_array(M).tocoo()
    order = np.lexsort((C.col, C.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{C.shape[0]} {C.shape[1]}\n")
        for i in order:
            fh.write(f"{C.row[i]} {C.col[i]} {C.data[i]:.17g}\n")


def load_triplets(path) -> sp.csr_array:
    with open(path, encoding="utf-8") as fh:
        nrows, ncols = (int(x) for x in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    if data.size == 0:
        return from_triplets(nrows, ncols, [], [], [])
    return from_triplets(nrows, ncols, data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2])


@dataclass
class LinearSolveReport:
    solution: np.ndarray
    residual_norm: float
    gradient_norm: float
    method: str
    stats: dict = field(default_factory=dict)
    condition_warning: bool = False


class NormalFactor:
    """Factorization of ``X'X`` (optionally weighted) shared by all solves.

    Parameters
    ----------
    X : sparse matrix
        Stacked design.
    weights : array, optional
        Row weights ``w``; the factorized matrix is then ``X' diag(w) X``.
    max_factor_nnz : int, optional
        If the factor needs more stored entries than this, fall back to
        preconditioned conjugate gradients on the normal equations.
    """

    def __init__(self, X, weights=None, *, max_factor_nnz: int | None = None, cg_tol: float = 1e-12):
        X = sp.csr_array(X)
        self.X = X
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        Xw = X if weights is None else sp.csr_array(sp.diags_array(self.weights) @ X)
        A = sp.csc_array(X.T @ Xw)
        A.sum_duplicates()
        self.A = A
        self.ncols = A.shape[0]
        self.cg_tol = cg_tol
        diag = A.diagonal()
        dmax = float(diag.max()) if self.ncols else 0.0
        if self.ncols == 0:
            raise ValueError("empty design")
        zero = np.flatnonzero(diag <= PIVOT_TOL * max(dmax, 1.0))
        if len(zero):
            raise RankDeficiencyError(
                f"column {zero[0]} of the design is empty; some smoothing parameter is zero "
                "or too small for the components to be identifiable"
            )
        self._lu = None
        self.method = "cholesky"
        try:
            lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:  # exactly singular
            raise RankDeficiencyError(
                f"normal equations are singular ({exc}); some smoothing parameter is zero "
                "or too small for the components to be identifiable"
            ) from None
        pivots = np.abs(lu.U.diagonal())
        if pivots.min() <= PIVOT_TOL * dmax:
            raise RankDeficiencyError(
                f"normal equations are rank deficient (pivot {pivots.min():.3g} vs scale {dmax:.3g}); "
                "some smoothing parameter is zero or too small for the components to be identifiable"
            )
        self.factor_nnz = lu.L.nnz + lu.U.nnz
        self.condition_estimate = float(dmax / pivots.min())
        if max_factor_nnz is not None and self.factor_nnz > max_factor_nnz:
            log.info("factor has %d entries (cap %d); using conjugate gradients", self.factor_nnz, max_factor_nnz)
            self.method = "cg"
            self._jacobi = 1.0 / diag
        else:
            self._lu = lu

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``(X'WX) z = b`` for one or more right-hand sides."""
        b = np.asarray(b, dtype=float)
        if self._lu is not None:
            return self._lu.solve(b)
        if b.ndim == 2:
            return np.column_stack([self.solve(b[:, j]) for j in range(b.shape[1])])
        M = spla.LinearOperator(self.A.shape, matvec=lambda v: self._jacobi * v)
        z, info = spla.cg(self.A, b, rtol=self.cg_tol, atol=0.0, M=M, maxiter=20 * self.ncols)
        if info != 0:
            raise RuntimeError(f"conjugate gradients did not converge (info={info})")
        return z

    def lstsq(self, y_plus: np.ndarray) -> np.ndarray:
        y_plus = np.asarray(y_plus, dtype=float)
        rhs = self.X.T @ (y_plus if self.weights is None else self.weights * y_plus)
        return self.solve(rhs)

    def leverages(self, rows, *, block: int = 256) -> np.ndarray:
        """``x_i' (X'WX)^{-1} x_i`` for the requested rows of ``X`` (one solve per row)."""
        rows = np.asarray(rows, dtype=np.int64)
        out = np.empty(len(rows))
        XT = sp.csc_array(self.X.T)
        for start in range(0, len(rows), block):
            idx = rows[start:start + block]
            B = XT[:, idx].toarray()
            Z = self.solve(B)
            out[start:start + block] = np.einsum("ij,ij->j", B, Z)
        if self.weights is not None:
            out *= self.weights[rows]
        return out

    def quadratic_diagonal(self, L) -> np.ndarray:
        """Diagonal of ``L (X'WX)^{-1} L'`` for a sparse ``L`` (rows are linear functionals)."""
        L = sp.csr_array(L)
        out = np.empty(L.shape[0])
        LT = sp.csc_array(L.T)
        block = 256
        for start in range(0, L.shape[0], block):
            B = LT[:, start:start + block].toarray()
            Z = self.solve(B)
            out[start:start + block] = np.einsum("ij,ij->j", B, Z)
        return out


def _report(X, y_plus, eta, factor) -> LinearSolveReport:
    r = X @ eta - y_plus
    g = X.T @ r
    scale = 1.0 + float(np.abs(X.T @ y_plus).max(initial=0.0))
    gnorm = float(np.abs(g).max(initial=0.0))
    return LinearSolveReport(
        solution=eta,
        residual_norm=float(np.linalg.norm(r)),
        gradient_norm=gnorm,
        method=factor.method,
        stats={"factor_nnz": factor.factor_nnz, "condition_estimate": factor.condition_estimate},
        condition_warning=gnorm > GRADIENT_TOL * scale or factor.condition_estimate > 1e14,
    )


def normal_equations_solve(X, y_plus, *, max_factor_nnz: int | None = None) -> LinearSolveReport:
    """Least-squares solution of ``X eta ~ y_plus`` through the normal equations."""
    X = sp.csr_array(X)
    y_plus = np.asarray(y_plus, dtype=float)
    if y_plus.shape != (X.shape[0],):
        raise ValueError(f"right-hand side has length {y_plus.shape[0]}, design has {X.shape[0]} rows")
    factor = NormalFactor(X, max_factor_nnz=max_factor_nnz)
    eta = factor.lstsq(y_plus)
    return _report(X, y_plus, eta, factor)


def columnwise_inverse_diagonal(X, rows) -> np.ndarray:
    """Leverages ``h_ii = x_i'(X'X)^{-1}x_i`` for the given rows."""
    return NormalFactor(X).leverages(rows)
