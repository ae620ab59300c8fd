"""Sparse storage and the iterative solver for the collocation systems.

Storage and matvec are thin wrappers over scipy's CSR format; the BiCGStab
loop is written out explicitly so the reduction order is fixed (identical
inputs give bit-identical solutions) and breakdown handling follows the
contract: a non-converged result is returned, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class AssemblyError(ValueError):
    """Raised for out-of-range indices or shape mismatches during assembly."""


class PreconditionerError(RuntimeError):
    """Raised when the requested preconditioner cannot be formed."""


@dataclass
class IterativeStats:
    """Outcome of one iterative solve."""

    iterations: int
    residual: float
    converged: bool
    history: list[float] | None = field(default=None, repr=False)


class SparseSystem:
    """Square CSR matrix plus right-hand side."""

    def __init__(self, matrix: sp.csr_matrix, rhs: np.ndarray | None = None):
        matrix = matrix.tocsr()
        if matrix.shape[0] != matrix.shape[1]:
            raise AssemblyError(f"matrix must be square, got {matrix.shape}")
        matrix.sum_duplicates()
        matrix.sort_indices()
        self.matrix = matrix
        self.n = matrix.shape[0]
        self.rhs = np.zeros(self.n) if rhs is None else np.asarray(rhs, dtype=float)
        if self.rhs.shape != (self.n,):
            raise AssemblyError("rhs length must equal matrix dimension")

    @property
    def row_offsets(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def col_ids(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self.matrix.data


def assemble(n: int, triplets, rhs: np.ndarray | None = None) -> SparseSystem:
    """Build a SparseSystem from (row, col, value) entries.

    Accepts an iterable of triples or a (rows, cols, values) array triple.
    Duplicate (row, col) entries are summed; rows come out sorted.
    """
    if isinstance(triplets, tuple) and len(triplets) == 3:
        rows, cols, vals = (np.asarray(a) for a in triplets)
    else:
        trip = list(triplets)
        if trip:
            rows, cols, vals = (np.asarray(a) for a in zip(*trip))
        else:
            rows = cols = np.zeros(0, dtype=int)
            vals = np.zeros(0)
    if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= n):
        raise AssemblyError(f"triplet index out of range for n={n}")
    mat = sp.coo_matrix((vals.astype(float), (rows, cols)), shape=(n, n)).tocsr()
    return SparseSystem(mat, rhs)


def matvec(a, x: np.ndarray) -> np.ndarray:
    """y = A x for a SparseSystem or raw CSR matrix."""
    mat = a.matrix if isinstance(a, SparseSystem) else a
    x = np.asarray(x, dtype=float)
    if x.shape != (mat.shape[1],):
        raise AssemblyError(f"vector length {x.shape} incompatible with {mat.shape}")
    return mat @ x


def _jacobi(mat: sp.csr_matrix):
    d = mat.diagonal()
    if np.any(d == 0.0):
        bad = int(np.where(d == 0.0)[0][0])
        raise PreconditionerError(f"zero diagonal entry at row {bad}")
    inv = 1.0 / d
    return lambda r: inv * r


class ILU0:
    """Incomplete LU with zero fill, on the matrix's own sparsity pattern."""

    def __init__(self, mat: sp.csr_matrix):
        mat = mat.tocsr().copy()
        mat.sort_indices()
        n = mat.shape[0]
        indptr, indices, data = mat.indptr, mat.indices, mat.data
        diag_pos = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            cols = indices[indptr[i]:indptr[i + 1]]
            hit = np.searchsorted(cols, i)
            if hit < len(cols) and cols[hit] == i:
                diag_pos[i] = indptr[i] + hit
        if np.any(diag_pos < 0):
            raise PreconditionerError("matrix pattern lacks a diagonal entry")

        # IKJ variant restricted to the existing pattern
        col_lookup = [dict(zip(indices[indptr[i]:indptr[i + 1]],
                               range(indptr[i], indptr[i + 1]))) for i in range(n)]
        for i in range(n):
            for pos in range(indptr[i], indptr[i + 1]):
                kcol = indices[pos]
                if kcol >= i:
                    break
                pivot = data[diag_pos[kcol]]
                if pivot == 0.0:
                    raise PreconditionerError(f"zero pivot at row {kcol}")
                lik = data[pos] / pivot
                data[pos] = lik
                row_k = col_lookup[kcol]
                for pos2 in range(pos + 1, indptr[i + 1]):
                    jcol = indices[pos2]
                    hit = row_k.get(jcol)
                    if hit is not None and jcol > kcol:
                        data[pos2] -= lik * data[hit]
        self._mat = mat
        self._diag_pos = diag_pos

    def __call__(self, r: np.ndarray) -> np.ndarray:
        indptr, indices, data = self._mat.indptr, self._mat.indices, self._mat.data
        n = self._mat.shape[0]
        y = np.zeros(n)
        for i in range(n):  # forward, unit lower triangle
            s = r[i]
            for pos in range(indptr[i], indptr[i + 1]):
                j = indices[pos]
                if j >= i:
                    break
                s -= data[pos] * y[j]
            y[i] = s
        x = np.zeros(n)
        for i in range(n - 1, -1, -1):  # backward, upper triangle
            s = y[i]
            dpos = self._diag_pos[i]
            for pos in range(dpos + 1, indptr[i + 1]):
                s -= data[pos] * x[indices[pos]]
            x[i] = s / data[dpos]
        return x


def _make_preconditioner(mat: sp.csr_matrix, kind: str | None):
    if kind in (None, "none"):
        return lambda r: r
    if kind == "jacobi":
        return _jacobi(mat)
    if kind == "ilu0":
        return ILU0(mat)
    raise ValueError(f"unknown preconditioner {kind!r}")


def solve_bicgstab(a, b: np.ndarray | None = None, x0: np.ndarray | None = None,
                   tol: float = 1e-8, max_iter: int | None = None,
                   preconditioner: str | None = "jacobi",
                   record_history: bool = False):
    """BiCGStab with diagonal (default) or ILU(0) preconditioning.

    Convergence means ||b - A x||_2 <= tol * ||b||_2, verified on the true
    residual before reporting. Breakdown or hitting max_iter returns the
    current iterate with converged=False; the caller decides what to do.
    """
    if isinstance(a, SparseSystem):
        mat = a.matrix
        if b is None:
            b = a.rhs
    else:
        mat = a.tocsr() if not sp.isspmatrix_csr(a) else a
    if b is None:
        raise AssemblyError("right-hand side required")
    b = np.asarray(b, dtype=float)
    n = mat.shape[0]
    if not np.all(np.isfinite(b)):
        raise AssemblyError("right-hand side contains non-finite values")
    if max_iter is None:
        max_iter = 10 * n
    msolve = _make_preconditioner(mat, preconditioner)

    bnorm = float(np.linalg.norm(b))
    history: list[float] | None = [] if record_history else None
    if bnorm == 0.0:
        return np.zeros(n), IterativeStats(0, 0.0, True, history)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - mat @ x
    rnorm = float(np.linalg.norm(r))
    if history is not None:
        history.append(rnorm)
    if rnorm <= tol * bnorm:
        return x, IterativeStats(0, rnorm, True, history)

    rtilde = r.copy()
    rho_prev = alpha = omega = 1.0
    v = np.zeros(n)
    p = np.zeros(n)
    tiny = np.finfo(float).tiny
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        rho = float(rtilde @ r)
        if abs(rho) < tiny or abs(omega) < tiny:
            break  # breakdown: return current iterate, not converged
        beta = (rho / rho_prev) * (alpha / omega)
        p = r + beta * (p - omega * v)
        phat = msolve(p)
        v = mat @ phat
        denom = float(rtilde @ v)
        if abs(denom) < tiny:
            break
        alpha = rho / denom
        s = r - alpha * v
        snorm = float(np.linalg.norm(s))
        if snorm <= tol * bnorm:
            x = x + alpha * phat
            rnorm = snorm
            if history is not None:
                history.append(rnorm)
            converged = True
            break
        shat = msolve(s)
        t = mat @ shat
        tt = float(t @ t)
        if tt == 0.0:
            break
        omega = float(t @ s) / tt
        x = x + alpha * phat + omega * shat
        r = s - omega * t
        rho_prev = rho
        rnorm = float(np.linalg.norm(r))
        if history is not None:
            history.append(rnorm)
        if not np.isfinite(rnorm) or rnorm > 1e12 * bnorm:
            break  # diverging: bail out as non-converged
        if rnorm <= tol * bnorm:
            converged = True
            break

    true_res = float(np.linalg.norm(b - mat @ x))
    converged = converged and true_res <= tol * bnorm * (1.0 + 1e-12)
    return x, IterativeStats(it, true_res, converged, history)
