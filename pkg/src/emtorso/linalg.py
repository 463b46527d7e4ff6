"""Sparse linear solvers: Jacobi PCG with nullspace projection, cached direct factorizations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray
from scipy.sparse.csgraph import connected_components


class SolverError(RuntimeError):
    """A linear or nonlinear solve failed to converge."""


@dataclass
class SolveInfo:
    iterations: int
    residual: float  # relative to ||b||
    converged: bool


def component_nullspace(A: sp.spmatrix, active: NDArray | None = None) -> NDArray:
    """Orthonormal indicator vectors of the connected components of A's graph.

    For a pure-Neumann stiffness matrix these span the nullspace (constants per component).
    ``active`` restricts to a subset of rows/cols; inactive dofs get zero columns.
    """
    n = A.shape[0]
    idx = np.arange(n) if active is None else np.flatnonzero(active)
    sub = A[idx][:, idx]
    ncomp, lab = connected_components(sub != 0, directed=False)
    Z = np.zeros((n, ncomp))
    Z[idx, lab] = 1.0
    return Z / np.sqrt(Z.sum(axis=0))


def pcg(A, b: NDArray, x0: NDArray | None = None, tol: float = 1e-10, maxiter: int | None = None,
        nullspace: NDArray | None = None, precond: NDArray | None = None) -> tuple[NDArray, SolveInfo]:
    """Jacobi-preconditioned CG; with ``nullspace`` (orthonormal columns, A Z = 0) the
    iteration runs in the orthogonal complement and returns the minimum-norm solution.
    """
    n = len(b)
    maxiter = maxiter or max(100, 10 * n)
    if precond is None:
        d = A.diagonal() if sp.issparse(A) else np.diag(A)
        precond = np.where(np.abs(d) > 0, 1.0 / np.where(d == 0, 1, d), 0.0)

    def proj(v):
        return v if nullspace is None else v - nullspace @ (nullspace.T @ v)

    b = proj(np.asarray(b, float))
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else proj(np.array(x0, float))
    if bnorm == 0:
        return np.zeros(n), SolveInfo(0, 0.0, True)
    r = proj(b - A @ x)
    z = proj(precond * r)
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > tol and it < maxiter:
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if nullspace is not None and it % 50 == 49:
            r = proj(b - A @ x)
        z = proj(precond * r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        res = np.linalg.norm(r) / bnorm
    x = proj(x)
    res = np.linalg.norm(proj(b - A @ x)) / bnorm
    return x, SolveInfo(it, res, res <= max(tol, 1e-14) * 10)


class DirectSolver:
    """LU factorization of a fixed sparse matrix, reusable across right-hand sides."""

    def __init__(self, A: sp.spmatrix):
        try:
            self._lu = spla.splu(sp.csc_matrix(A))
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"sparse factorization failed: {exc}") from exc

    def solve(self, b: NDArray) -> NDArray:
        x = self._lu.solve(np.asarray(b, float))
        if not np.all(np.isfinite(x)):
            raise SolverError("direct solve produced non-finite values")
        return x


def solve_dirichlet(A: sp.spmatrix, b: NDArray, fixed: NDArray, values: NDArray,
                    solver: DirectSolver | None = None) -> NDArray:
    """Solve A x = b with x[fixed] = values by elimination. ``solver`` may hold a
    factorization of the free-free block from an earlier call."""
    A = sp.csr_matrix(A)
    n = A.shape[0]
    mask = np.zeros(n, bool)
    mask[fixed] = True
    free = np.flatnonzero(~mask)
    x = np.zeros(n) if b.ndim == 1 else np.zeros((n,) + b.shape[1:])
    x[fixed] = values
    rhs = b[free] - A[free][:, fixed] @ x[fixed]
    solver = solver or DirectSolver(A[free][:, free])
    x[free] = solver.solve(rhs)
    return x
