"""Shared linear-algebra kernels: LSQR, finite differences, eigenvalue probe.

All functions here are pure and deterministic: repeated calls on the same
inputs return bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
import scipy.sparse as sp

__all__ = [
    "SparseMatrix",
    "LinearOperator",
    "LsqrResult",
    "lsqr_least_squares",
    "finite_difference_jacobian",
    "smallest_eigenvalue",
]

# Above this order the eigenvalue probe switches from dense LAPACK to a
# shifted power iteration (the probe is a certificate, not a hot path).
_DENSE_EIG_LIMIT = 2000


@dataclass(frozen=True)
class SparseMatrix:
    """Sparse matrix in compressed-row layout, with an optional symmetry tag.

    Thin wrapper over ``scipy.sparse.csr_array`` so callers get validated
    construction, ``(i, j, value)`` iteration and an explicit symmetric flag.
    """

    csr: sp.csr_array
    symmetric: bool = False

    @classmethod
    def from_coo(cls, rows, cols, values, shape, symmetric: bool = False) -> "SparseMatrix":
        """Build from triplets; duplicate (row, col) entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=float)
        if rows.shape != cols.shape or rows.shape != values.shape:
            raise ValueError("rows, cols and values must have identical shapes")
        if rows.size and (rows.min() < 0 or rows.max() >= shape[0]
                          or cols.min() < 0 or cols.max() >= shape[1]):
            raise ValueError("triplet index out of range")
        m = sp.coo_array((values, (rows, cols)), shape=shape).tocsr()
        m.sum_duplicates()
        return cls(m, symmetric=symmetric)

    @classmethod
    def from_dense(cls, dense, symmetric: bool = False) -> "SparseMatrix":
        return cls(sp.csr_array(np.asarray(dense, dtype=float)), symmetric=symmetric)

    @property
    def rows(self) -> int:
        return self.csr.shape[0]

    @property
    def cols(self) -> int:
        return self.csr.shape[1]

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def entries(self) -> Iterator[tuple[int, int, float]]:
        coo = self.csr.tocoo()
        yield from zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return self.csr @ v

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        return self.csr.T @ v

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def validate(self, sym_tol: float = 1e-12) -> None:
        """Check the stored invariants; raises ValueError on violation."""
        indices = self.csr.indices
        indptr = self.csr.indptr
        for i in range(self.rows):
            row_cols = indices[indptr[i]:indptr[i + 1]]
            if np.unique(row_cols).size != row_cols.size:
                raise ValueError(f"duplicate column index in row {i}")
        if self.symmetric:
            if self.rows != self.cols:
                raise ValueError("symmetric flag on a non-square matrix")
            asym = abs(self.csr - self.csr.T)
            if asym.nnz and asym.max() > sym_tol:
                raise ValueError("symmetric flag set but value(i,j) != value(j,i)")


@dataclass(frozen=True)
class LinearOperator:
    """Matrix-free linear map with explicit transpose application."""

    rows: int
    cols: int
    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_matrix(cls, m) -> "LinearOperator":
        """Wrap a dense array, scipy sparse matrix or SparseMatrix."""
        if isinstance(m, SparseMatrix):
            m = m.csr
        rows, cols = m.shape
        mt = m.T
        return cls(rows, cols, lambda v: m @ v, lambda v: mt @ v)


@dataclass
class LsqrResult:
    """Outcome of :func:`lsqr_least_squares`.

    ``atr_norm`` is the final normal-equations residual ``||A^T (A x - b)||``
    and ``target`` the threshold ``rel_tol * ||A^T b||`` it was tested against.
    """

    x: np.ndarray
    iterations: int
    converged: bool
    atr_norm: float
    target: float


def _normal_residual(a: LinearOperator, b: np.ndarray, x: np.ndarray) -> float:
    return float(np.linalg.norm(a.apply_transpose(a.apply(x) - b)))


def lsqr_least_squares(a: LinearOperator, b: np.ndarray,
                       rel_tol: float = 1e-12,
                       max_iter: int | None = None) -> LsqrResult:
    """Iteratively minimize ||A x - b|| with the Paige-Saunders LSQR recurrences.

    Starts from x = 0 (hence returns the minimum-norm minimizer for
    rank-deficient problems) and stops once the normal-equations residual
    satisfies ``||A^T (A x - b)|| <= rel_tol * ||A^T b||`` or ``max_iter``
    (default ``10 * a.cols``) is reached.  The cheap recurrence estimate of
    the residual is always confirmed by an explicit evaluation before the
    convergence flag is set.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 1 or b.size != a.rows:
        raise ValueError(f"b has length {b.size}, operator has {a.rows} rows")
    if not np.all(np.isfinite(b)):
        raise ValueError("b contains non-finite entries")
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    if max_iter is None:
        max_iter = 10 * a.cols

    x = np.zeros(a.cols)
    beta = float(np.linalg.norm(b))
    if beta == 0.0:
        return LsqrResult(x, 0, True, 0.0, 0.0)
    u = b / beta
    v = a.apply_transpose(u)
    alfa = float(np.linalg.norm(v))
    atb_norm = alfa * beta  # ||A^T b||
    target = rel_tol * atb_norm
    if alfa == 0.0:
        # b is orthogonal to the range of A: x = 0 is already optimal.
        return LsqrResult(x, 0, True, 0.0, 0.0)
    v = v / alfa
    w = v.copy()
    phibar = beta
    rhobar = alfa

    itn = 0
    check_level = target  # re-verify only after the estimate halves again
    arnorm_est = atb_norm
    # Stagnation guard: in finite precision the normal-equations residual
    # bottoms out near eps * kappa(A); stop once a long window brings no
    # meaningful improvement instead of spinning until max_iter.
    window = 250
    best = atb_norm
    best_at_checkpoint = atb_norm
    while itn < max_iter:
        itn += 1
        u = a.apply(v) - alfa * u
        beta = float(np.linalg.norm(u))
        if beta > 0.0:
            u = u / beta
            v = a.apply_transpose(u) - beta * v
            alfa = float(np.linalg.norm(v))
            if alfa > 0.0:
                v = v / alfa
        rho = float(np.hypot(rhobar, beta))
        c = rhobar / rho
        s = beta / rho
        theta = s * alfa
        rhobar = -c * alfa
        phi = c * phibar
        phibar = s * phibar
        x += (phi / rho) * w
        w = v - (theta / rho) * w
        arnorm_est = phibar * alfa * abs(c)
        best = min(best, arnorm_est)
        if arnorm_est <= check_level:
            atr = _normal_residual(a, b, x)
            if atr <= target:
                return LsqrResult(x, itn, True, atr, target)
            check_level = 0.5 * arnorm_est
        if itn % window == 0:
            if best > 0.99 * best_at_checkpoint:
                break
            best_at_checkpoint = best
        if beta == 0.0 or alfa == 0.0:  # exact bidiagonalization breakdown
            break

    atr = _normal_residual(a, b, x)
    return LsqrResult(x, itn, atr <= target, atr, target)


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray],
                               x: np.ndarray,
                               step: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``.

    Column j is ``(f(x + h e_j) - f(x - h e_j)) / (2 h)`` with
    ``h = 1e-6 * (1 + ||x||_inf)`` unless ``step`` is given.  This is the
    testing oracle for every analytic derivative in the package.
    """
    x = np.asarray(x, dtype=float)
    if step is None:
        step = 1e-6 * (1.0 + (np.abs(x).max() if x.size else 0.0))
    if step <= 0:
        raise ValueError("step must be positive")
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    jac = np.empty((f0.size, x.size))
    e = np.zeros_like(x)
    for j in range(x.size):
        e[j] = step
        fp = np.atleast_1d(np.asarray(f(x + e), dtype=float))
        fm = np.atleast_1d(np.asarray(f(x - e), dtype=float))
        e[j] = 0.0
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError("f produced non-finite values near x")
        jac[:, j] = (fp - fm) / (2.0 * step)
    return jac


def _power_iteration_smallest(matvec: Callable[[np.ndarray], np.ndarray],
                              n: int, shift: float,
                              tol: float = 1e-13, max_iter: int = 20000) -> float:
    # Largest eigenvalue of (shift*I - M) via power iteration; deterministic start.
    rng = np.random.default_rng(0)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    lam = 0.0
    for _ in range(max_iter):
        z = shift * q - matvec(q)
        nz = np.linalg.norm(z)
        if nz == 0.0:  # M == shift*I
            return shift
        q_next = z / nz
        lam_next = float(q_next @ (shift * q_next - matvec(q_next)))
        if abs(lam_next - lam) <= tol * max(1.0, abs(shift)):
            lam = lam_next
            break
        lam, q = lam_next, q_next
    return shift - lam


def smallest_eigenvalue(m) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    Accepts a dense array or a :class:`SparseMatrix`.  Dense symmetric
    tridiagonalization (LAPACK) is used up to order 2000; above that a
    shifted power iteration on the operator is used instead.
    """
    if isinstance(m, SparseMatrix):
        n = m.rows
        if m.rows != m.cols:
            raise ValueError("matrix must be square")
        asym = abs(m.csr - m.csr.T)
        if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(m.csr).max()):
            raise ValueError("matrix is not symmetric")
        if n <= _DENSE_EIG_LIMIT:
            return float(np.linalg.eigvalsh(m.to_dense())[0])
        shift = float(abs(m.csr).sum(axis=1).max())  # Gershgorin bound
        return _power_iteration_smallest(m.matvec, n, shift)

    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    scale = max(1.0, float(np.abs(m).max()) if m.size else 0.0)
    if m.size and float(np.abs(m - m.T).max()) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    n = m.shape[0]
    if n == 0:
        raise ValueError("empty matrix")
    if n <= _DENSE_EIG_LIMIT:
        return float(np.linalg.eigvalsh(m)[0])
    shift = float(np.abs(m).sum(axis=1).max())
    return _power_iteration_smallest(lambda v: m @ v, n, shift)
