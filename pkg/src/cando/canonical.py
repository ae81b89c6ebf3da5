"""Canonical-dual machinery for quadratic geometric operators.

A problem ``min P(x) = V(Lambda(x)) + 0.5 x^T A x - c^T x`` with the quadratic
operator ``Lambda_k(x) = 0.5 x^T C_k x - x^T b_k`` and convex ``V`` has the
saddle (total complementarity) function

    Xi(x, s) = 0.5 x^T G(s) x - F(s)^T x - V*(s),
    G(s) = A + sum_k s_k C_k,      F(s) = c + sum_k s_k b_k.

Saddle points of Xi with ``G(s) >= 0`` recover global minimizers of P with no
duality gap, which is what :func:`certify_global` checks at runtime.

Small problems store the ``C_k`` stacked densely; large ones (sensor-network
localization) plug in fused assembly callbacks instead so the ``C_k`` are
never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import SingularGError
from .numerics import SparseMatrix, smallest_eigenvalue

__all__ = [
    "QuadraticVStar",
    "FusedAssembly",
    "QuadraticCanonicalProblem",
    "SaddleCandidate",
    "GlobalCertificate",
    "lambda_eval",
    "g_of_sigma",
    "f_of_sigma",
    "xi_value",
    "gamma_residual",
    "primal_value",
    "dual_value",
    "recover_primal",
    "certify_global",
]


@dataclass(frozen=True)
class QuadraticVStar:
    """Conjugate family ``V*(s) = 0.5 ||s||^2 + q^T s`` (identity Hessian).

    Its inverse Legendre transform is ``V(xi) = 0.5 ||xi - q||^2`` with
    duality map ``s = xi - q``; both directions are exposed so tests can
    check the Fenchel-Young identity.
    """

    q: np.ndarray

    def value(self, sigma: np.ndarray) -> float:
        return float(0.5 * sigma @ sigma + self.q @ sigma)

    def grad(self, sigma: np.ndarray) -> np.ndarray:
        return sigma + self.q

    def hess(self, sigma: np.ndarray) -> np.ndarray:
        return np.eye(self.q.size)

    def conjugate_value(self, xi: np.ndarray) -> float:
        d = xi - self.q
        return float(0.5 * d @ d)

    def dual_map(self, xi: np.ndarray) -> np.ndarray:
        """The gradient of V, i.e. the sigma matched to xi."""
        return xi - self.q


@dataclass(frozen=True)
class FusedAssembly:
    """Assembly callbacks replacing the stacked ``C_k`` for large problems.

    ``g_of`` returns G(sigma) as something supporting ``@`` (typically a
    :class:`~cando.numerics.SparseMatrix` is wrapped by the caller),
    ``cross`` returns the n-by-m block of second derivatives of Xi in
    (x, sigma), and ``grad_x`` evaluates ``G(sigma) x - F(sigma)`` without
    assembling G.
    """

    g_of: Callable[[np.ndarray], np.ndarray]
    f_of: Callable[[np.ndarray], np.ndarray]
    lam: Callable[[np.ndarray], np.ndarray]
    cross: Callable[[np.ndarray], np.ndarray]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class QuadraticCanonicalProblem:
    """Problem data for the quadratic canonical transformation.

    Either ``C``/``b`` (stacked dense tensors) or ``fused`` must be given.
    ``v_of_xi`` is only needed by :func:`primal_value` and the duality-gap
    part of :func:`certify_global`.
    """

    n: int
    m: int
    A: np.ndarray
    c: np.ndarray
    C: np.ndarray | None
    b: np.ndarray | None
    vstar: QuadraticVStar
    v_of_xi: Callable[[np.ndarray], float] | None = None
    fused: FusedAssembly | None = None

    def __post_init__(self):
        if self.A.shape != (self.n, self.n):
            raise ValueError("A must be n-by-n")
        if self.c.shape != (self.n,):
            raise ValueError("c must have length n")
        if np.abs(self.A - self.A.T).max(initial=0.0) > 1e-12:
            raise ValueError("A must be symmetric")
        if self.C is None and self.fused is None:
            raise ValueError("provide stacked C/b tensors or fused callbacks")
        if self.C is not None:
            if self.C.shape != (self.m, self.n, self.n):
                raise ValueError("C must be m stacked n-by-n matrices")
            if self.b is None or self.b.shape != (self.m, self.n):
                raise ValueError("b must be m stacked n-vectors")
            if self.m and np.abs(self.C - np.transpose(self.C, (0, 2, 1))).max() > 1e-12:
                raise ValueError("every C_k must be symmetric")

    @classmethod
    def from_tensors(cls, A, c, C, b, vstar, v_of_xi=None) -> "QuadraticCanonicalProblem":
        A = np.asarray(A, dtype=float)
        c = np.asarray(c, dtype=float)
        C = np.asarray(C, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(n=A.shape[0], m=C.shape[0], A=A, c=c, C=C, b=b,
                   vstar=vstar, v_of_xi=v_of_xi)


@dataclass(frozen=True)
class SaddleCandidate:
    """A primal/dual pair to be tested for stationarity and optimality."""

    x: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.sigma))):
            raise ValueError("candidate entries must be finite")


@dataclass(frozen=True)
class GlobalCertificate:
    """Runtime check of the global-optimality conditions at (x, sigma)."""

    stationary: bool
    cone: bool
    gap: float | None
    gamma_sq: float
    g_min_eig: float

    @property
    def is_global(self) -> bool:
        return self.stationary and self.cone


def _check_x(p: QuadraticCanonicalProblem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise ValueError(f"x must have length {p.n}, got shape {x.shape}")
    return x


def _check_sigma(p: QuadraticCanonicalProblem, sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (p.m,):
        raise ValueError(f"sigma must have length {p.m}, got shape {sigma.shape}")
    return sigma


def lambda_eval(p: QuadraticCanonicalProblem, x) -> np.ndarray:
    """Evaluate the quadratic operator: entry k is 0.5 x^T C_k x - x^T b_k."""
    x = _check_x(p, x)
    if p.fused is not None:
        return p.fused.lam(x)
    return 0.5 * np.einsum("kij,i,j->k", p.C, x, x) - p.b @ x


def g_of_sigma(p: QuadraticCanonicalProblem, sigma):
    """Assemble G(sigma) = A + sum_k sigma_k C_k.

    Dense array for tensor-backed problems; fused problems return whatever
    their callback produces (a SparseMatrix for the SNL assembly).
    """
    sigma = _check_sigma(p, sigma)
    if p.fused is not None:
        return p.fused.g_of(sigma)
    return p.A + np.tensordot(sigma, p.C, axes=1)


def f_of_sigma(p: QuadraticCanonicalProblem, sigma) -> np.ndarray:
    """Assemble F(sigma) = c + sum_k sigma_k b_k."""
    sigma = _check_sigma(p, sigma)
    if p.fused is not None:
        return p.fused.f_of(sigma)
    return p.c + sigma @ p.b


def xi_value(p: QuadraticCanonicalProblem, x, sigma) -> float:
    """Value of the saddle function Xi(x, sigma).

    Evaluated as ``sigma^T Lambda(x) - V*(sigma) + 0.5 x^T A x - c^T x``,
    which is identical to the ``0.5 x^T G x - F^T x - V*`` form but reuses
    the fused Lambda for large problems.
    """
    x = _check_x(p, x)
    sigma = _check_sigma(p, sigma)
    return float(sigma @ lambda_eval(p, x) - p.vstar.value(sigma)
                 + 0.5 * x @ (p.A @ x) - p.c @ x)


def gamma_residual(p: QuadraticCanonicalProblem, x, sigma) -> np.ndarray:
    """Saddle-point residual: (grad_x Xi; -grad_sigma Xi), length n + m.

    The top block is ``G(sigma) x - F(sigma)``; the bottom block is
    ``grad V*(sigma) - Lambda(x)``.  Zero exactly at stationary pairs.
    """
    x = _check_x(p, x)
    sigma = _check_sigma(p, sigma)
    if p.fused is not None and p.fused.grad_x is not None:
        top = p.fused.grad_x(x, sigma)
    else:
        g = g_of_sigma(p, sigma)
        gx = g.matvec(x) if isinstance(g, SparseMatrix) else g @ x
        top = gx - f_of_sigma(p, sigma)
    bottom = p.vstar.grad(sigma) - lambda_eval(p, x)
    return np.concatenate([top, bottom])


def primal_value(p: QuadraticCanonicalProblem, x) -> float:
    """P(x) = V(Lambda(x)) + 0.5 x^T A x - c^T x; needs the V oracle."""
    x = _check_x(p, x)
    if p.v_of_xi is None:
        raise ValueError("problem has no V oracle; primal_value unavailable")
    return float(p.v_of_xi(lambda_eval(p, x)) + 0.5 * x @ (p.A @ x) - p.c @ x)


def _pd_solve(p: QuadraticCanonicalProblem, sigma, tol: float):
    """Return (G, F, G^{-1} F) with a lambda_min guard; never forms G^{-1}."""
    g = g_of_sigma(p, sigma)
    if isinstance(g, SparseMatrix):
        g = g.to_dense()
    f = f_of_sigma(p, sigma)
    if smallest_eigenvalue(g) <= tol:
        raise SingularGError(
            "G(sigma) is not positive definite; sigma is outside the interior "
            "of the dual cone")
    try:
        cho = scipy.linalg.cho_factor(g, lower=True)
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
        raise SingularGError(str(exc)) from exc
    return g, f, scipy.linalg.cho_solve(cho, f)


def dual_value(p: QuadraticCanonicalProblem, sigma, tol: float = 1e-10) -> float:
    """Dual value -0.5 F^T G^{-1} F - V*(sigma) on the region G(sigma) > 0."""
    sigma = _check_sigma(p, sigma)
    _, f, ginv_f = _pd_solve(p, sigma, tol)
    return float(-0.5 * f @ ginv_f - p.vstar.value(sigma))


def recover_primal(p: QuadraticCanonicalProblem, sigma, tol: float = 1e-10) -> np.ndarray:
    """Primal point matched to sigma: the solution of G(sigma) x = F(sigma)."""
    sigma = _check_sigma(p, sigma)
    return _pd_solve(p, sigma, tol)[2]


def certify_global(p: QuadraticCanonicalProblem, x, sigma, tol: float = 1e-8) -> GlobalCertificate:
    """Check the two global-optimality conditions at (x, sigma).

    ``stationary`` is ``||Gamma(x, sigma)||^2 < tol``; ``cone`` is
    ``lambda_min(G(sigma)) >= -tol``.  When the problem carries a V oracle
    the primal/saddle duality gap ``|P(x) - Xi(x, sigma)|`` is reported too.
    """
    x = _check_x(p, x)
    sigma = _check_sigma(p, sigma)
    gamma_sq = float(np.sum(gamma_residual(p, x, sigma) ** 2))
    g = g_of_sigma(p, sigma)
    if isinstance(g, SparseMatrix):
        g_min = smallest_eigenvalue(g)
    else:
        g_min = smallest_eigenvalue(np.atleast_2d(g))
    gap = None
    if p.v_of_xi is not None:
        gap = abs(primal_value(p, x) - xi_value(p, x, sigma))
    return GlobalCertificate(stationary=gamma_sq < tol,
                             cone=g_min >= -tol,
                             gap=gap,
                             gamma_sq=gamma_sq,
                             g_min_eig=float(g_min))
