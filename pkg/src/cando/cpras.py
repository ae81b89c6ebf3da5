"""CPRAS: interior-point potential reduction for SNL with box-relaxed duals.

Solves the saddle system Gamma(x, sigma) = 0 subject to sigma >= 0 by driving
the constrained-equations residual

    H_delta(x, sigma, lambda, w) = ( grad_x Xi
                                     -grad_sigma Xi - lambda
                                     w - sigma - delta
                                     w * lambda
                                     lambda )

to zero with damped Newton steps that stay interior (lambda, w > 0 and the
last three residual blocks positive), measured by the log-barrier potential
``eta * log ||H||^2 - sum log(b_i) - sum log(c_i) - sum log(d_i)``.  The
relaxation delta shrinks geometrically so the boundary solution sigma = 0 is
approached from the interior.

Sign conventions: with multipliers constrained to lambda >= 0, the KKT system
of the variational inequality carries the multiplier with a minus (matching
the matrix-cone system, where the same block is -grad_sigma Xi - grad_sigma
(L . G)); likewise the third block is the slack consistency of sigma + delta
>= 0.  Both flipped variants can be enabled for comparison but cannot support
active constraints (+lambda) or the boundary solution sigma = 0 (w - sigma +
delta).

Direction subproblems are linear least squares solved matrix-free with LSQR;
per-iteration cost is a handful of sparse matrix-vector products.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import BoundaryViolation, LineSearchFailure
from .numerics import LinearOperator, LsqrResult, lsqr_least_squares
from .report import IterationRecord, SolveReport, SolveStatus, write_trace_csv
from .snl import SnlInstance, rmsd as rmsd_of

__all__ = [
    "CprasParams",
    "CprasState",
    "HBlocks",
    "residual_h_delta",
    "jacobian_operator",
    "potential_value",
    "potential_gradient",
    "newton_direction",
    "line_search",
    "default_initial_state",
    "solve",
]

logger = logging.getLogger("cando.cpras")


@dataclass
class CprasParams:
    """Algorithm parameters; ``None`` means "derive from the instance".

    ``eta`` defaults to (n + 4m)/2 and must exceed 1.5 m so the potential
    identity u . grad p(u) = 2 eta - 3 m stays positive.  ``beta`` must stay
    below 1/3 for the descent guarantee.  ``literal_slack_sign`` flips the
    third residual block to ``w - sigma + delta``; the default sign is the
    slack of the relaxed constraint sigma + delta >= 0, which is the only
    variant consistent with the boundary solution sigma = 0.  Similarly
    ``literal_multiplier_sign`` flips the second block to ``-grad_sigma Xi
    + lambda``, which cannot hold with lambda >= 0 wherever the constraint
    activates; both flips exist for comparison runs only.

    ``adaptive_delta`` keeps the relaxation wall -delta strictly below the
    most negative dual iterate while still shrinking delta by gamma2
    whenever possible.  During the transient the duals overshoot downward;
    letting the wall cut into them pins slacks at zero, unbalances the
    complementarity block and destroys the descent property of the
    least-squares direction.  The limit behavior (delta -> 0 as sigma
    recovers) is unchanged.
    """

    eta: float | None = None
    delta0: float = 0.3
    gamma1: float = 0.01
    gamma2: float = 0.9
    beta: float = 0.1
    epsilon: float = 1e-10
    max_outer: int = 200
    max_backtracks: int = 60
    delta_floor: float = 1e-16
    lsqr_rel_tol: float = 1e-12
    lsqr_max_iter: int | None = 5000
    adaptive_delta: bool = True
    literal_slack_sign: bool = False
    literal_multiplier_sign: bool = False

    def __post_init__(self):
        if not (0 < self.gamma1 < 1 and 0 < self.gamma2 < 1):
            raise ValueError("gamma1 and gamma2 must lie in (0, 1)")
        if not (0 < self.beta < 1.0 / 3.0):
            raise ValueError("beta must lie in (0, 1/3)")
        if self.epsilon <= 0 or self.delta0 <= 0:
            raise ValueError("epsilon and delta0 must be positive")
        if self.max_outer < 1 or self.max_backtracks < 1:
            raise ValueError("iteration limits must be positive")

    def eta_for(self, inst: SnlInstance) -> float:
        eta = (inst.n + 4 * inst.m) / 2.0 if self.eta is None else self.eta
        if eta <= 1.5 * inst.m:
            raise ValueError(f"eta must exceed 1.5 m = {1.5 * inst.m}")
        return eta

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "CprasParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown solver parameter(s): {sorted(unknown)}")
        return cls(**doc)


@dataclass
class CprasState:
    """Primal-dual iterate z = (x, sigma, lambda, w) plus the current delta."""

    x: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    w: np.ndarray
    delta: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.sigma, self.lam, self.w])

    def stepped(self, d: np.ndarray, alpha: float) -> "CprasState":
        n, m = self.x.size, self.sigma.size
        return CprasState(x=self.x + alpha * d[:n],
                          sigma=self.sigma + alpha * d[n:n + m],
                          lam=self.lam + alpha * d[n + m:n + 2 * m],
                          w=self.w + alpha * d[n + 2 * m:],
                          delta=self.delta)

    def check_shapes(self, inst: SnlInstance) -> None:
        n, m = inst.n, inst.m
        if (self.x.shape, self.sigma.shape, self.lam.shape, self.w.shape) != \
                ((n,), (m,), (m,), (m,)):
            raise ValueError("state dimensions do not match the instance")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class HBlocks:
    """Residual of the constrained-equations operator, split by block."""

    a: np.ndarray  # (n + m,): gradient blocks of Xi, lambda folded in
    b: np.ndarray  # (m,): slack consistency w - sigma -+ delta
    c: np.ndarray  # (m,): complementarity w * lambda
    d: np.ndarray  # (m,): multipliers lambda

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.a, self.b, self.c, self.d])

    @property
    def norm_sq(self) -> float:
        return float(self.a @ self.a + self.b @ self.b
                     + self.c @ self.c + self.d @ self.d)


def _blocks(kernel, state: CprasState, params: CprasParams) -> HBlocks:
    grad_x = kernel.grad_x_xi(state.x, state.sigma)
    neg_grad_sigma = state.sigma + kernel.d2 - kernel.lambda_of(state.x)
    lam_sign = 1.0 if params.literal_multiplier_sign else -1.0
    a = np.concatenate([grad_x, neg_grad_sigma + lam_sign * state.lam])
    delta_term = state.delta if params.literal_slack_sign else -state.delta
    b = state.w - state.sigma + delta_term
    return HBlocks(a=a, b=b, c=state.w * state.lam, d=state.lam.copy())


def residual_h_delta(state: CprasState, inst: SnlInstance,
                     params: CprasParams | None = None) -> HBlocks:
    """Evaluate H_delta at the state.  Pure; no interior requirement."""
    state.check_shapes(inst)
    return _blocks(inst.kernel, state, params or CprasParams())


def gamma_squared(blocks: HBlocks, lam: np.ndarray, n: int,
                  params: CprasParams | None = None) -> float:
    """||Gamma(x, sigma)||^2 recovered from the residual blocks."""
    lam_sign = 1.0 if params is not None and params.literal_multiplier_sign else -1.0
    g2 = blocks.a[n:] - lam_sign * lam
    return float(blocks.a[:n] @ blocks.a[:n] + g2 @ g2)


def jacobian_operator(state: CprasState, inst: SnlInstance,
                      params: CprasParams | None = None) -> LinearOperator:
    """Derivative of H_delta at the state as a matrix-free operator.

    Row blocks for a direction (dx, ds, dl, dw):
        G(sigma) dx + B ds
        -B^T dx + ds - dl        (the conjugate Hessian is the identity)
        dw - ds
        lambda * dw + w * dl
        dl
    G and the cross block B are assembled once per operator.
    """
    params = params or CprasParams()
    state.check_shapes(inst)
    kernel = inst.kernel
    n, m = inst.n, inst.m
    g = kernel.assemble_g_csr(state.sigma)
    bmat = kernel.assemble_b_csr(state.x)
    bmat_t = bmat.T.tocsr()
    lam = state.lam.copy()
    w = state.w.copy()
    lam_sign = 1.0 if params.literal_multiplier_sign else -1.0

    def apply(d: np.ndarray) -> np.ndarray:
        dx, ds = d[:n], d[n:n + m]
        dl, dw = d[n + m:n + 2 * m], d[n + 2 * m:]
        return np.concatenate([
            g @ dx + bmat @ ds,
            -(bmat_t @ dx) + ds + lam_sign * dl,
            dw - ds,
            lam * dw + w * dl,
            dl,
        ])

    def apply_transpose(r: np.ndarray) -> np.ndarray:
        r1, r2 = r[:n], r[n:n + m]
        r3, r4, r5 = r[n + m:n + 2 * m], r[n + 2 * m:n + 3 * m], r[n + 3 * m:]
        return np.concatenate([
            g @ r1 - bmat @ r2,
            bmat_t @ r1 + r2 - r3,
            lam_sign * r2 + w * r4 + r5,
            r3 + lam * r4,
        ])

    return LinearOperator(rows=n + 4 * m, cols=n + 3 * m,
                          apply=apply, apply_transpose=apply_transpose)


def potential_value(blocks: HBlocks, eta: float) -> float:
    """eta * log tau - sum(log b) - sum(log c) - sum(log d), tau = ||H||^2."""
    if np.any(blocks.b <= 0) or np.any(blocks.c <= 0) or np.any(blocks.d <= 0):
        raise BoundaryViolation("a barrier block left the positive orthant")
    tau = blocks.norm_sq
    return float(eta * np.log(tau) - np.log(blocks.b).sum()
                 - np.log(blocks.c).sum() - np.log(blocks.d).sum())


def potential_gradient(blocks: HBlocks, eta: float) -> HBlocks:
    """Gradient of the potential in residual space, block by block."""
    if np.any(blocks.b <= 0) or np.any(blocks.c <= 0) or np.any(blocks.d <= 0):
        raise BoundaryViolation("a barrier block left the positive orthant")
    scale = 2.0 * eta / blocks.norm_sq
    return HBlocks(a=scale * blocks.a,
                   b=scale * blocks.b - 1.0 / blocks.b,
                   c=scale * blocks.c - 1.0 / blocks.c,
                   d=scale * blocks.d - 1.0 / blocks.d)


def newton_direction(state: CprasState, inst: SnlInstance, beta: float,
                     params: CprasParams,
                     jac: LinearOperator | None = None,
                     blocks: HBlocks | None = None) -> tuple[np.ndarray, LsqrResult]:
    """Bent Newton direction: least squares on J d = centering - H.

    The centering direction o has ones exactly in the slack-consistency
    block, so the target shifts that block by beta * mean(b).
    """
    if not (0 < beta < 1.0 / 3.0):
        raise ValueError("beta must lie in (0, 1/3)")
    if jac is None:
        jac = jacobian_operator(state, inst, params)
    if blocks is None:
        blocks = residual_h_delta(state, inst, params)
    rhs = -blocks.as_vector()
    n, m = inst.n, inst.m
    rhs[n + m:n + 2 * m] += beta * blocks.b.mean()  # beta * (o.H / ||o||^2) o
    # Truncation cap: early systems are badly scaled and LSQR would grind for
    # ~10^5 iterations toward rel_tol; a capped direction is still a fine
    # descent step and the line search absorbs the inexactness.
    max_iter = params.lsqr_max_iter if params.lsqr_max_iter else 10 * jac.cols
    result = lsqr_least_squares(jac, rhs, rel_tol=params.lsqr_rel_tol,
                                max_iter=max_iter)
    return result.x, result


def _interior(blocks: HBlocks, state: CprasState) -> bool:
    # sigma + delta > 0 keeps iterates on the side of the relaxed wall where
    # G(sigma) stays near the semidefinite cone; without it the duals tunnel
    # through the wall during the transient and the primal block becomes an
    # indefinite saddle problem.
    return bool(np.all(state.lam > 0) and np.all(state.w > 0)
                and np.all(state.sigma + state.delta > 0)
                and np.all(blocks.b > 0) and np.all(blocks.c > 0)
                and np.all(blocks.d > 0))


def _backtrack(state: CprasState, d: np.ndarray, inst: SnlInstance,
               params: CprasParams, eta: float,
               psi0: float, gdot: float):
    """Shared line-search core; returns (alpha, new_state, new_blocks,
    psi_new, backtracks)."""
    alpha = 1.0
    for backtracks in range(params.max_backtracks + 1):
        trial = state.stepped(d, alpha)
        trial_blocks = _blocks(inst.kernel, trial, params)
        if _interior(trial_blocks, trial):
            psi_new = potential_value(trial_blocks, eta)
            if psi_new <= psi0 + params.gamma1 * alpha * gdot:
                return alpha, trial, trial_blocks, psi_new, backtracks
        alpha *= 0.5
    raise LineSearchFailure(
        f"no acceptable step within {params.max_backtracks} halvings")


def line_search(state: CprasState, d: np.ndarray, inst: SnlInstance,
                params: CprasParams | None = None) -> float:
    """Largest alpha in {1, 1/2, 1/4, ...} that stays interior and satisfies
    the alpha-scaled sufficient-decrease test.

    Requires a descent direction (grad psi . d < 0); raises ValueError
    otherwise and LineSearchFailure when backtracking is exhausted.
    """
    params = params or CprasParams()
    state.check_shapes(inst)
    eta = params.eta_for(inst)
    blocks = residual_h_delta(state, inst, params)
    if not _interior(blocks, state):
        raise ValueError("line search requires an interior state")
    psi0 = potential_value(blocks, eta)
    jac = jacobian_operator(state, inst, params)
    grad_psi = jac.apply_transpose(potential_gradient(blocks, eta).as_vector())
    gdot = float(grad_psi @ d)
    if not gdot < 0:
        raise ValueError(f"not a descent direction: grad psi . d = {gdot}")
    alpha, *_ = _backtrack(state, d, inst, params, eta, psi0, gdot)
    return alpha


def _next_delta(state: CprasState, params: CprasParams) -> float:
    """gamma2-shrink, with the adaptive wall-clearance floor when enabled."""
    delta = max(params.gamma2 * state.delta, params.delta_floor)
    if params.adaptive_delta and not params.literal_slack_sign:
        clearance = 1.25 * max(0.0, float(-state.sigma.min()))
        # Raising delta shrinks the slack block; stay inside the interior.
        ceiling = 0.95 * float((state.w - state.sigma).min())
        delta = min(max(delta, clearance), max(ceiling, params.delta_floor))
    return delta


def default_initial_state(inst: SnlInstance, params: CprasParams) -> CprasState:
    """All-ones primal, all-tens duals; lambda = 1 and w chosen so the slack
    block starts at exactly one."""
    m = inst.m
    sigma = 10.0 * np.ones(m)
    return CprasState(x=np.ones(inst.n), sigma=sigma, lam=np.ones(m),
                      w=sigma + params.delta0 + 1.0, delta=params.delta0)


def solve(inst: SnlInstance, params: CprasParams | None = None,
          initial: CprasState | None = None,
          trace_path=None) -> SolveReport:
    """Run the potential-reduction loop until ||Gamma||^2 < epsilon.

    Deterministic given (instance, params, initial).  Every iteration solves
    one sparse least-squares subproblem, backtracks to an interior step with
    sufficient potential decrease, then shrinks the relaxation delta.
    """
    params = params or CprasParams()
    eta = params.eta_for(inst)
    state = initial if initial is not None else default_initial_state(inst, params)
    state = replace(state, x=np.asarray(state.x, dtype=float).copy(),
                    sigma=np.asarray(state.sigma, dtype=float).copy(),
                    lam=np.asarray(state.lam, dtype=float).copy(),
                    w=np.asarray(state.w, dtype=float).copy())
    state.check_shapes(inst)

    start = time.perf_counter()
    trace: list[IterationRecord] = []
    max_h = 0.0
    max_z = 0.0
    n = inst.n
    status = SolveStatus.MAX_ITERATIONS
    blocks = _blocks(inst.kernel, state, params)
    if not _interior(blocks, state):
        raise ValueError("initial state is not interior (lambda, w and the "
                         "slack/complementarity blocks must be positive)")
    gamma_sq = gamma_squared(blocks, state.lam, n, params)

    iterations = 0
    while True:
        max_h = max(max_h, np.sqrt(blocks.norm_sq))
        max_z = max(max_z, float(np.linalg.norm(state.as_vector())))
        if gamma_sq < params.epsilon:
            status = SolveStatus.CONVERGED
            break
        if iterations >= params.max_outer:
            status = SolveStatus.MAX_ITERATIONS
            break

        jac = jacobian_operator(state, inst, params)
        try:
            psi0 = potential_value(blocks, eta)
        except BoundaryViolation:
            status = SolveStatus.NUMERICAL_BREAKDOWN
            break
        grad_psi = jac.apply_transpose(potential_gradient(blocks, eta).as_vector())
        d, lsqr_res = newton_direction(state, inst, params.beta, params,
                                       jac=jac, blocks=blocks)
        if not np.all(np.isfinite(d)):
            status = SolveStatus.NUMERICAL_BREAKDOWN
            break
        gdot = float(grad_psi @ d)
        if not gdot < 0 and not lsqr_res.converged:
            # The truncated subproblem solution lost the descent property;
            # pay for a full-accuracy solve before giving up.
            logger.debug("iteration %d: truncated direction not descent, "
                         "re-solving without cap", iterations)
            retry = replace(params, lsqr_max_iter=10 * jac.cols)
            d, lsqr_res = newton_direction(state, inst, params.beta, retry,
                                           jac=jac, blocks=blocks)
            gdot = float(grad_psi @ d)
        if not gdot < 0:
            logger.warning("iteration %d: direction is not a descent direction "
                           "(grad psi . d = %.3e)", iterations, gdot)
            status = SolveStatus.NUMERICAL_BREAKDOWN
            break
        try:
            alpha, state, blocks, psi_new, backtracks = _backtrack(
                state, d, inst, params, eta, psi0, gdot)
        except LineSearchFailure:
            status = SolveStatus.LINE_SEARCH_FAILURE
            break

        trace.append(IterationRecord(
            iteration=iterations, gamma_sq=gamma_sq, psi=psi0, alpha=alpha,
            delta=state.delta, lsqr_iters=lsqr_res.iterations,
            elapsed_s=time.perf_counter() - start,
            grad_psi_dot_d=gdot, psi_after=psi_new, backtracks=backtracks))
        logger.debug("k=%d |Gamma|^2=%.3e psi=%.6e alpha=%g delta=%.3e lsqr=%d",
                     iterations, gamma_sq, psi0, alpha, state.delta,
                     lsqr_res.iterations)

        state = replace(state, delta=_next_delta(state, params))
        blocks = _blocks(inst.kernel, state, params)
        gamma_sq = gamma_squared(blocks, state.lam, n, params)
        iterations += 1

    wall = time.perf_counter() - start
    err = None
    if inst.truth is not None:
        err = rmsd_of(state.x, inst.truth)
    report = SolveReport(solver="cpras", status=status, iterations=iterations,
                         x=state.x.copy(), sigma=state.sigma.copy(),
                         gamma_sq=gamma_sq, rmsd=err, wall_time_s=wall,
                         max_h_norm=max_h, max_z_norm=max_z, trace=trace)
    if trace_path is not None:
        write_trace_csv(trace_path, trace)
    return report
