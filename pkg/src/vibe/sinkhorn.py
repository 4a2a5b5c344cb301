"""Entropy-regularized optimal transport for the E-step.

Solves::

    max_Q  tr(Q^T ln P) + (1/lam) H(Q),   H(Q) = -sum Q (ln Q - 1)
    s.t.   Q 1_K = 1_N / N,  Q^T 1_N = pi,  Q >= 0

whose optimum has the scaling form ``Q = diag(u) P**lam diag(v)``. The
default solver works with ``ln u`` and ``ln v`` so that ``P**lam`` never
underflows; the plain-domain path is kept for comparison.

Updates are Gauss-Seidel: each sweep computes the column scaling from the
current row scaling, then the row scaling from the new column scaling. When
the coupling is close to a hard assignment (large ``lam``) plain sweeps
converge very slowly, so after ``newton_after`` sweeps the column update is
replaced by a Newton step on ``ln v`` (rows are still rescaled exactly).
Both updates share the same fixed point.

Newton only helps near the optimum, and at large ``lam`` the optimal ``ln v``
can sit hundreds of units from a cold start. Cold starts therefore first solve
loosely at ``lam / 2**m, ..., lam / 2`` (the smallest stage >= 1), doubling
``ln v`` between stages, before the final solve at ``lam``.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Coupling
from .errors import SolverError

PROB_FLOOR = 1e-300
CHECK_EVERY = 10
STAGE_TOL = 1e-2
# Longest first trial step (in ln v units) a Newton line search may take.
NEWTON_MAX_STEP = 64.0


@dataclass
class SinkhornOpts:
    lam: float = 25.0
    max_iters: int = 10000
    tol: float = 1e-8
    log_domain: bool = True
    # After this many plain sweeps without convergence, column updates switch
    # to Newton steps on ln v. None keeps plain Sinkhorn throughout.
    newton_after: int | None = 0
    # Warm up through halved lambdas on cold starts (log domain only).
    lam_scaling: bool = True
    # Record the dual objective after every sweep (slow, for tests).
    debug: bool = False

    def __post_init__(self):
        if not self.lam > 1:
            raise SolverError("lambda must be > 1", code="bad_lambda")
        if not self.tol > 0:
            raise SolverError("tol must be positive", code="bad_tol")
        if self.max_iters < 1:
            raise SolverError("max_iters must be >= 1", code="bad_iters")
        if self.newton_after is not None and self.newton_after < 0:
            raise SolverError("newton_after must be >= 0 or None", code="bad_newton")


@dataclass
class SinkhornResult:
    coupling: Coupling
    iterations: int
    row_err: float
    col_err: float
    converged: bool
    log_u: np.ndarray
    log_v: np.ndarray
    dual_trace: list = field(default_factory=list)


def _lse_rows(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _lse_cols(a):
    m = a.max(axis=0, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=0, keepdims=True)))[0]


def _marginal_errors(q, n, pi):
    row_err = float(np.max(np.abs(q.sum(axis=1) - 1.0 / n)))
    col_err = float(np.max(np.abs(q.sum(axis=0) - pi)))
    return row_err, col_err


def dual_value(log_kernel, log_u, log_v, pi, lam):
    """Dual objective at the scalings ``(ln u, ln v)``.

    Each half-sweep of Sinkhorn minimizes this exactly in one block, so the
    value is non-increasing over iterations and converges to the optimal
    regularized objective from above.
    """
    n = log_kernel.shape[0]
    q = np.exp(log_u[:, None] + log_kernel + log_v[None, :])
    return float((q.sum() - log_u.sum() / n - np.dot(log_v, pi)) / lam)


def _validate(p, pi):
    p = np.asarray(p, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64).ravel()
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
        raise SolverError("P must be a non-empty N x K matrix", code="bad_shape")
    if pi.shape[0] != p.shape[1]:
        raise SolverError("pi must have length K", code="bad_shape")
    if np.any(~(pi > 0)) or abs(pi.sum() - 1.0) > 1e-9:
        raise SolverError("pi must be positive and sum to 1", code="bad_prior")
    if not np.all(np.isfinite(p)):
        raise SolverError("non-finite entry in P", code="non_finite")
    if np.any(p < 0):
        raise SolverError("zero mass cell (negative entry in P)", code="zero_mass")
    p = np.maximum(p, PROB_FLOOR)
    return p, pi


def solve(p, pi, opts=None, init_log_v=None):
    """Sinkhorn-Knopp on cost ``-ln P`` with row marginal 1/N and column marginal ``pi``.

    Parameters
    ----------
    p : array, shape (N, K)
        Probability matrix with entries in (0, 1]; entries are floored at 1e-300.
    pi : array, shape (K,)
        Column marginal (class prior).
    opts : SinkhornOpts, optional
    init_log_v : array, shape (K,), optional
        Starting column scaling (log domain). Defaults to ``v = 1``; when
        given, the lambda warm-up is skipped.

    Returns
    -------
    SinkhornResult
        Every sweep ends with the row update, so returned rows sum to 1/N up
        to rounding; ``col_err`` carries the remaining violation.
        ``converged`` is False when ``max_iters`` was hit; the coupling is
        then the last iterate. ``iterations`` counts warm-up sweeps too, while
        ``dual_trace`` covers only the final solve at ``opts.lam``.
    """
    opts = opts or SinkhornOpts()
    p, pi = _validate(p, pi)
    k = p.shape[1]
    log_v = np.zeros(k) if init_log_v is None else np.asarray(init_log_v, dtype=np.float64).copy()
    if log_v.shape != (k,) or not np.all(np.isfinite(log_v)):
        raise SolverError("init_log_v must be a finite length-K vector", code="bad_init")
    if not opts.log_domain:
        return _solve_plain(p, pi, np.exp(log_v), opts)
    log_p = np.log(p)
    spent = 0
    if opts.lam_scaling and init_log_v is None:
        for lam in _stage_lams(opts.lam):
            stage = SinkhornOpts(lam=max(lam, 1.0 + 1e-9), max_iters=opts.max_iters, tol=STAGE_TOL,
                                 newton_after=opts.newton_after)
            res = _solve_log(lam * log_p, pi, log_v, stage)
            spent += res.iterations
            log_v = 2.0 * res.log_v
    budget = max(opts.max_iters - spent, 1)
    res = _solve_log(opts.lam * log_p, pi, log_v, dataclasses.replace(opts, max_iters=budget))
    res.iterations += spent
    return res


def _stage_lams(lam):
    out = []
    while lam / 2.0 >= 1.0:
        lam /= 2.0
        out.append(lam)
    return out[::-1]


def project(q, pi, tol=1e-12, max_iters=10000):
    """KL projection of a nonnegative N x K matrix onto the transport polytope.

    Used to compare a coupling built for an older prior with couplings for the
    current one.
    """
    q = np.asarray(q, dtype=np.float64)
    _, pi = _validate(np.ones_like(q), pi)
    log_q = np.log(np.maximum(q, PROB_FLOOR))
    # lam only scales the dual trace here; the kernel is passed pre-multiplied.
    opts = SinkhornOpts(lam=2.0, tol=tol, max_iters=max_iters)
    return _solve_log(log_q, pi, np.zeros(q.shape[1]), opts)


def _solve_log(log_kernel, pi, log_v, opts):
    n, k = log_kernel.shape
    log_row = -math.log(n)
    log_pi = np.log(pi)

    def row_update(lv):
        return log_row - _lse_rows(log_kernel + lv[None, :])

    def potential(lu, lv):
        # lam * dual objective (up to a constant), valid right after a row update.
        return -lu.sum() / n - np.dot(lv, pi)

    log_u = row_update(log_v)
    trace = []
    converged = False
    it = 0
    row_err = col_err = np.inf
    q = None
    while it < opts.max_iters:
        it += 1
        if opts.newton_after is not None and it > opts.newton_after and k > 1:
            log_v, log_u = _newton_column_step(log_kernel, log_u, log_v, pi, n, row_update, potential)
        else:
            log_v = log_pi - _lse_cols(log_kernel + log_u[:, None])
            log_u = row_update(log_v)
        if opts.debug:
            trace.append(dual_value(log_kernel, log_u, log_v, pi, opts.lam))
        newton_phase = opts.newton_after is not None and it > opts.newton_after
        if newton_phase or it % CHECK_EVERY == 0 or it == opts.max_iters:
            q = np.exp(log_u[:, None] + log_kernel + log_v[None, :])
            row_err, col_err = _marginal_errors(q, n, pi)
            if row_err <= opts.tol and col_err <= opts.tol:
                converged = True
                break
    return SinkhornResult(Coupling(q), it, row_err, col_err, converged, log_u, log_v, trace)


def _newton_column_step(log_kernel, log_u, log_v, pi, n, row_update, potential):
    """One damped Newton step on the column potentials ``ln v``.

    With the rows rescaled exactly, the dual is a smooth convex function of
    ``ln v`` alone whose gradient is the column-marginal residual. The K x K
    Hessian is singular along the all-ones direction, so ``ln v[0]`` is held
    fixed. Backtracking (from a step of at most ``NEWTON_MAX_STEP``) keeps the
    dual monotone; if no decrease is found the plain column update is used
    instead.
    """
    s = np.exp(log_u[:, None] + log_kernel + log_v[None, :] + math.log(n))
    grad = s.sum(axis=0) / n - pi
    # The Hessian is a graph Laplacian. Building its diagonal from the
    # off-diagonal sums avoids the cancellation in colsum - sum(s**2) when
    # rows are nearly one-hot.
    hess = -(s.T @ s) / n
    np.fill_diagonal(hess, 0.0)
    np.fill_diagonal(hess, -hess.sum(axis=1))
    sub = hess[1:, 1:]
    ridge = 1e-14 * max(np.trace(sub), 1e-300)
    try:
        step = np.linalg.solve(sub + ridge * np.eye(sub.shape[0]), -grad[1:])
    except np.linalg.LinAlgError:
        step = None
    f0 = potential(log_u, log_v)
    if step is not None and np.all(np.isfinite(step)):
        direction = np.concatenate([[0.0], step])
        slope = float(np.dot(grad, direction))
        # Near the optimum the decrease drops below rounding in f0; accept
        # steps that do not increase it beyond that.
        slack = 1e-13 * max(1.0, abs(f0))
        # With nearly hard rows the curvature can be ~exp(-lam * gap), so the
        # raw step may be astronomically long; start from a bounded one.
        t = min(1.0, NEWTON_MAX_STEP / max(float(np.max(np.abs(direction))), 1e-300))
        for _ in range(60):
            trial_v = log_v + t * direction
            trial_u = row_update(trial_v)
            if potential(trial_u, trial_v) <= f0 + 1e-4 * t * slope + slack:
                return trial_v, trial_u
            t *= 0.5
    plain_v = np.log(pi) - _lse_cols(log_kernel + log_u[:, None])
    return plain_v, row_update(plain_v)


def _solve_plain(p, pi, v, opts):
    n, _ = p.shape
    kernel = p ** opts.lam
    if not np.all(np.isfinite(kernel)):
        raise SolverError("numerical blowup", code="blowup")
    trace = []
    converged = False
    it = 0
    row_err = col_err = np.inf
    q = None
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = 1.0 / (n * (kernel @ v))
        while it < opts.max_iters:
            it += 1
            v = pi / (kernel.T @ u)
            u = 1.0 / (n * (kernel @ v))
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(u > 0) and np.all(v > 0)):
                raise SolverError("numerical blowup", code="blowup")
            if opts.debug:
                trace.append(dual_value(np.log(kernel), np.log(u), np.log(v), pi, opts.lam))
            if it % CHECK_EVERY == 0 or it == opts.max_iters:
                q = u[:, None] * kernel * v[None, :]
                row_err, col_err = _marginal_errors(q, n, pi)
                if row_err <= opts.tol and col_err <= opts.tol:
                    converged = True
                    break
    return SinkhornResult(Coupling(q), it, row_err, col_err, converged, np.log(u), np.log(v), trace)


def regularized_objective(q, p, lam):
    """``tr(Q^T ln P) + (1/lam) H(Q)`` with ``0 ln 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    log_p = np.log(np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR))
    return float(np.sum(q * log_p) + entropy(q) / lam)


def entropy(q):
    """Transport-plan entropy ``-sum Q (ln Q - 1)``, with ``0 ln 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    pos = q > 0
    return float(-np.sum(q[pos] * (np.log(q[pos]) - 1.0)))
