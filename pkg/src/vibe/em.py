"""EM training: periodic optimal-transport E-steps, minibatch SGD M-steps.

The M-step minimizes, over a minibatch with pseudolabel rows ``q_i``::

    sum_i  CE[q_i || p(l | x_i)]  +  sum_l q_i(l) * (-ln p(y_i | l, x_i))

with respect to the clean prototypes, the corrupted prototypes and the prior
logits. Prototype rows are projected back onto the unit sphere after every
update.
"""

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import posteriors
from .data import Coupling, init_params
from .errors import DataError
from .numerics import make_rng, normalize_rows
from .posteriors import APPROX, FULL, LOG_FLOOR
from .sinkhorn import SinkhornOpts, entropy, project, solve

log = logging.getLogger(__name__)

Q_ROW_TOL = 1e-6


@dataclass
class Gradients:
    d_mu: np.ndarray
    d_eta: np.ndarray
    d_prior_logits: np.ndarray


@dataclass
class EStepRecord:
    """Bookkeeping for one E-step.

    ``elbo_before`` evaluates the previous coupling after projecting it onto
    the polytope of the current prior (the prior drifts during M-steps, so the
    raw previous coupling is generally infeasible); ``elbo_before_raw`` uses
    it unchanged.
    """

    iter: int
    elbo_before: float | None
    elbo_before_raw: float | None
    elbo_after: float
    sinkhorn_iters: int
    converged: bool


@dataclass
class TrainState:
    params: object
    coupling: Coupling | None
    iter: int = 0
    elbo_history: list = field(default_factory=list)
    estep_log: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)
    rng: object = None


def _check_batch(batch, q_rows):
    q_rows = np.asarray(q_rows, dtype=np.float64)
    if q_rows.ndim != 2 or q_rows.shape[0] != batch.n or q_rows.shape[1] != batch.num_classes:
        raise DataError("q_rows must be (batch size) x K", code="bad_shape")
    if q_rows.size and np.max(np.abs(q_rows.sum(axis=1) - 1.0)) > Q_ROW_TOL:
        raise DataError("q_rows must be per-example distributions", code="bad_q")
    return q_rows


def m_step_loss(params, batch, q_rows, mode=FULL):
    """Value of the M-step objective on ``batch`` (summed, not averaged)."""
    return m_step_loss_and_grad(params, batch, q_rows, mode, need_grad=False)[0]


def m_step_grad(params, batch, q_rows, mode=FULL):
    """Analytic gradient of :func:`m_step_loss` w.r.t. the raw parameter arrays."""
    return m_step_loss_and_grad(params, batch, q_rows, mode)[1]


def m_step_loss_and_grad(params, batch, q_rows, mode=FULL, need_grad=True):
    q = _check_batch(batch, q_rows)
    v = batch.features
    y = batch.corrupted_labels
    n, k = q.shape
    rows = np.arange(n)

    # Clean term: cross-entropy between q_i and p(l|x_i).
    log_clean = posteriors.clean_log_posterior(params, v)
    clamped = log_clean < LOG_FLOOR
    loss = -float(np.sum(q * np.maximum(log_clean, LOG_FLOOR)))

    grads = None
    if need_grad:
        g = q.sum(axis=1, keepdims=True) * np.exp(log_clean) - q
        if np.any(clamped):
            g = np.where(clamped & (q > 0), 0.0, g)
        d_mu = params.kappa * (g.T @ v)
        d_theta = params.prior_temp * g.sum(axis=0)
        d_eta = np.zeros_like(params.eta)

    # Corrupted term: expected negative log-likelihood of the observed label.
    if mode == APPROX:
        log_table = posteriors.corrupted_log_posterior_approx(params)
        counts = np.zeros((k, k))
        np.add.at(counts.T, y, q)  # counts[l, y] = sum_i q_il [y_i = y]
        picked = np.maximum(log_table, LOG_FLOOR)
        loss -= float(np.sum(counts * picked))
        if need_grad:
            r = counts.sum(axis=1, keepdims=True) * np.exp(log_table) - counts
            r = np.where(log_table < LOG_FLOOR, 0.0, r)
            d_mu += params.nu * (r @ params.eta)
            d_eta += params.nu * (r.T @ params.mu)
    elif mode == FULL:
        for l in range(k):
            h, norms = posteriors.mixed_direction(params.mu[l], v)
            logits = params.nu * (h @ params.eta.T)
            m = logits.max(axis=1, keepdims=True)
            lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
            log_py = logits[rows, y] - lse[:, 0]
            w = q[:, l]
            loss -= float(np.sum(w * np.maximum(log_py, LOG_FLOOR)))
            if need_grad:
                w = np.where(log_py < LOG_FLOOR, 0.0, w)
                r = w[:, None] * np.exp(logits - lse)
                r[rows, y] -= w
                d_eta += params.nu * (r.T @ h)
                dh = params.nu * (r @ params.eta)
                ok = norms > 0
                radial = np.sum(h * dh, axis=1, keepdims=True)
                dz = (dh - h * radial) / np.where(ok, norms, 1.0)[:, None]
                d_mu[l] += dz[ok].sum(axis=0)
    else:
        raise ValueError(f"unknown posterior mode {mode!r}")

    if need_grad:
        grads = Gradients(d_mu, d_eta, d_theta)
    return loss, grads


def regularized_elbo(params, fs, coupling, lam, mode=FULL):
    """``tr(Q^T ln P) + H(Q)/lam + 1 - ln N`` for the given coupling."""
    q = coupling.q if isinstance(coupling, Coupling) else np.asarray(coupling)
    log_p = posteriors.log_assemble_P(params, fs, mode)
    return float(np.sum(q * log_p) + entropy(q) / lam + 1.0 - math.log(fs.n))


def e_step(params, fs, lam, mode=FULL, sinkhorn_opts=None, init_log_v=None):
    """Assemble P for the whole dataset and solve the transport problem."""
    opts = sinkhorn_opts or SinkhornOpts(lam=lam)
    if opts.lam != lam:
        opts = dataclasses.replace(opts, lam=lam)
    pi = params.prior()
    p = posteriors.assemble_P(params, fs, mode)
    return solve(p, pi, opts, init_log_v=init_log_v)


def predict(params, features):
    """Most probable clean class per row; ties go to the lowest class id."""
    return np.argmax(posteriors.clean_log_posterior(params, np.atleast_2d(features)), axis=1)


def sgd_update(params, grads, lr):
    """One SGD step followed by re-projection of prototypes onto the sphere."""
    out = params.copy()
    out.mu = normalize_rows(params.mu - lr * grads.d_mu)
    out.eta = normalize_rows(params.eta - lr * grads.d_eta)
    out.prior_logits = params.prior_logits - lr * grads.d_prior_logits
    return out


def one_hot_coupling(labels, k):
    n = labels.shape[0]
    q = np.zeros((n, k))
    q[np.arange(n), labels] = 1.0 / n
    return Coupling(q)


class _Batcher:
    """Fresh shuffle each epoch; the short tail of an epoch is dropped."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self):
        if self.pos + self.batch_size > self.order.shape[0]:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return np.sort(idx)


def train(fs, cfg, params=None, fixed_coupling=None, callback=None):
    """Run EM training.

    An E-step runs before the first iteration and then whenever
    ``iter % estep_period == 0`` (iteration 0 is not repeated); every
    iteration performs one minibatch M-step.

    With ``fixed_coupling`` no E-steps run and the given coupling is used
    throughout. Passing one-hot rows on the corrupted labels gives the plain
    cross-entropy baseline.
    """
    cfg.validate(n=fs.n)
    rng = make_rng(cfg.seed)
    if params is None:
        params = init_params(fs, cfg.kappa, cfg.nu, cfg.prior_temp, rng)
    opts = SinkhornOpts(lam=cfg.lam, max_iters=cfg.sinkhorn_max_iters, tol=cfg.sinkhorn_tol,
                        newton_after=None if cfg.sinkhorn_newton_after < 0 else cfg.sinkhorn_newton_after)
    mode = cfg.posterior_mode
    state = TrainState(params=params, coupling=fixed_coupling, rng=rng)
    t0 = time.perf_counter()
    warm = {"log_v": None}

    def run_e_step(j):
        before = before_raw = None
        if state.coupling is not None:
            before_raw = regularized_elbo(state.params, fs, state.coupling, cfg.lam, mode)
            moved = project(state.coupling.q, state.params.prior(), tol=min(cfg.sinkhorn_tol, 1e-12))
            before = regularized_elbo(state.params, fs, moved.coupling, cfg.lam, mode)
        res = e_step(state.params, fs, cfg.lam, mode, opts, init_log_v=warm["log_v"])
        if cfg.warm_start:
            warm["log_v"] = res.log_v
        if not res.converged:
            log.warning("sinkhorn hit max_iters at iter %d (row_err=%.3g col_err=%.3g)",
                        j, res.row_err, res.col_err)
        state.coupling = res.coupling
        after = regularized_elbo(state.params, fs, state.coupling, cfg.lam, mode)
        state.elbo_history.append((j, after))
        state.estep_log.append(EStepRecord(j, before, before_raw, after, res.iterations, res.converged))
        return after

    first_elbo = None
    if fixed_coupling is None:
        first_elbo = run_e_step(0)
        if cfg.total_iters == 0:
            state.log_rows.append((0, None, first_elbo, (time.perf_counter() - t0) * 1e3))

    pseudo = state.coupling.pseudolabels()
    batcher = _Batcher(fs.n, cfg.batch_size, rng)
    for j in range(cfg.total_iters):
        elbo = first_elbo if j == 0 else None
        if fixed_coupling is None and j > 0 and j % cfg.estep_period == 0:
            elbo = run_e_step(j)
            pseudo = state.coupling.pseudolabels()
        idx = batcher.next()
        batch = fs.subset(idx)
        loss, grads = m_step_loss_and_grad(state.params, batch, pseudo[idx], mode)
        state.params = sgd_update(state.params, grads, cfg.lr)
        state.iter = j + 1
        state.log_rows.append((j, loss, elbo, (time.perf_counter() - t0) * 1e3))
        if callback is not None:
            callback(state)
    return state


def train_baseline(fs, cfg, params=None):
    """Plain cross-entropy training on the corrupted labels (no defense)."""
    return train(fs, cfg, params=params,
                 fixed_coupling=one_hot_coupling(fs.corrupted_labels, fs.num_classes))
