"""Clean and corrupted class posteriors, and the joint matrix P.

The clean posterior is a vMF mixture posterior: a softmax over classes of
``kappa * <v, mu_l> + ln pi_l``. The corrupted posterior is a softmax over
observed classes of ``nu * <eta_y, h>`` with ``h = normalize(mu_l + v)`` in
full mode and ``h = mu_l`` in approximate mode.
"""

import numpy as np

from .numerics import log_softmax_rows

PROB_FLOOR = 1e-300
LOG_FLOOR = np.log(PROB_FLOOR)
ANTIPODAL_EPS = 1e-9

FULL = "full"
APPROX = "approx"


def clean_log_posterior(params, features):
    logits = params.kappa * (features @ params.mu.T) + params.log_prior()[None, :]
    return log_softmax_rows(logits)


def clean_posterior(params, features):
    """N x K matrix of p(l | x_i)."""
    return np.exp(clean_log_posterior(params, features))


def mixed_direction(mu_l, features):
    """Unit vectors ``normalize(mu_l + v_i)`` and their pre-normalization norms.

    Rows where ``mu_l + v_i`` nearly vanishes fall back to ``v_i``; for those
    rows the returned norm is 0.
    """
    z = features + mu_l[None, :]
    norms = np.linalg.norm(z, axis=1)
    degenerate = norms < ANTIPODAL_EPS
    safe = np.where(degenerate, 1.0, norms)
    h = z / safe[:, None]
    if np.any(degenerate):
        h[degenerate] = features[degenerate]
        norms = np.where(degenerate, 0.0, norms)
    return h, norms


def corrupted_log_posterior_full(params, features, l):
    h, _ = mixed_direction(params.mu[l], features)
    return log_softmax_rows(params.nu * (h @ params.eta.T))


def corrupted_posterior_full(params, features, l):
    """N x K matrix of p(y | l, x_i) for one clean class ``l``."""
    return np.exp(corrupted_log_posterior_full(params, features, l))


def corrupted_log_posterior_approx(params):
    return log_softmax_rows(params.nu * (params.mu @ params.eta.T))


def corrupted_posterior_approx(params):
    """K x K matrix whose entry (l, y) is p(y | l)."""
    return np.exp(corrupted_log_posterior_approx(params))


def corrupted_log_likelihood(params, features, labels, mode):
    """N x K matrix of ln p(y_i | l, x_i) at the observed labels."""
    n = features.shape[0]
    k = params.num_classes
    rows = np.arange(n)
    if mode == APPROX:
        table = corrupted_log_posterior_approx(params)
        return table[:, labels].T.copy()
    if mode != FULL:
        raise ValueError(f"unknown posterior mode {mode!r}")
    out = np.empty((n, k))
    for l in range(k):
        out[:, l] = corrupted_log_posterior_full(params, features, l)[rows, labels]
    return out


def log_assemble_P(params, fs, mode):
    log_p = clean_log_posterior(params, fs.features)
    log_p = log_p + corrupted_log_likelihood(params, fs.features, fs.corrupted_labels, mode)
    return np.maximum(log_p, LOG_FLOOR)


def assemble_P(params, fs, mode):
    """P[i, l] = p(y_i | l, x_i) p(l | x_i), floored at 1e-300."""
    return np.maximum(np.exp(log_assemble_P(params, fs, mode)), PROB_FLOOR)
