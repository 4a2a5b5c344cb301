"""Small numerical primitives used throughout the package.

Everything works in float64. Random streams come from :func:`make_rng`,
which wraps numpy's counter-based Philox bit generator so that a given seed
always replays the same stream on every platform numpy supports.
"""

import numpy as np

from .errors import NumericsError

DEGENERATE_NORM = 1e-12
UNIT_BAND = 1e-12


def make_rng(seed):
    """Return a ``numpy.random.Generator`` backed by Philox4x64 keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def logsumexp(v):
    """ln(sum(exp(v))) with max-shift. Reduction is a plain left-to-right sum."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise NumericsError("empty reduction", code="empty_reduction")
    if not np.all(np.isfinite(v)):
        raise NumericsError("non-finite input to logsumexp", code="non_finite")
    m = v.max()
    if v.size == 1:
        return float(m)
    total = 0.0
    for x in np.exp(v - m):
        total += x
    return float(m + np.log(total))


def normalize_unit(v):
    """Scale ``v`` to unit L2 norm."""
    v = np.asarray(v, dtype=np.float64)
    n = np.sqrt(np.dot(v, v))
    if not n >= DEGENERATE_NORM:
        raise NumericsError("degenerate vector", code="degenerate_vector")
    # Vectors already on the sphere (to rounding) come back untouched, which
    # makes the operation bitwise idempotent.
    if abs(n - 1.0) <= UNIT_BAND:
        return v.copy()
    return v / n


def normalize_rows(m, eps=DEGENERATE_NORM):
    """Row-wise :func:`normalize_unit` for a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(~(norms >= eps)):
        raise NumericsError("degenerate vector", code="degenerate_vector")
    norms = np.where(np.abs(norms - 1.0) <= UNIT_BAND, 1.0, norms)
    return m / norms


def log_softmax_rows(logits):
    """Row-wise log-softmax of a 2-D array."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def row_softmax(logits, temperature=1.0):
    """Row-wise softmax of ``logits / temperature``.

    ``temperature`` divides the logits, so ``temperature=2`` flattens the
    distribution.
    """
    if not temperature > 0:
        raise NumericsError("temperature must be positive", code="bad_temperature")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise NumericsError("non-finite logits", code="non_finite")
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
