"""Metrics, poisoning-rule recovery and hyperparameter sweeps."""

import itertools
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attacks import CLEAN_LABEL, apply_trigger_test
from .data import Coupling, TrainConfig
from .em import predict, train
from .errors import DataError, VibeError
from .posteriors import FULL, corrupted_posterior_approx

log = logging.getLogger(__name__)

THREADS_ENV = "VIBE_THREADS"


@dataclass
class EvalReport:
    acc: float
    asr: float | None
    pseudolabel_agreement: float | None
    recovered_rule: np.ndarray
    rule_argmax_match: float | None
    # True when the rule matrix is the prototype-level surrogate for a model
    # trained with input-dependent label noise.
    rule_is_surrogate: bool = False


def _require_clean(fs):
    if fs.n == 0:
        raise DataError("empty evaluation", code="empty")
    if fs.clean_labels is None:
        raise DataError("evaluation needs clean labels", code="no_clean_labels")


def accuracy(params, test):
    """Fraction of test rows whose predicted class equals the clean label."""
    _require_clean(test)
    return float(np.mean(predict(params, test.features) == test.clean_labels))


def asr(params, test, spec):
    """Attack success rate over triggered non-target test examples."""
    if test.n == 0:
        raise DataError("empty evaluation", code="empty")
    trig = apply_trigger_test(test, spec)
    targets = spec.rule_targets(test.num_classes)[trig.clean_labels]
    return float(np.mean(predict(params, trig.features) == targets))


def pseudolabel_agreement(coupling, fs):
    """Fraction of rows whose coupling argmax (ties to the lower id) is the clean label."""
    _require_clean(fs)
    q = coupling.q if isinstance(coupling, Coupling) else np.asarray(coupling)
    if q.shape[0] != fs.n:
        raise DataError("coupling and feature set sizes differ", code="bad_shape")
    return float(np.mean(np.argmax(q, axis=1) == fs.clean_labels))


def infer_rules(params):
    """Recovered label-flip table: row l is p(y | l) at the prototype level."""
    return corrupted_posterior_approx(params)


def rule_argmax_match(recovered, rule):
    """Fraction of rows whose argmax hits the 1 in the ground-truth rule row."""
    recovered = np.asarray(recovered)
    rule = np.asarray(rule)
    if recovered.shape != rule.shape:
        raise DataError("rule shapes differ", code="bad_shape")
    return float(np.mean(np.argmax(recovered, axis=1) == np.argmax(rule, axis=1)))


def evaluate(params, test, spec=None, coupling=None, train_fs=None, rule=None, mode=FULL):
    """Bundle every available metric into an :class:`EvalReport`."""
    acc = accuracy(params, test)
    attack_asr = None
    if spec is not None and spec.kind != CLEAN_LABEL:
        attack_asr = asr(params, test, spec)
    agree = None
    if coupling is not None and train_fs is not None and train_fs.clean_labels is not None:
        agree = pseudolabel_agreement(coupling, train_fs)
    recovered = infer_rules(params)
    if rule is None and spec is not None:
        rule = spec.rule_matrix(test.num_classes)
    match = None if rule is None else rule_argmax_match(recovered, rule)
    return EvalReport(acc, attack_asr, agree, recovered, match, rule_is_surrogate=(mode == FULL))


# --- sweeps ---------------------------------------------------------------

def cell_seed(base_seed, index):
    """Seed for sweep cell ``index``, derived from the base seed."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


def grid_cells(grid):
    """Cartesian product of a ``{name: [values]}`` grid, in key order."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise DataError("sweep grid is empty", code="empty_grid")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def run_cell(index, overrides, base_cfg, train_fs, test_fs, spec=None):
    """Train and evaluate one sweep cell; failures become an ``error`` note."""
    row = dict(overrides)
    row.update(cell=index, acc=None, asr=None, runtime_s=None, error="")
    t0 = time.perf_counter()
    try:
        cfg = TrainConfig.from_mapping(overrides, base=base_cfg)
        cfg.seed = cell_seed(base_cfg.seed, index)
        state = train(train_fs, cfg)
        row["acc"] = accuracy(state.params, test_fs)
        if spec is not None and spec.kind != CLEAN_LABEL:
            row["asr"] = asr(state.params, test_fs, spec)
    except (VibeError, ValueError) as err:
        row["error"] = str(err)
    row["runtime_s"] = time.perf_counter() - t0
    return row


def sweep_threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


def sweep(grid, base_cfg, train_fs, test_fs, spec=None, threads=None):
    """Run every grid cell and return rows in cell-index order.

    Each row holds the cell's hyperparameters, ``cell``, ``acc``, ``asr``,
    ``runtime_s`` and ``error``. Cells run on up to ``threads`` worker
    threads (default: ``$VIBE_THREADS`` or 1).
    """
    cells = grid_cells(grid)
    threads = sweep_threads() if threads is None else max(1, int(threads))
    args = [(i, c, base_cfg, train_fs, test_fs, spec) for i, c in enumerate(cells)]
    if threads == 1:
        return [run_cell(*a) for a in args]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda a: run_cell(*a), args))


def sweep_columns(grid):
    return list(grid) + ["cell", "acc", "asr", "runtime_s", "error"]
