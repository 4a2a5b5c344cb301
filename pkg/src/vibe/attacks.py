"""Synthetic vMF datasets and feature-space poisoning.

Triggers act directly on embeddings: a poisoned-label attack blends the
feature toward a fixed unit trigger direction ``t`` and relabels it; a
clean-label attack pushes features off the data manifold along ``t`` and keeps
the label.

vMF samples are drawn with Wood's (1994) rejection sampler for the cosine to
the mean direction, combined with a uniform tangent direction.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureSet
from .errors import DataError
from .numerics import normalize_rows, normalize_unit

ALL_TO_ONE = "all_to_one"
ALL_TO_ALL = "all_to_all"
CLEAN_LABEL = "clean_label"
ATTACK_KINDS = (ALL_TO_ONE, ALL_TO_ALL, CLEAN_LABEL)

MAX_MEAN_COS = 0.5


def sample_vmf_cosines(kappa, d, size, rng):
    """Draw ``w = <x, mu>`` for ``size`` vMF samples on S^{d-1} (Wood 1994)."""
    m = d - 1.0
    b = m / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + m * m))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * math.log(1.0 - x0 * x0)
    out = np.empty(size)
    filled = 0
    while filled < size:
        batch = max(16, int(1.3 * (size - filled)))
        z = rng.beta(m / 2.0, m / 2.0, size=batch)
        u = rng.uniform(size=batch)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = kappa * w + m * np.log(1.0 - x0 * w) - c >= np.log(u)
        w = w[accept][: size - filled]
        out[filled:filled + w.shape[0]] = w
        filled += w.shape[0]
    return out


def sample_vmf(mean, kappa, size, rng):
    """``size`` unit vectors from vMF(mean, kappa)."""
    mean = normalize_unit(mean)
    d = mean.shape[0]
    w = sample_vmf_cosines(kappa, d, size, rng)
    g = rng.standard_normal((size, d))
    g -= np.outer(g @ mean, mean)
    tangent = g / np.linalg.norm(g, axis=1, keepdims=True)
    x = w[:, None] * mean[None, :] + np.sqrt(np.maximum(1.0 - w * w, 0.0))[:, None] * tangent
    return normalize_rows(x)


def draw_means(k, d, rng, max_cos=MAX_MEAN_COS, max_rounds=5000):
    """K uniform unit directions, pushed apart until pairwise cosine <= max_cos."""
    if d < 2:
        raise DataError("dimension must be >= 2", code="bad_dim")
    means = normalize_rows(rng.standard_normal((k, d)))
    goal = max_cos - 1e-3
    for _ in range(max_rounds):
        cos = means @ means.T
        np.fill_diagonal(cos, -np.inf)
        if cos.max() <= max_cos:
            return means
        excess = np.where(cos > goal, cos - goal, 0.0)
        means = normalize_rows(means - 0.5 * excess @ means)
    raise DataError(f"cannot place {k} means in dimension {d} with cosine <= {max_cos}",
                    code="mean_placement")


def anchored_means(k, d, rng, cos=MAX_MEAN_COS):
    """K class directions with pairwise cosine exactly ``cos``, fanned out
    around a random anchor.

    A compact layout in which all classes share a common region of the
    sphere; pair it with :func:`offmanifold_trigger` to get poisons that sit
    away from every class at once.
    """
    if d < k + 1:
        raise DataError("anchored layout needs d >= K + 1", code="bad_dim")
    if not 0.0 <= cos < 1.0:
        raise DataError("cos must lie in [0, 1)", code="bad_cos")
    basis = np.linalg.qr(rng.standard_normal((d, k + 1)))[0].T
    return normalize_rows(math.sqrt(cos) * basis[0][None, :] + math.sqrt(1.0 - cos) * basis[1:])


def offmanifold_trigger(means, rng):
    """Random unit vector orthogonal to the span of ``means``."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    d = means.shape[1]
    q, r = np.linalg.qr(means.T)
    q = q[:, np.abs(np.diag(r)) > 1e-10]
    if q.shape[1] >= d:
        raise DataError("means span the whole space", code="bad_dim")
    for _ in range(100):
        g = rng.standard_normal(d)
        g -= q @ (q.T @ g)
        if np.linalg.norm(g) > 1e-6:
            return normalize_unit(g)
    raise DataError("could not draw an orthogonal trigger", code="bad_dim")


def gen_vmf_clusters(k, d, n_per_class, kappa_gen, rng, means=None):
    """Balanced K-class vMF mixture; clean and corrupted labels coincide.

    Pass ``means`` to sample a second split (e.g. a test set) from the same
    class directions.
    """
    if d < 2:
        raise DataError("dimension must be >= 2", code="bad_dim")
    if not kappa_gen > 0:
        raise DataError("kappa_gen must be positive", code="bad_kappa")
    if means is None:
        means = draw_means(k, d, rng)
    feats = np.concatenate([sample_vmf(means[c], kappa_gen, n_per_class, rng) for c in range(k)])
    labels = np.repeat(np.arange(k), n_per_class)
    return FeatureSet(feats, labels, k, labels.copy())


def random_trigger(d, rng):
    return normalize_unit(rng.standard_normal(d))


@dataclass
class AttackSpec:
    kind: str
    trigger: np.ndarray
    rate: float = 0.10
    target: int = 0
    blend: float = 0.6
    offmanifold_scale: float = 1.0

    def __post_init__(self):
        self.kind = str(self.kind).lower().replace("-", "_")
        if self.kind not in ATTACK_KINDS:
            raise DataError(f"attack kind must be one of {ATTACK_KINDS}", code="bad_attack")
        if not 0.0 <= self.rate <= 1.0:
            raise DataError("rate must lie in [0, 1]", code="bad_attack")
        if not 0.0 < self.blend < 1.0:
            raise DataError("blend must lie in (0, 1)", code="bad_attack")
        self.trigger = normalize_unit(np.asarray(self.trigger, dtype=np.float64))

    def rule_targets(self, k):
        """Corrupted label assigned to each clean class under the attack."""
        if self.kind == ALL_TO_ONE:
            return np.full(k, self.target, dtype=np.int64)
        if self.kind == ALL_TO_ALL:
            return (np.arange(k) + 1) % k
        return np.arange(k)

    def rule_matrix(self, k):
        r = np.zeros((k, k), dtype=np.int64)
        r[np.arange(k), self.rule_targets(k)] = 1
        return r

    def to_dict(self):
        return {"kind": self.kind, "rate": self.rate, "target": self.target, "blend": self.blend,
                "offmanifold_scale": self.offmanifold_scale, "trigger": self.trigger.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], trigger=np.asarray(d["trigger"]), rate=d["rate"],
                   target=d["target"], blend=d["blend"], offmanifold_scale=d["offmanifold_scale"])


@dataclass
class PoisonRecord:
    poisoned_indices: np.ndarray
    rule: np.ndarray
    spec: AttackSpec | None = field(default=None, repr=False)

    def to_dict(self):
        out = {"poisoned_indices": [int(i) for i in self.poisoned_indices],
               "rule": self.rule.tolist()}
        if self.spec is not None:
            out["attack"] = self.spec.to_dict()
        return out

    @classmethod
    def from_dict(cls, d):
        spec = AttackSpec.from_dict(d["attack"]) if "attack" in d else None
        return cls(np.asarray(d["poisoned_indices"], dtype=np.int64),
                   np.asarray(d["rule"], dtype=np.int64), spec)


def _blend(features, spec):
    return normalize_rows((1.0 - spec.blend) * features + spec.blend * spec.trigger[None, :])


def apply_attack(fs, spec, rng):
    """Poison a copy of ``fs``; returns ``(poisoned FeatureSet, PoisonRecord)``.

    Poisoned-label attacks sample ``ceil(rate * N)`` indices from the whole
    set. The clean-label attack samples ``ceil(rate * N_target)`` indices from
    the target class only.
    """
    k = fs.num_classes
    if spec.trigger.shape[0] != fs.dim:
        raise DataError("trigger dimension does not match features", code="bad_attack")
    if spec.kind in (ALL_TO_ONE, CLEAN_LABEL) and not 0 <= spec.target < k:
        raise DataError("target class out of range", code="bad_attack")
    if spec.kind == ALL_TO_ONE and k == 1:
        raise DataError("no non-target class", code="no_non_target")
    clean = fs.clean_labels if fs.clean_labels is not None else fs.corrupted_labels
    if spec.kind == CLEAN_LABEL:
        pool = np.flatnonzero(clean == spec.target)
    else:
        pool = np.arange(fs.n)
    count = math.ceil(spec.rate * pool.shape[0] - 1e-9)
    idx = np.sort(rng.choice(pool, size=count, replace=False)) if count else np.empty(0, np.int64)

    feats = fs.features.copy()
    labels = fs.corrupted_labels.copy()
    if idx.size:
        if spec.kind == CLEAN_LABEL:
            feats[idx] = normalize_rows(feats[idx] + spec.offmanifold_scale * spec.trigger[None, :])
        else:
            feats[idx] = _blend(feats[idx], spec)
            labels[idx] = spec.rule_targets(k)[clean[idx]]
    out = FeatureSet(feats, labels, k, None if fs.clean_labels is None else fs.clean_labels.copy())
    return out, PoisonRecord(idx.astype(np.int64), spec.rule_matrix(k), spec)


def apply_trigger_test(fs, spec):
    """Triggered copies of every example whose clean label differs from its
    rule target; labels are left untouched."""
    if spec.kind == CLEAN_LABEL:
        raise DataError("no test-time trigger", code="no_trigger")
    if fs.clean_labels is None:
        raise DataError("test set needs clean labels", code="no_clean_labels")
    targets = spec.rule_targets(fs.num_classes)
    keep = np.flatnonzero(targets[fs.clean_labels] != fs.clean_labels)
    if keep.size == 0:
        raise DataError("no non-target examples", code="no_non_target")
    sub = fs.subset(keep)
    return sub.replace(features=_blend(sub.features, spec))
