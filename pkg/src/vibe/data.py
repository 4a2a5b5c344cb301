"""Dataset / parameter containers and their binary file formats.

Feature files (``.vibf``) are laid out as::

    magic  b"VIBF"       4 bytes
    version u16 = 1
    N u32, d u32, K u32
    flags u8             bit0: clean labels present
    features             N*d little-endian f64, row-major
    corrupted labels     N u32
    clean labels         N u32 (only when flag bit0 is set)

Parameter files (``.vibp``) and coupling files (``.vibq``) follow the same
header idea; see :func:`save_params` and :func:`save_coupling`.
"""

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericsError
from .numerics import normalize_rows, row_softmax

FEATURE_MAGIC = b"VIBF"
PARAMS_MAGIC = b"VIBP"
COUPLING_MAGIC = b"VIBQ"
FORMAT_VERSION = 1

UNIT_TOL = 1e-9
COUPLING_ROW_TOL = 1e-6

_FEATURE_HEADER = struct.Struct("<4sHIIIB")
_PARAMS_HEADER = struct.Struct("<4sHIIddd")
_COUPLING_HEADER = struct.Struct("<4sHII")


@dataclass
class FeatureSet:
    """N unit-norm embeddings with observed (possibly poisoned) labels.

    ``clean_labels`` is ground truth and is only used for evaluation.
    """

    features: np.ndarray
    corrupted_labels: np.ndarray
    num_classes: int
    clean_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.corrupted_labels = np.ascontiguousarray(self.corrupted_labels, dtype=np.int64)
        if self.clean_labels is not None:
            self.clean_labels = np.ascontiguousarray(self.clean_labels, dtype=np.int64)
        self.num_classes = int(self.num_classes)
        self.validate()

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def validate(self):
        f = self.features
        if f.ndim != 2:
            raise DataError("features must be a 2-D array", code="bad_shape")
        if not np.all(np.isfinite(f)):
            raise DataError("non-finite feature", code="non_finite")
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1", code="bad_shape")
        if self.corrupted_labels.shape != (f.shape[0],):
            raise DataError("corrupted_labels length must equal N", code="bad_shape")
        _check_labels(self.corrupted_labels, self.num_classes)
        if self.clean_labels is not None:
            if self.clean_labels.shape != (f.shape[0],):
                raise DataError("clean_labels length must equal N", code="bad_shape")
            _check_labels(self.clean_labels, self.num_classes)
        if f.shape[0]:
            norms = np.linalg.norm(f, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise DataError("feature rows must be unit-norm", code="not_unit")

    def subset(self, indices):
        """Return a new FeatureSet holding only the rows in ``indices``."""
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureSet(
            features=self.features[idx],
            corrupted_labels=self.corrupted_labels[idx],
            num_classes=self.num_classes,
            clean_labels=None if self.clean_labels is None else self.clean_labels[idx],
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _check_labels(labels, k):
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"label ids must lie in [0, {k})", code="bad_label")


@dataclass
class ModelParams:
    """Clean prototypes ``mu``, corrupted prototypes ``eta`` and prior logits.

    ``kappa`` scales the clean-class similarities, ``nu`` the corrupted-class
    similarities, and ``prior_temp`` is the temperature applied to the prior
    logits before the softmax.
    """

    mu: np.ndarray
    eta: np.ndarray
    prior_logits: np.ndarray
    kappa: float
    nu: float
    prior_temp: float

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        self.eta = np.array(self.eta, dtype=np.float64)
        self.prior_logits = np.array(self.prior_logits, dtype=np.float64)
        self.kappa = float(self.kappa)
        self.nu = float(self.nu)
        self.prior_temp = float(self.prior_temp)
        k = self.prior_logits.shape[0]
        if self.mu.ndim != 2 or self.mu.shape[0] != k or self.eta.shape != self.mu.shape:
            raise DataError("mu, eta must be K x d and prior_logits length K", code="bad_shape")
        for name in ("kappa", "nu", "prior_temp"):
            val = getattr(self, name)
            # kappa = nu = 0 is allowed so degenerate models can be expressed.
            if not (np.isfinite(val) and val >= 0.0):
                raise DataError(f"{name} must be finite and non-negative", code="bad_param")
        if self.prior_temp <= 0:
            raise DataError("prior_temp must be positive", code="bad_param")

    @property
    def num_classes(self):
        return self.mu.shape[0]

    @property
    def dim(self):
        return self.mu.shape[1]

    def prior(self):
        """Class prior ``softmax(prior_temp * prior_logits)``."""
        return row_softmax(self.prior_temp * self.prior_logits[None, :])[0]

    def log_prior(self):
        z = self.prior_temp * self.prior_logits
        m = z.max()
        return z - (m + np.log(np.exp(z - m).sum()))

    def validate(self):
        for name in ("mu", "eta", "prior_logits"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"non-finite {name}", code="non_finite")
        for name in ("mu", "eta"):
            norms = np.linalg.norm(getattr(self, name), axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise DataError(f"{name} rows must be unit-norm", code="not_unit")

    def copy(self):
        return ModelParams(self.mu.copy(), self.eta.copy(), self.prior_logits.copy(),
                           self.kappa, self.nu, self.prior_temp)


POSTERIOR_MODES = ("full", "approx")


@dataclass
class TrainConfig:
    """EM training knobs. Config-file keys match the field names, except
    that the entropy regularization is written ``lambda``."""

    lam: float = 25.0
    estep_period: int = 1000
    total_iters: int = 30000
    lr: float = 1e-3
    batch_size: int = 256
    posterior_mode: str = "full"
    seed: int = 0
    kappa: float = 10.0
    nu: float = 10.0
    prior_temp: float = 0.02
    sinkhorn_tol: float = 1e-8
    sinkhorn_max_iters: int = 10000
    # Plain sweeps before Newton column updates take over; -1 disables them.
    sinkhorn_newton_after: int = 0
    # Start each E-step from the previous column scaling instead of v = 1.
    warm_start: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self, n=None):
        if not self.lam > 1:
            raise ConfigError("lambda must be > 1", code="bad_lambda")
        if self.estep_period < 1:
            raise ConfigError("estep_period must be >= 1", code="bad_period")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0", code="bad_iters")
        if self.batch_size < 1 or (n is not None and self.batch_size > n):
            raise ConfigError("batch_size must lie in [1, N]", code="bad_batch")
        if self.posterior_mode not in POSTERIOR_MODES:
            raise ConfigError(f"posterior_mode must be one of {POSTERIOR_MODES}", code="bad_mode")
        if not (self.kappa >= 0 and self.nu >= 0 and self.prior_temp > 0):
            raise ConfigError("kappa, nu must be >= 0 and prior_temp > 0", code="bad_param")
        if not (self.sinkhorn_tol > 0 and self.sinkhorn_max_iters >= 1):
            raise ConfigError("sinkhorn_tol must be > 0 and sinkhorn_max_iters >= 1", code="bad_param")

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """Build a config from string or typed values, overlaying ``base``.

        Keys that are not config fields raise :class:`ConfigError`.
        """
        values = dataclasses.asdict(base if base is not None else cls())
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            name = "lam" if key in ("lambda", "lam") else key.replace("-", "_")
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}", code="unknown_key")
            values[name] = _coerce(name, raw, types[name])
        return cls(**values)

    def to_mapping(self):
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out


def _coerce(name, raw, typ):
    try:
        if typ in ("int", int):
            if isinstance(raw, str):
                raw = raw.strip()
                return int(float(raw)) if ("e" in raw.lower() or "." in raw) else int(raw)
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return str(raw).strip().lower()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}", code="bad_value") from None


def parse_kv_config(path):
    """Read a flat ``key = value`` UTF-8 file; ``#`` starts a comment."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'", code="bad_line")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key", code="bad_line")
        out[key] = value
    return out


@dataclass
class Coupling:
    """N x K transport plan; row i is ``q(.|x_i, y_i) / N``."""

    q: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.q = np.ascontiguousarray(self.q, dtype=np.float64)
        if self.q.ndim != 2:
            raise DataError("coupling must be 2-D", code="bad_shape")

    @property
    def n(self):
        return self.q.shape[0]

    def pseudolabels(self):
        """Rows rescaled to per-example distributions (N * Q)."""
        return self.q * self.n

    def check(self, pi=None, tol=COUPLING_ROW_TOL):
        q = self.q
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise DataError("coupling entries must be finite and >= 0", code="bad_coupling")
        n = q.shape[0]
        if n and np.max(np.abs(q.sum(axis=1) - 1.0 / n)) > tol:
            raise DataError("coupling rows must sum to 1/N", code="bad_coupling")
        if pi is not None and np.max(np.abs(q.sum(axis=0) - pi)) > tol:
            raise DataError("coupling columns must sum to the prior", code="bad_coupling")


# --------------------------------------------------------------------------
# Binary IO


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}", code="io") from exc


def _write_bytes(path, payload):
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}", code="io") from exc


def _take(buf, offset, nbytes, path):
    if offset + nbytes > len(buf):
        raise FormatError(f"{path}: truncated payload", code="truncated")
    return buf[offset:offset + nbytes], offset + nbytes


def encode_features(fs):
    flags = 1 if fs.clean_labels is not None else 0
    parts = [
        _FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, fs.n, fs.dim, fs.num_classes, flags),
        fs.features.astype("<f8").tobytes(),
        fs.corrupted_labels.astype("<u4").tobytes(),
    ]
    if flags:
        parts.append(fs.clean_labels.astype("<u4").tobytes())
    return b"".join(parts)


def decode_features(buf, path="<bytes>"):
    head, off = _take(buf, 0, _FEATURE_HEADER.size, path)
    magic, version, n, d, k, flags = _FEATURE_HEADER.unpack(head)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", code="bad_magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", code="bad_version")
    raw, off = _take(buf, off, 8 * n * d, path)
    feats = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(n, d)
    raw, off = _take(buf, off, 4 * n, path)
    y = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    clean = None
    if flags & 1:
        raw, off = _take(buf, off, 4 * n, path)
        clean = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after payload", code="trailing")
    if not np.all(np.isfinite(feats)):
        raise FormatError(f"{path}: non-finite feature", code="non_finite")
    try:
        feats = normalize_rows(feats) if n else feats
        return FeatureSet(feats, y, k, clean)
    except (DataError, NumericsError) as exc:
        raise FormatError(f"{path}: {exc}", code=exc.code) from exc


def save_features(fs, path):
    _write_bytes(path, encode_features(fs))


def load_features(path):
    """Load a ``.vibf`` file; rows are re-normalized to unit length."""
    return decode_features(_read_bytes(path), path)


def save_params(params, path):
    k, d = params.mu.shape
    payload = b"".join([
        _PARAMS_HEADER.pack(PARAMS_MAGIC, FORMAT_VERSION, k, d,
                            params.kappa, params.nu, params.prior_temp),
        params.mu.astype("<f8").tobytes(),
        params.eta.astype("<f8").tobytes(),
        params.prior_logits.astype("<f8").tobytes(),
    ])
    _write_bytes(path, payload)


def load_params(path):
    buf = _read_bytes(path)
    head, off = _take(buf, 0, _PARAMS_HEADER.size, path)
    magic, version, k, d, kappa, nu, c = _PARAMS_HEADER.unpack(head)
    if magic != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", code="bad_magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", code="bad_version")
    arrays = []
    for count in (k * d, k * d, k):
        raw, off = _take(buf, off, 8 * count, path)
        arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64))
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after payload", code="trailing")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise FormatError(f"{path}: non-finite parameter", code="non_finite")
    try:
        params = ModelParams(arrays[0].reshape(k, d), arrays[1].reshape(k, d), arrays[2], kappa, nu, c)
        params.validate()
    except DataError as exc:
        raise FormatError(f"{path}: {exc}", code=exc.code) from exc
    return params


def save_coupling(coupling, path):
    n, k = coupling.q.shape
    payload = _COUPLING_HEADER.pack(COUPLING_MAGIC, FORMAT_VERSION, n, k) + coupling.q.astype("<f8").tobytes()
    _write_bytes(path, payload)


def load_coupling(path, tol=COUPLING_ROW_TOL):
    """Load a ``.vibq`` file and check that rows sum to 1/N within ``tol``."""
    buf = _read_bytes(path)
    head, off = _take(buf, 0, _COUPLING_HEADER.size, path)
    magic, version, n, k = _COUPLING_HEADER.unpack(head)
    if magic != COUPLING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", code="bad_magic")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", code="bad_version")
    raw, off = _take(buf, off, 8 * n * k, path)
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after payload", code="trailing")
    coupling = Coupling(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(n, k))
    try:
        coupling.check(tol=tol)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}", code=exc.code) from exc
    return coupling


# --------------------------------------------------------------------------


def init_params(fs, kappa, nu, prior_temp, rng=None):
    """Prototypes from corrupted-label class means, uniform prior.

    ``eta`` starts equal to ``mu``. ``rng`` is accepted for interface
    symmetry; the initialization is deterministic.
    """
    k, d = fs.num_classes, fs.dim
    mu = np.zeros((k, d))
    for cls in range(k):
        rows = fs.features[fs.corrupted_labels == cls]
        if rows.shape[0] == 0:
            raise DataError(f"class {cls} has no examples", code="empty_class")
        mean = rows.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise DataError(f"class {cls} mean is the zero vector", code="degenerate_class")
        mu[cls] = mean / norm
    return ModelParams(mu, mu.copy(), np.zeros(k), kappa, nu, prior_temp)
