"""Synthetic correlated multi-label data, FLXD1 file I/O, splits and label corruption."""
import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import norm

from .errors import ConfigError, GenerationError, ParseError, StateError
from .metrics import independent_ratio

DATASET_MAGIC = b"FLXD1"
CORRUPTION_SCHEMES = ("per_sample_resample", "per_bit_flip")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list = None
    metadata: dict = field(default_factory=dict)
    corrupted: bool = False
    corruption_mask: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or len(self.labels) != len(self.features):
            raise ConfigError(f"labels {self.labels.shape} do not match {len(self.features)} samples")
        if self.class_names is None:
            self.class_names = [f"class{c}" for c in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ConfigError("class_names length differs from label width")

    def __len__(self):
        return len(self.features)

    @property
    def num_classes(self):
        return self.labels.shape[1]

    @property
    def feature_shape(self):
        return self.features.shape[1:]

    def subset(self, idx):
        mask = None if self.corruption_mask is None else self.corruption_mask[idx]
        return Dataset(self.features[idx], self.labels[idx], list(self.class_names), dict(self.metadata),
                       self.corrupted, mask)

    def label_checksum(self):
        return hashlib.sha256(np.ascontiguousarray(self.labels).tobytes()).hexdigest()

    def independent_ratio(self):
        return independent_ratio(self.labels)

    def marginals(self):
        return self.labels.mean(axis=0) if len(self) else np.zeros(self.num_classes)


# ------------------------------------------------------------------ label sampler

def _upper_orthant(a, b, rho):
    """P(X > a, Y > b) for standard bivariate normals with correlation rho."""
    s = np.sqrt(1.0 - rho * rho)
    val, _ = quad(lambda x: norm.pdf(x) * norm.sf((b - rho * x) / s), a, np.inf, epsabs=1e-13, epsrel=1e-12)
    return val


def _phi(p_a, p_b, latent_rho):
    """Pearson correlation of two thresholded standard normals."""
    if latent_rho >= 1.0:
        both = min(p_a, p_b)
    elif latent_rho <= -1.0:
        both = max(0.0, p_a + p_b - 1.0)
    else:
        ta, tb = norm.ppf(1 - p_a), norm.ppf(1 - p_b)
        both = _upper_orthant(ta, tb, latent_rho)
    return (both - p_a * p_b) / np.sqrt(p_a * (1 - p_a) * p_b * (1 - p_b))


def latent_correlations(marginals, correlation_matrix):
    """Gaussian-copula correlations that reproduce the requested label correlations."""
    m = np.asarray(marginals, dtype=np.float64)
    R = np.asarray(correlation_matrix, dtype=np.float64)
    c = len(m)
    if R.shape != (c, c) or not np.allclose(R, R.T) or not np.allclose(np.diag(R), 1.0):
        raise GenerationError("correlation matrix must be symmetric with unit diagonal")
    if np.any(R < 0) or np.any(R > 1):
        raise GenerationError("correlation targets must lie in [0, 1]")
    L = np.eye(c)
    for a in range(c):
        for b in range(a + 1, c):
            target = R[a, b]
            if target == 0:
                continue
            hi = _phi(m[a], m[b], 1.0)
            if target > hi + 1e-9:
                raise GenerationError(
                    f"classes {a} and {b}: correlation {target} infeasible with marginals "
                    f"{m[a]:.3f}/{m[b]:.3f} (max {hi:.3f})"
                )
            if target >= hi - 1e-9:
                L[a, b] = L[b, a] = 1.0
            else:
                L[a, b] = L[b, a] = brentq(lambda r: _phi(m[a], m[b], r) - target, 0.0, 1.0 - 1e-9, xtol=1e-10)
    vals, vecs = np.linalg.eigh(L)
    if vals[0] < -1e-9:
        weight = np.abs(np.outer(vecs[:, 0], vecs[:, 0]))
        np.fill_diagonal(weight, 0)
        a, b = np.unravel_index(np.argmax(weight), weight.shape)
        raise GenerationError(f"correlation targets are jointly infeasible; most implicated pair: classes {min(a, b)} and {max(a, b)}")
    return L


def sample_labels(n, marginals, correlation_matrix, rng, require_positive=False):
    """Correlated Bernoulli labels via a thresholded Gaussian.

    Perfectly coupled classes with equal marginals come out identical. Rows
    with no positive label are redrawn when ``require_positive``.
    """
    m = np.asarray(marginals, dtype=np.float64)
    L = latent_correlations(m, correlation_matrix)
    vals, vecs = np.linalg.eigh(L)
    root = vecs * np.sqrt(np.clip(vals, 0, None))
    thresholds = norm.ppf(1 - m)
    out = np.empty((0, len(m)), dtype=np.uint8)
    while len(out) < n:
        z = rng.standard_normal((max(n - len(out), 16) * 2, len(m))) @ root.T
        y = (z > thresholds).astype(np.uint8)
        if require_positive:
            y = y[y.sum(axis=1) > 0]
        out = np.concatenate([out, y])
    return out[:n]


def default_correlation(num_classes):
    """A few correlated class pairs and triples; the rest independent."""
    R = np.eye(num_classes)
    groups = [(0, 1), (2, 3, 4), (5, 6)]
    strengths = [0.6, 0.4, 0.3]
    for group, rho in zip(groups, strengths):
        group = [g for g in group if g < num_classes]
        for a in group:
            for b in group:
                if a != b:
                    R[a, b] = rho
    return R


def default_marginals(num_classes):
    # small label spaces take the head of the 12-class ladder so the default
    # correlated groups stay feasible
    return np.linspace(0.35, 0.12, max(num_classes, 12))[:num_classes]


def generate_synthetic(num_samples=5000, num_classes=12, correlation_matrix=None, seed=0,
                       length=512, channels=2, marginals=None, noise=1.0, crosstalk=1.0, signal=1.0,
                       require_positive=False):
    """Multi-label sequences ``(channels, length)`` with correlated labels.

    Each class has a template signal. A sample is the sum of its positive
    classes' templates, plus an extra interaction template for every
    co-occurring correlated pair (so co-occurrence is not additive), plus
    Gaussian noise. ``require_positive`` redraws rows with no label, which
    biases otherwise independent classes towards negative correlation.
    """
    if num_samples < 0 or num_classes < 1:
        raise ConfigError("need num_samples >= 0 and num_classes >= 1")
    R = default_correlation(num_classes) if correlation_matrix is None else np.asarray(correlation_matrix, float)
    m = default_marginals(num_classes) if marginals is None else np.asarray(marginals, float)
    rng = np.random.default_rng(seed)
    labels = sample_labels(num_samples, m, R, rng, require_positive) if num_samples else np.zeros((0, num_classes), np.uint8)

    t = np.linspace(0, 1, length)
    templates = np.empty((num_classes, channels, length))
    for c in range(num_classes):
        for ch in range(channels):
            freq = rng.uniform(2, 12)
            phase = rng.uniform(0, 2 * np.pi)
            center, width = rng.uniform(0.1, 0.9), rng.uniform(0.03, 0.12)
            bump = np.exp(-0.5 * ((t - center) / width) ** 2)
            templates[c, ch] = signal * (0.5 * np.sin(2 * np.pi * freq * t + phase) + bump)
    pairs = [(a, b) for a in range(num_classes) for b in range(a + 1, num_classes) if R[a, b] > 0]
    interactions = rng.normal(0, crosstalk, size=(len(pairs), channels, length)) if pairs else None

    feats = labels.astype(np.float64).reshape(num_samples, -1) @ templates.reshape(num_classes, -1)
    feats = feats.reshape(num_samples, channels, length)
    for i, (a, b) in enumerate(pairs):
        both = (labels[:, a] & labels[:, b]).astype(bool)
        # co-occurrence also suppresses half of each class's own template
        feats[both] += interactions[i] - 0.5 * (templates[a] + templates[b])
    feats += rng.normal(0, noise, size=feats.shape)
    meta = {
        "generator": "synthetic",
        "num_samples": num_samples, "num_classes": num_classes, "seed": seed,
        "length": length, "channels": channels, "noise": noise, "crosstalk": crosstalk, "signal": signal,
        "marginals": m.tolist(), "require_positive": bool(require_positive), "correlation_matrix": R.tolist(),
    }
    return Dataset(feats, labels, [f"class{c}" for c in range(num_classes)], meta)


def label_correlation(labels):
    y = np.asarray(labels, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.corrcoef(y, rowvar=False)


# ------------------------------------------------------------------ split

def split_indices(n, ratios=(0.7, 0.1, 0.2), seed=0):
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) <= 0:
        raise ConfigError(f"split of {n} samples by {ratios.tolist()} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:]


def split(dataset, ratios=(0.7, 0.1, 0.2), seed=0):
    return tuple(dataset.subset(np.sort(idx)) for idx in split_indices(len(dataset), ratios, seed))


# ------------------------------------------------------------------ corruption

@dataclass
class CorruptionSpec:
    rate: float = 0.0
    scheme: str = "per_sample_resample"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"corruption rate must lie in [0, 1], got {self.rate}")
        if self.scheme not in CORRUPTION_SCHEMES:
            raise ConfigError(f"unknown corruption scheme {self.scheme!r}; expected one of {CORRUPTION_SCHEMES}")


def corrupt_labels(dataset, spec, rng=None):
    """Return a copy of ``dataset`` with corrupted labels and an audit mask.

    ``per_sample_resample``: each row is, with probability ``rate``, replaced
    by independent Bernoulli draws at the empirical class marginals.
    ``per_bit_flip``: each bit flips with probability ``rate``.
    """
    if dataset.corrupted:
        raise StateError("dataset is already corrupted; corruption is applied once per run")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    labels = dataset.labels.copy()
    n, c = labels.shape
    if spec.scheme == "per_sample_resample":
        touched = rng.random(n) < spec.rate
        fresh = (rng.random((n, c)) < dataset.marginals()).astype(np.uint8)
        labels[touched] = fresh[touched]
    else:
        flips = rng.random((n, c)) < spec.rate
        labels = np.where(flips, 1 - labels, labels).astype(np.uint8)
        touched = flips.any(axis=1)
    meta = dict(dataset.metadata)
    meta["corruption"] = {"rate": spec.rate, "scheme": spec.scheme, "seed": spec.seed}
    return replace(dataset, labels=labels, metadata=meta, corrupted=True, corruption_mask=touched)


# ------------------------------------------------------------------ FLXD1 I/O

def sidecar_path(path):
    return Path(str(path) + ".json")


def save_dataset(dataset, path, metadata_extra=None):
    """Write FLXD1 (magic, count, classes, feature shape, then per sample
    little-endian float64 features and one byte per label) plus a JSON sidecar."""
    path = Path(path)
    shape = dataset.feature_shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<QII", len(dataset), dataset.num_classes, len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        feats = np.ascontiguousarray(dataset.features, dtype="<f8").reshape(len(dataset), int(np.prod(shape)))
        labels = np.ascontiguousarray(dataset.labels, dtype=np.uint8)
        for i in range(len(dataset)):
            fh.write(feats[i].tobytes())
            fh.write(labels[i].tobytes())
    side = {
        "class_names": list(dataset.class_names),
        "metadata": dataset.metadata,
        "corrupted": bool(dataset.corrupted),
        "corruption_mask": None if dataset.corruption_mask is None else np.asarray(dataset.corruption_mask, bool).astype(int).tolist(),
    }
    if metadata_extra:
        side.update(metadata_extra)
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True))


def load_dataset(path):
    path = Path(path)
    buf = path.read_bytes()
    head = len(DATASET_MAGIC) + 16
    if len(buf) < head:
        raise ParseError(f"{path}: truncated header", len(buf))
    if buf[:5] != DATASET_MAGIC:
        raise ParseError(f"{path}: bad magic {buf[:5]!r}", 0)
    count, num_classes, ndim = struct.unpack_from("<QII", buf, 5)
    if len(buf) < head + 4 * ndim:
        raise ParseError(f"{path}: truncated feature shape", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, head)
    offset = head + 4 * ndim
    V = int(np.prod(shape)) if ndim else 1
    record = 8 * V + num_classes
    expected = offset + count * record
    if len(buf) != expected:
        bad = min(len(buf), expected)
        raise ParseError(f"{path}: expected {expected} bytes for {count} samples, found {len(buf)}", bad)
    body = np.frombuffer(buf, dtype=np.uint8, offset=offset).reshape(count, record)
    feats = body[:, :8 * V].copy().view("<f8").astype(np.float64).reshape((count,) + tuple(shape))
    labels = body[:, 8 * V:].copy()
    if labels.size and labels.max() > 1:
        row = int(np.argmax(labels.max(axis=1) > 1))
        raise ParseError(f"{path}: label byte outside {{0,1}} in sample {row}", offset + row * record + 8 * V)
    side = {}
    if sidecar_path(path).exists():
        side = json.loads(sidecar_path(path).read_text())
    names = side.get("class_names") or [f"class{c}" for c in range(num_classes)]
    mask = side.get("corruption_mask")
    return Dataset(feats, labels, names, side.get("metadata", {}), bool(side.get("corrupted", False)),
                   None if mask is None else np.asarray(mask, bool))


def load_csv(path, feature_shape=None, num_classes=1):
    """Tiny fixtures: each row is flattened features followed by ``num_classes`` label bits."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        return Dataset(np.zeros((0,) + tuple(feature_shape or (0,))), np.zeros((0, num_classes)))
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ParseError(f"{path}: rows have differing widths {sorted(widths)}")
    arr = np.array(rows)
    feats, labels = arr[:, :-num_classes], arr[:, -num_classes:]
    if not np.all(np.isin(labels, (0, 1))):
        raise ParseError(f"{path}: label columns must be 0/1")
    if feature_shape is not None:
        feats = feats.reshape((len(arr),) + tuple(feature_shape))
    return Dataset(feats, labels.astype(np.uint8))
