"""Classification metrics, stability/ratio indicators and cluster diagnostics."""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata, spearmanr

from .errors import ConfigError, DimensionError

logger = logging.getLogger(__name__)

RATIO_FLOOR = 1e-3


# ------------------------------------------------------------------ AUC / F1

def auc(scores, labels):
    """Mann-Whitney estimate of P(score+ > score-) with ties counted as 1/2.

    Returns NaN when ``labels`` holds only one class.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel() > 0.5
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auc(probs, labels):
    probs, labels = np.asarray(probs), np.asarray(labels)
    return np.array([auc(probs[:, c], labels[:, c]) for c in range(labels.shape[1])])


def mean_auc(probs, labels):
    """Mean AUC over classes that have both positives and negatives."""
    values = per_class_auc(probs, labels)
    undefined = np.flatnonzero(np.isnan(values))
    if undefined.size:
        logger.info("AUC undefined for classes %s; excluded from the mean", undefined.tolist())
    return float(np.nanmean(values)) if undefined.size < values.size else float("nan")


def confusion_counts(probs, labels, threshold=0.5):
    pred = np.asarray(probs) >= threshold
    truth = np.asarray(labels) > 0.5
    tp = np.sum(pred & truth, axis=0)
    fp = np.sum(pred & ~truth, axis=0)
    fn = np.sum(~pred & truth, axis=0)
    return tp, fp, fn


def macro_f1(probs, labels, threshold=0.5):
    """Per-class F1 (0 when ``2TP+FP+FN == 0``) and their unweighted mean."""
    probs, labels = np.atleast_2d(probs), np.atleast_2d(labels)
    if probs.shape != labels.shape:
        raise DimensionError(f"probabilities {probs.shape} and labels {labels.shape} differ")
    tp, fp, fn = confusion_counts(probs, labels, threshold)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0).astype(np.float64)
    return f1, float(f1.mean())


@dataclass
class MetricsReport:
    class_names: list
    auc: list
    f1: list
    mean_auc: float
    macro_f1: float
    threshold: float
    tp: list
    fp: list
    fn: list

    def to_dict(self):
        return _jsonable(asdict(self))

    def rows(self):
        for i, name in enumerate(self.class_names):
            yield [name, self.auc[i], self.f1[i], self.tp[i], self.fp[i], self.fn[i]]


def metrics_report(probs, labels, class_names=None, threshold=0.5):
    labels = np.asarray(labels)
    names = list(class_names) if class_names is not None else [f"class{c}" for c in range(labels.shape[1])]
    aucs = per_class_auc(probs, labels)
    f1, macro = macro_f1(probs, labels, threshold)
    tp, fp, fn = confusion_counts(probs, labels, threshold)
    return MetricsReport(
        names, aucs.tolist(), f1.tolist(), mean_auc(probs, labels), macro, threshold,
        tp.tolist(), fp.tolist(), fn.tolist(),
    )


# ------------------------------------------------------------------ stability / ratios

def minmax_normalize(values, floor=0.0):
    """Map to ``[floor, 1]``; a constant vector maps to all ``floor``."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, floor)
    return floor + (1.0 - floor) * (v - lo) / (hi - lo)


def variance_of_indicator(series):
    """Population variance of the min-max-normalized per-epoch indicator."""
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ConfigError("variance_of_indicator needs at least one epoch")
    normed = minmax_normalize(series)
    return float(np.mean((normed - normed.mean()) ** 2))


def performance_ratio(perf_a, perf_b, exponent=1.0, floor=RATIO_FLOOR):
    """Per-class ``(norm(perf_a) / norm(perf_b)) ** exponent``.

    Each vector is min-max normalized across classes into ``[floor, 1]``. Two
    identical vectors give ratio 1 everywhere.
    """
    a = np.asarray(perf_a, dtype=np.float64)
    b = np.asarray(perf_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"per-class vectors differ in shape: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return np.ones_like(a)
    return (minmax_normalize(a, floor) / minmax_normalize(b, floor)) ** exponent


def independent_ratio(labels):
    """``n_c / m_c``: share of class-``c`` samples carrying no other label.

    Classes with ``m_c = 0`` are NaN.
    """
    labels = np.asarray(labels) > 0.5
    single = labels.sum(axis=1) == 1
    m = labels.sum(axis=0)
    n = (labels & single[:, None]).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(m > 0, n / np.maximum(m, 1), np.nan)


def spearman(a, b):
    """Spearman coefficient, or NaN when either curve is constant."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    keep = ~(np.isnan(a) | np.isnan(b))
    a, b = a[keep], b[keep]
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(spearmanr(a, b).statistic)


# ------------------------------------------------------------------ clustering

def _sq_dists(X, centers):
    d = (X * X).sum(axis=1)[:, None] - 2.0 * X @ centers.T + (centers * centers).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(X, k, rng):
    n = len(X)
    centers = [X[int(rng.integers(n))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # remaining points coincide with chosen centers
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans(features, k, seed=0, max_iters=100, restarts=1):
    """Lloyd's algorithm from k-means++ seeds; returns cluster assignments.

    With several restarts the run with the lowest inertia wins.
    """
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(len(X), -1)
    if k < 1 or len(X) < k:
        raise ConfigError(f"k-means needs 1 <= k <= N, got k={k}, N={len(X)}")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = kmeans_plus_plus(X, k, rng)
        assign = None
        for _ in range(max_iters):
            new = np.argmin(_sq_dists(X, centers), axis=1)
            if assign is not None and np.array_equal(new, assign):
                break
            assign = new
            for c in range(k):
                members = X[assign == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
        inertia = float(((X - centers[assign]) ** 2).sum())
        if inertia < best_inertia:
            best, best_inertia = assign, inertia
    return best


@dataclass
class ClusterStats:
    state: str
    sst: float
    ssi: float
    r2: float
    num_clusters: int
    cluster_sizes: list
    feature_size: int
    degenerate: bool = False

    def to_dict(self):
        return _jsonable(asdict(self))


def cluster_stats(features, assignments, state="state"):
    """SST, SSI (both divided by the feature size V) and ``R^2 = 1 - SSI/SST``."""
    Z = np.asarray(features, dtype=np.float64)
    Z = Z.reshape(len(Z), -1)
    assignments = np.asarray(assignments)
    if assignments.shape != (len(Z),):
        raise DimensionError(f"{len(assignments)} assignments for {len(Z)} points")
    V = Z.shape[1]
    sst = float(((Z - Z.mean(axis=0)) ** 2).sum() / V)
    clusters = np.unique(assignments)
    ssi = 0.0
    sizes = []
    for c in clusters:
        members = Z[assignments == c]
        sizes.append(int(len(members)))
        ssi += float(((members - members.mean(axis=0)) ** 2).sum())
    ssi /= V
    if sst <= 0:
        return ClusterStats(state, 0.0, 0.0, 0.0, len(clusters), sizes, V, degenerate=True)
    return ClusterStats(state, sst, ssi, 1.0 - ssi / sst, len(clusters), sizes, V)


def r_squared(features_per_state, assignments=None, k=10, seed=0, names=None):
    """ClusterStats per hidden state.

    ``assignments`` may be one shared vector, one vector per state, or None
    (each state is clustered with k-means).
    """
    stats = []
    for i, Z in enumerate(features_per_state):
        name = names[i] if names is not None else f"state{i}"
        if assignments is None:
            a = kmeans(Z, min(k, len(Z)), seed=seed)
        elif isinstance(assignments, (list, tuple)):
            a = assignments[i]
        else:
            a = assignments
        stats.append(cluster_stats(Z, a, name))
    return stats


def r2_ratio(stats_without, stats_with):
    """Per-state ``R^2(without mixing) / R^2(with mixing)``; NaN where the
    denominator is zero."""
    if len(stats_without) != len(stats_with):
        raise DimensionError("both runs must report the same states")
    out = []
    for a, b in zip(stats_without, stats_with):
        out.append(a.r2 / b.r2 if b.r2 > 0 else float("nan"))
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if np.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
