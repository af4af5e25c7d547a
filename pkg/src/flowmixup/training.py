"""Loss, optimizer, learning-rate schedule and the epoch loop."""
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .metrics import macro_f1, mean_auc
from .seeding import stream

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
PLATEAU_THRESHOLD = 1e-4
WEIGHT_SCHEMES = ("inverse", "positive_only", "none")
INDICATORS = ("macro_f1", "auc")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    epochs: int = 30
    seed: int = 0
    class_weights: str = "inverse"
    indicator: str = "macro_f1"
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("batch_size", "lr0", "eps", "plateau_patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.class_weights not in WEIGHT_SCHEMES:
            raise ConfigError(f"class_weights must be one of {WEIGHT_SCHEMES}")
        if self.indicator not in INDICATORS:
            raise ConfigError(f"indicator must be one of {INDICATORS}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float
    valid_indicator: float
    test_indicator: float
    wall_time: float = 0.0

    CSV_FIELDS = ("epoch", "train_loss", "valid_loss", "lr", "valid_indicator", "test_indicator")

    def csv_row(self):
        return [str(self.epoch)] + [repr(float(getattr(self, f))) for f in self.CSV_FIELDS[1:]]


# ------------------------------------------------------------------ loss

def class_weights(labels, scheme="inverse"):
    """Per-class ``(w_pos, w_neg)`` from a training label matrix.

    ``inverse``: ``w+ = N / N+`` and ``w- = N / (N - N+)``; a class with no
    positives (or no negatives) gets the clamped weight ``N``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n, c = labels.shape
    if scheme == "none" or n == 0:
        return np.ones(c), np.ones(c)
    pos = labels.sum(axis=0)
    neg = n - pos
    w_pos = np.where(pos > 0, n / np.maximum(pos, 1e-300), float(n))
    w_neg = np.where(neg > 0, n / np.maximum(neg, 1e-300), float(n))
    degenerate = np.flatnonzero((pos == 0) | (neg == 0))
    if degenerate.size:
        logger.warning("classes %s have no positives or no negatives; weight clamped at N=%d", degenerate.tolist(), n)
    if scheme == "positive_only":
        w_neg = np.ones(c)
    return w_pos, w_neg


def weighted_bce(probs, labels, weights):
    """Mean weighted binary cross-entropy over every sample, flow slot and class.

    ``probs`` is a Tensor, ``labels`` an array of the same shape with entries in
    [0, 1] (mixed labels allowed), ``weights`` a ``(w_pos, w_neg)`` pair of
    per-class vectors. Averaging over flow slots keeps the loss scale
    independent of flow size.
    """
    p = probs.data
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != p.shape:
        raise ConfigError(f"labels {y.shape} not aligned with probabilities {p.shape}")
    w_pos, w_neg = (np.asarray(w, dtype=np.float64) for w in weights)
    p_hi = np.maximum(p, LOG_CLAMP)
    p_lo = np.maximum(1.0 - p, LOG_CLAMP)
    terms = -(w_pos * y * np.log(p_hi) + w_neg * (1.0 - y) * np.log(p_lo))
    n = terms.size

    def backward(g):
        d_hi = np.where(p > LOG_CLAMP, 1.0 / p_hi, 0.0)
        d_lo = np.where(1.0 - p > LOG_CLAMP, 1.0 / p_lo, 0.0)
        return (float(g) * (-(w_pos * y * d_hi) + w_neg * (1.0 - y) * d_lo) / n,)

    return T._record(np.array(terms.mean()), (probs,), backward, "weighted_bce")


# ------------------------------------------------------------------ optimizer

class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        """Apply one update; ``grads`` defaults to each parameter's ``.grad``."""
        grads = grads if grads is not None else [p.grad for p in self.params]
        grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, grads)]
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient; optimizer step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauScheduler:
    """Multiply the lr by ``factor`` after ``patience`` epochs without the
    validation loss improving on its best by more than ``threshold``."""

    def __init__(self, lr, patience=3, factor=0.1, threshold=PLATEAU_THRESHOLD):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.lr = lr
        self.patience, self.factor, self.threshold = patience, factor, threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, valid_loss):
        if self.best - valid_loss > self.threshold:
            self.best = valid_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def plateau_schedule(valid_losses, patience=3, factor=0.1, lr=1e-4):
    """lr after each epoch of ``valid_losses``."""
    sched = PlateauScheduler(lr, patience, factor)
    return [sched.step(v) for v in valid_losses]


# ------------------------------------------------------------------ loop

@dataclass
class TrainResult:
    best_weights: dict
    last_weights: dict
    records: list = field(default_factory=list)
    best_epoch: int = None
    flow_paths: list = field(default_factory=list)

    def best_record(self):
        return None if self.best_epoch is None else self.records[self.best_epoch - 1]

    def last_record(self):
        return self.records[-1] if self.records else None


def indicator(probs, labels, kind="macro_f1", threshold=0.5):
    if kind == "auc":
        return mean_auc(probs, labels)
    return macro_f1(probs, labels, threshold)[1]


def evaluate_loss(net, x, y, weights, batch_size=256):
    if len(x) == 0:
        return float("nan")
    probs = net.forward_eval(x, batch_size)
    return float(weighted_bce(T.Tensor(probs), y, weights).data)


def train(net, train_data, valid_data, test_data=None, config=None, on_epoch=None):
    """Fit ``net`` in place.

    Each ``*_data`` is an ``(x, y)`` pair of arrays. Returns a
    :class:`TrainResult`; "best" is the epoch with the highest validation
    indicator.
    """
    config = config or TrainConfig()
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train_data)
    x_va, y_va = (np.asarray(a, dtype=np.float64) for a in valid_data)
    weights = class_weights(y_tr, config.class_weights)
    opt = Adam(net.parameters, config.lr0, config.beta1, config.beta2, config.eps)
    sched = PlateauScheduler(config.lr0, config.plateau_patience, config.plateau_factor)
    shuffle_rng = stream(config.seed, "shuffle")
    mix_rng = stream(config.seed, "mix")

    initial = net.get_weights()
    result = TrainResult(best_weights=initial, last_weights=initial)
    best_score = -np.inf
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(x_tr))
        losses, sizes = [], []
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            try:
                out = net.forward_train(x_tr[idx], y_tr[idx], mix_rng)
                loss = weighted_bce(out.probabilities, out.labels, weights)
                T.backward(loss)
                opt.step()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {i // config.batch_size}: {exc}") from exc
            losses.append(float(loss.data))
            sizes.append(len(idx))
            if epoch == 1 and i == 0:
                result.flow_paths.append(list(out.trace.mix_flow_path))
        train_loss = float(np.average(losses, weights=sizes)) if losses else float("nan")
        valid_loss = evaluate_loss(net, x_va, y_va, weights)
        lr_used = opt.lr
        valid_ind = indicator(net.forward_eval(x_va), y_va, config.indicator, config.threshold)
        test_ind = float("nan")
        if test_data is not None:
            x_te, y_te = test_data
            test_ind = indicator(net.forward_eval(x_te), y_te, config.indicator, config.threshold)
        record = EpochRecord(epoch, train_loss, valid_loss, lr_used, valid_ind, test_ind, time.perf_counter() - start)
        result.records.append(record)
        if valid_ind > best_score:
            best_score = valid_ind
            result.best_epoch = epoch
            result.best_weights = net.get_weights()
        opt.lr = sched.step(valid_loss)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("epoch %d train %.5f valid %.5f lr %.1e ind %.4f", epoch, train_loss, valid_loss, lr_used, test_ind)
    result.last_weights = net.get_weights()
    return result
