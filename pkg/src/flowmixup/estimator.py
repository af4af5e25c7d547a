"""scikit-learn compatible wrapper around the network and training loop."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .metrics import macro_f1
from .network import BlockSpec, NetworkPlan, build
from .seeding import stream
from .training import TrainConfig, train


def check_multilabel(Y, n_samples=None):
    Y = check_array(Y, ensure_2d=True, dtype=np.float64)
    if not np.all(np.isin(Y, (0.0, 1.0))):
        raise ValueError("Y must be a binary indicator matrix")
    if n_samples is not None and len(Y) != n_samples:
        raise ValueError(f"X has {n_samples} samples but Y has {len(Y)}")
    return Y


class FlowMixupClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label classifier trained with ERM, Mixup, Manifold Mixup or Flow-Mixup.

    ``X`` is ``(n_samples, channels, length)`` for ``architecture='ecg_like'``,
    ``(n_samples, channels, H, W)`` for ``'cxr_like'`` and
    ``(n_samples, n_features)`` for ``'mlp'``. ``Y`` is a binary indicator
    matrix.

    Parameters
    ----------
    mode : {'erm', 'mixup', 'manifold_mixup', 'flow_mixup'}
    alpha : float
        Concentration of the symmetric Beta law the mixing coefficient is drawn from.
    op_forward : bool
        Whether original features continue past the last mixing module.
    mix_points : sequence of int or None
        Hidden states (inputs of 0-indexed blocks) that get a mixing module.
        None picks the mode's default.
    validation_fraction : float
        Share of the training data held out to pick the best epoch when no
        ``eval_set`` is given.
    restore_best : bool
        Keep the weights of the best validation epoch instead of the last.
    """

    def __init__(self, mode="flow_mixup", alpha=3.0, op_forward=True, mix_points=None,
                 architecture="ecg_like", widths=(8, 8, 16, 16, 16), strides=None,
                 batch_size=32, lr=1e-4, epochs=30, plateau_patience=3, plateau_factor=0.1,
                 class_weights="inverse", indicator="macro_f1", threshold=0.5,
                 validation_fraction=0.125, restore_best=True, random_state=0):
        self.mode = mode
        self.alpha = alpha
        self.op_forward = op_forward
        self.mix_points = mix_points
        self.architecture = architecture
        self.widths = widths
        self.strides = strides
        self.batch_size = batch_size
        self.lr = lr
        self.epochs = epochs
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.class_weights = class_weights
        self.indicator = indicator
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.restore_best = restore_best
        self.random_state = random_state

    def _plan(self, input_shape, n_classes):
        kw = dict(mode=self.mode, mix_points=self.mix_points, alpha=self.alpha, op_forward=self.op_forward)
        widths = tuple(self.widths)
        if self.architecture == "mlp":
            return NetworkPlan(input_shape, n_classes, [BlockSpec("dense", w) for w in widths], **kw)
        if self.architecture == "cxr_like":
            return NetworkPlan.cxr_like(input_shape, n_classes, widths=widths, **kw)
        strides = tuple(self.strides) if self.strides else (2, 1, 2, 1, 1)[:len(widths)]
        return NetworkPlan.ecg_like(input_shape, n_classes, widths=widths, strides=strides, **kw)

    def _train_config(self):
        return TrainConfig(
            batch_size=self.batch_size, lr0=self.lr, epochs=self.epochs,
            plateau_patience=self.plateau_patience, plateau_factor=self.plateau_factor,
            seed=self.random_state, class_weights=self.class_weights,
            indicator=self.indicator, threshold=self.threshold,
        )

    def fit(self, X, Y, eval_set=None, test_set=None):
        """Train from scratch. ``eval_set``/``test_set`` are optional ``(X, Y)`` pairs."""
        X = check_array(X, allow_nd=True, dtype=np.float64)
        Y = check_multilabel(Y, len(X))
        if eval_set is None:
            n = len(X)
            n_valid = max(1, int(round(self.validation_fraction * n)))
            perm = stream(self.random_state, "split").permutation(n)
            va, tr = np.sort(perm[:n_valid]), np.sort(perm[n_valid:])
            eval_set = (X[va], Y[va])
            X, Y = X[tr], Y[tr]
        else:
            eval_set = (check_array(eval_set[0], allow_nd=True, dtype=np.float64), check_multilabel(eval_set[1]))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]
        self.n_outputs_ = Y.shape[1]
        self.classes_ = np.arange(Y.shape[1])
        self.plan_ = self._plan(self.input_shape_, self.n_outputs_)
        self.network_ = build(self.plan_, stream(self.random_state, "init"))
        result = train(self.network_, (X, Y), eval_set, test_set, self._train_config())
        self.history_ = result.records
        self.best_epoch_ = result.best_epoch
        self.train_result_ = result
        if self.restore_best and result.best_epoch is not None:
            self.network_.set_weights(result.best_weights)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"X has feature shape {X.shape[1:]}, estimator was fitted on {self.input_shape_}")
        return X

    def predict_proba(self, X):
        X = self._check_X(X)
        return self.network_.forward_eval(X)

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(int)

    def hidden_states(self, X):
        """``[(state_name, (n_samples, V))]`` for every block output and the model output."""
        X = self._check_X(X)
        return self.network_.hidden_states(X)

    def score(self, X, Y, sample_weight=None):
        """Macro-F1 at ``threshold``."""
        Y = check_multilabel(Y)
        return macro_f1(self.predict_proba(X), Y, self.threshold)[1]

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        tags.input_tags.three_d_array = True
        return tags

