"""The Flow-Mixup mixing module.

Forward: keep the incoming features and append a mixed copy along the flow
axis, ``z' = [z, p*z + (1-p)*z[perm]]``, with labels mixed by the same
``(p, perm)``. Backward: the mixed branch's gradient is routed back through
the mix (its transpose), then averaged with the pass-through gradient,
``grad = (grad' + grad_m) / 2``.

With ``op_forward=False`` the originals are dropped and the module is plain
Mixup at that hidden state: ``z' = z_mixed`` and ``grad = grad_m``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .tensor import Tensor, _record, check_finite


@dataclass
class MixSpec:
    alpha: float = 3.0
    op_forward: bool = True
    p: float = None
    permutation: np.ndarray = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.p is not None and not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if self.permutation is not None:
            perm = np.asarray(self.permutation)
            if not np.array_equal(np.sort(perm), np.arange(perm.size)):
                raise ConfigError("permutation is not a bijection on batch indices")
            self.permutation = perm

    def sampled(self, batch_size, rng):
        """Fresh spec with ``p`` and ``permutation`` drawn for one batch."""
        return MixSpec(self.alpha, self.op_forward, sample_p(self.alpha, rng), rng.permutation(batch_size))


def sample_p(alpha, rng):
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mix_pair(z, y, spec):
    """Mixup of a batch with a shuffled copy of itself.

    ``z`` and ``y`` are arrays whose axis 0 is the batch; the same ``p`` and
    permutation are applied to both.
    """
    perm, p = spec.permutation, spec.p
    if perm is None or p is None:
        raise StateError("mix_pair needs a sampled MixSpec (p and permutation set)")
    if len(perm) != z.shape[0] or len(perm) != y.shape[0]:
        raise DimensionError(
            f"permutation of length {len(perm)} does not match batch sizes {z.shape[0]} (features) / {y.shape[0]} (labels)"
        )
    q = 1.0 - p
    return p * z + q * z[perm], p * y + q * y[perm]


def route_mixed_grad(g, spec):
    """Transpose of ``z -> p*z + (1-p)*z[perm]`` along the batch axis."""
    inverse = np.argsort(spec.permutation)
    return spec.p * g + (1.0 - spec.p) * g[inverse]


class MixingModule:
    """One mixing module attached at a hidden state.

    ``forward`` records ``(p, perm, F)`` for ``backward``; the recorded state
    is overwritten on the next forward call.
    """

    def __init__(self, alpha=3.0, op_forward=True, state=None):
        self.template = MixSpec(alpha=alpha, op_forward=op_forward)
        self.state = state
        self.last_spec = None
        self._in_flow = None

    @property
    def alpha(self):
        return self.template.alpha

    @property
    def op_forward(self):
        return self.template.op_forward

    def sample(self, batch_size, rng):
        return self.template.sampled(batch_size, rng)

    def forward_arrays(self, z, labels, spec):
        """Array-level forward; ``z`` is ``(B, F, ...)`` and ``labels`` is ``(B, F, C)``."""
        if labels.shape[:2] != z.shape[:2]:
            raise DimensionError(f"labels {labels.shape} not aligned with features {z.shape}")
        check_finite(z, "mixing module input")
        z_mixed, y_mixed = mix_pair(z, labels, spec)
        if spec.op_forward:
            return np.concatenate([z, z_mixed], axis=1), np.concatenate([labels, y_mixed], axis=1)
        return z_mixed, y_mixed

    def backward_arrays(self, grad_out, spec=None, in_flow=None):
        spec = spec or self.last_spec
        F = in_flow or self._in_flow
        if spec is None or F is None:
            raise StateError("mixing module backward called before forward")
        if spec.op_forward:
            if grad_out.shape[1] != 2 * F:
                raise StateError(f"expected gradient with flow size {2 * F}, got {grad_out.shape[1]}")
            grad_orig, grad_m = grad_out[:, :F], grad_out[:, F:]
            return (grad_orig + route_mixed_grad(grad_m, spec)) / 2.0
        if grad_out.shape[1] != F:
            raise StateError(f"expected gradient with flow size {F}, got {grad_out.shape[1]}")
        return route_mixed_grad(grad_out, spec)

    def forward(self, z, labels, spec):
        """Tape-level forward on a Tensor; returns ``(Tensor, labels)``."""
        out, out_labels = self.forward_arrays(z.data, labels, spec)
        F = z.shape[1]
        self.last_spec, self._in_flow = spec, F
        return _record(out, (z,), lambda g: (self.backward_arrays(g, spec, F),), "mixing"), out_labels

    __call__ = forward


def mixup_reference(x, y, p, permutation):
    """Plain Mixup of one batch, written out independently of the module."""
    return p * x + (1.0 - p) * x[permutation], p * y + (1.0 - p) * y[permutation]
