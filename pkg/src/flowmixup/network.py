"""Sequential block classifiers with mixing modules attached at hidden states.

State ``i`` is the input of block ``i`` (0-indexed), so state 0 is the raw
input and state ``len(blocks)`` is the input of the pooling/dense head.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .mixing import MixingModule

MODES = ("erm", "mixup", "manifold_mixup", "flow_mixup")
BLOCK_KINDS = ("conv1d", "conv2d", "dense")
DEFAULT_MIX_POINTS = (2, 4)


@dataclass
class BlockSpec:
    kind: str = "conv1d"
    width: int = 16
    kernel_size: int = 3
    stride: int = 1

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.width < 1 or self.stride < 1 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"invalid block {self}")


@dataclass
class NetworkPlan:
    input_shape: tuple
    num_classes: int
    blocks: list = field(default_factory=list)
    mode: str = "erm"
    mix_points: tuple = None
    alpha: float = 3.0
    op_forward: bool = True
    manifold_include_input: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        if self.mix_points is None:
            self.mix_points = self._default_points()
        self.mix_points = tuple(sorted(set(int(s) for s in self.mix_points)))
        self.validate()

    def _default_points(self):
        if self.mode == "erm":
            return ()
        if self.mode == "mixup":
            return (0,)
        points = tuple(s for s in DEFAULT_MIX_POINTS if s <= len(self.blocks))
        if self.mode == "manifold_mixup" and self.manifold_include_input:
            points = (0,) + points
        return points

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown regularizer mode {self.mode!r}; expected one of {MODES}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not self.blocks:
            raise ConfigError("a plan needs at least one block")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        bad = [s for s in self.mix_points if not 0 <= s <= len(self.blocks)]
        if bad:
            raise ConfigError(f"mix points {bad} outside valid states 0..{len(self.blocks)}")
        if (self.mode == "erm") != (len(self.mix_points) == 0):
            raise ConfigError(f"mode {self.mode!r} is inconsistent with mix points {list(self.mix_points)}")
        if self.mode == "mixup" and self.mix_points != (0,):
            raise ConfigError("mode 'mixup' mixes the raw input only (mix_points = [0])")
        spatial = len(self.input_shape) - 1
        for i, b in enumerate(self.blocks):
            if b.kind == "conv1d" and spatial != 1:
                raise ConfigError(f"block {i}: conv1d needs (C, L) inputs, got input_shape {self.input_shape}")
            if b.kind == "conv2d" and spatial != 2:
                raise ConfigError(f"block {i}: conv2d needs (C, H, W) inputs, got input_shape {self.input_shape}")
            if b.kind != "dense":
                if i > 0 and self.blocks[i - 1].kind == "dense":
                    raise ConfigError(f"block {i}: convolution cannot follow a dense block")

    def op_flags(self):
        """``{state: op_forward}`` for the modules this plan attaches."""
        if self.mode in ("mixup", "manifold_mixup"):
            return {s: False for s in self.mix_points}
        if self.mode == "flow_mixup":
            last = self.mix_points[-1]
            return {s: (True if s != last else bool(self.op_forward)) for s in self.mix_points}
        return {}

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["mix_points"] = list(self.mix_points)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def ecg_like(cls, input_shape, num_classes, widths=(8, 8, 16, 16, 16), strides=(2, 1, 2, 1, 1), **kw):
        blocks = [BlockSpec("conv1d", w, 3, s) for w, s in zip(widths, strides)]
        return cls(input_shape, num_classes, blocks, **kw)

    @classmethod
    def cxr_like(cls, input_shape, num_classes, widths=(8, 8, 16, 16, 16), **kw):
        # two stride-2 stems, then three stride-1 blocks
        strides = (2, 2, 1, 1, 1)
        blocks = [BlockSpec("conv2d", w, 3, s) for w, s in zip(widths, strides)]
        return cls(input_shape, num_classes, blocks, **kw)


@dataclass
class ForwardTrace:
    flow_sizes: list
    labels: list
    mix_flow_path: list
    specs: dict
    chosen_state: int = None


@dataclass
class ForwardResult:
    probabilities: T.Tensor
    labels: np.ndarray
    trace: ForwardTrace


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Network:
    def __init__(self, plan, params, modules):
        self.plan = plan
        self.params = params
        self.modules = modules

    # ------------------------------------------------------------- weights

    @property
    def parameters(self):
        return list(self.params.values())

    def get_weights(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def set_weights(self, weights):
        if set(weights) != set(self.params):
            raise DimensionError(f"checkpoint layers {sorted(weights)} do not match network {sorted(self.params)}")
        for name, arr in weights.items():
            if arr.shape != self.params[name].shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != network shape {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=np.float64)

    # ------------------------------------------------------------- forward

    def _block(self, i, h):
        spec = self.plan.blocks[i]
        W, b = self.params[f"block{i}.weight"], self.params[f"block{i}.bias"]
        if spec.kind == "conv1d":
            h = T.conv1d(h, W, b, spec.stride)
        elif spec.kind == "conv2d":
            h = T.conv2d(h, W, b, spec.stride)
        else:
            if h.ndim > 3:
                h = T.flatten(h)
            h = T.dense(h, W, b)
        return T.relu(h)

    def _head(self, h):
        if h.ndim > 3:
            h = T.global_avg_pool(h)
        return T.dense(h, self.params["head.weight"], self.params["head.bias"])

    def _as_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.plan.input_shape:
            raise DimensionError(f"batch features {x.shape[1:]} do not match plan input shape {self.plan.input_shape}")
        return T.Tensor(x[:, None])

    def run(self, x, y=None, specs=None, collect=False):
        """Forward with explicit per-state mix specs (``{state: MixSpec}``).

        ``y`` is ``(B, C)``. Returns logits Tensor ``(B, F, C)``, labels
        ``(B, F, C)`` (or None), the trace and, if ``collect``, the list of
        block outputs.
        """
        specs = specs or {}
        h = self._as_input(x) if not isinstance(x, T.Tensor) else x
        labels = None if y is None else np.asarray(y, dtype=np.float64)[:, None, :]
        flow_sizes, label_trace, path, outputs = [], [], [h.shape[1]], []
        for s in range(len(self.plan.blocks) + 1):
            if s in specs:
                module = self.modules[s]
                if labels is None:
                    labels = np.zeros(h.shape[:2] + (self.plan.num_classes,))
                h, labels = module.forward(h, labels, specs[s])
                path.append(h.shape[1])
            flow_sizes.append(h.shape[1])
            label_trace.append(labels)
            if s < len(self.plan.blocks):
                h = self._block(s, h)
                if collect:
                    outputs.append(h.data)
        logits = self._head(h)
        trace = ForwardTrace(flow_sizes, label_trace, path, dict(specs))
        return logits, labels, trace, outputs

    def sample_specs(self, batch_size, rng):
        """Draw this step's ``{state: MixSpec}`` according to the plan's mode."""
        if self.plan.mode == "erm":
            return {}, None
        if self.plan.mode == "manifold_mixup":
            states = list(self.modules)
            chosen = states[int(rng.integers(len(states)))]
            return {chosen: self.modules[chosen].sample(batch_size, rng)}, chosen
        return {s: m.sample(batch_size, rng) for s, m in self.modules.items()}, None

    def forward_train(self, x, y, rng, specs=None):
        if specs is None:
            specs, chosen = self.sample_specs(len(x), rng)
        else:
            chosen = None
        logits, labels, trace, _ = self.run(x, y, specs)
        trace.chosen_state = chosen
        return ForwardResult(T.sigmoid(logits), labels, trace)

    def forward_eval(self, x, batch_size=256):
        """Class probabilities ``(B, C)``; mixing modules are inert."""
        x = np.asarray(x, dtype=np.float64)
        chunks = [self.run(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        if not chunks:
            return np.zeros((0, self.plan.num_classes))
        return T.sigmoid(T.Tensor(np.concatenate([c.data for c in chunks]))).data[:, 0]

    def hidden_states(self, x, batch_size=256):
        """Flattened block outputs plus the model output, as ``[(name, (N, V))]``."""
        x = np.asarray(x, dtype=np.float64)
        per_state = None
        for i in range(0, len(x), batch_size):
            logits, _, _, outputs = self.run(x[i:i + batch_size], collect=True)
            probs = T.sigmoid(logits).data
            rows = [o[:, 0].reshape(len(o), -1) for o in outputs] + [probs[:, 0]]
            per_state = [[r] for r in rows] if per_state is None else [acc + [r] for acc, r in zip(per_state, rows)]
        names = [f"block{i}" for i in range(len(self.plan.blocks))] + ["output"]
        return [(n, np.concatenate(chunks)) for n, chunks in zip(names, per_state)]

    def gradient_scales(self, specs):
        """Expected ratio of tape gradient to true derivative for each parameter.

        Each pass-through (op_forward) module downstream of a parameter halves
        the gradient reaching it.
        """
        scales = {}
        halving = [s for s, spec in specs.items() if spec.op_forward]
        for name in self.params:
            if name.startswith("head."):
                scales[name] = 1.0
                continue
            j = int(name.split(".")[0][len("block"):])
            scales[name] = 0.5 ** sum(1 for s in halving if s > j)
        return scales


def build(plan, rng):
    """Initialize parameters for ``plan`` and attach its mixing modules."""
    params = {}
    shape = plan.input_shape
    for i, b in enumerate(plan.blocks):
        if b.kind == "dense":
            din = int(np.prod(shape))
            W = glorot_uniform(rng, (din, b.width), din, b.width)
            shape = (b.width,)
        else:
            c_in = shape[0]
            k = (b.kernel_size,) * (len(shape) - 1)
            ksize = int(np.prod(k))
            W = glorot_uniform(rng, (b.width, c_in) + k, c_in * ksize, b.width * ksize)
            shape = (b.width,) + tuple(T.conv_output_length(d, b.kernel_size, b.stride) for d in shape[1:])
            if min(shape[1:]) < 1:
                raise ConfigError(f"block {i} reduces the spatial size to zero")
        params[f"block{i}.weight"] = T.parameter(W, f"block{i}.weight")
        params[f"block{i}.bias"] = T.parameter(np.zeros(b.width), f"block{i}.bias")
    din = shape[0]
    params["head.weight"] = T.parameter(glorot_uniform(rng, (din, plan.num_classes), din, plan.num_classes), "head.weight")
    params["head.bias"] = T.parameter(np.zeros(plan.num_classes), "head.bias")
    modules = {s: MixingModule(plan.alpha, op, state=s) for s, op in plan.op_flags().items()}
    return Network(plan, params, modules)
