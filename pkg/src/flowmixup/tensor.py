"""Dense float64 tensors with a small reverse-mode tape.

Feature tensors carry ``(batch, flow, *features)`` axes. Every layer here
treats the flow axis as an extra batch axis; only the mixing module looks
across it.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ParseError, StateError, ConfigError


class Tensor:
    """A float64 array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "name", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def flow_size(self):
        return self.data.shape[1]

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def parameter(data, name):
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _record(data, parents, backward, op):
    check_finite(data, f"output of {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    # nothing upstream needs a gradient: keep no tape
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out.op = op
    out._consumed = False
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def square(x):
    return _record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sum_all(x):
    return _record(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean_all(x):
    n = x.data.size
    return _record(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


def relu(x):
    check_finite(x.data, "relu input")
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    check_finite(x.data, "sigmoid input")
    z = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# ---------------------------------------------------------------- layers

def dense(x, W, b):
    """``out[b, f, :] = x[b, f, :] @ W + b``."""
    if x.ndim < 3 or W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {W.shape} / bias {b.shape}")
    check_finite(x.data, "dense input")
    din, dout = W.shape
    out = x.data @ W.data + b.data

    def backward(g):
        flat_x = x.data.reshape(-1, din)
        flat_g = g.reshape(-1, dout)
        return g @ W.data.T, flat_x.T @ flat_g, flat_g.sum(axis=0)

    return _record(out, (x, W, b), backward, "dense")


def conv_output_length(length, k, stride):
    pad = k // 2
    return (length + 2 * pad - k) // stride + 1


def conv1d(x, kernels, bias=None, stride=1):
    """Same-padded 1-D cross-correlation over ``(B, F, C, L)`` inputs.

    Padding is ``k // 2`` so the length is preserved at stride 1.
    """
    if stride < 1:
        raise ConfigError(f"conv1d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or kernels.ndim != 3 or kernels.shape[1] != x.shape[2]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d: kernel size must be odd, got {k}")
    B, F, _, L = x.shape
    if L < k:
        raise DimensionError(f"conv1d: length {L} shorter than kernel {k}")
    check_finite(x.data, "conv1d input")
    if bias is None:
        bias = Tensor(np.zeros(c_out))
    pad = k // 2
    L_out = conv_output_length(L, k, stride)
    xp = np.pad(x.data.reshape(B * F, c_in, L), ((0, 0), (0, 0), (pad, pad)))
    span = stride * (L_out - 1) + 1
    K = kernels.data
    out = np.zeros((B * F, c_out, L_out))
    for j in range(k):
        out += K[:, :, j] @ xp[:, :, j:j + span:stride]
    out += bias.data[None, :, None]

    def backward(g):
        g = g.reshape(B * F, c_out, L_out)
        gxp = np.zeros_like(xp)
        gK = np.empty_like(K)
        for j in range(k):
            window = xp[:, :, j:j + span:stride]
            gK[:, :, j] = np.einsum("nol,ncl->oc", g, window)
            gxp[:, :, j:j + span:stride] += K[:, :, j].T @ g
        gx = gxp[:, :, pad:pad + L].reshape(x.shape)
        return gx, gK, g.sum(axis=(0, 2))

    return _record(out.reshape(B, F, c_out, L_out), (x, kernels, bias), backward, "conv1d")


def conv2d(x, kernels, bias=None, stride=1):
    """Same-padded 2-D cross-correlation over ``(B, F, C, H, W)`` inputs."""
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 5 or kernels.ndim != 4 or kernels.shape[1] != x.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel sizes must be odd, got {(kh, kw)}")
    B, F, _, H, W = x.shape
    if H < kh or W < kw:
        raise DimensionError(f"conv2d: spatial size {(H, W)} smaller than kernel {(kh, kw)}")
    check_finite(x.data, "conv2d input")
    if bias is None:
        bias = Tensor(np.zeros(c_out))
    ph, pw = kh // 2, kw // 2
    H_out, W_out = conv_output_length(H, kh, stride), conv_output_length(W, kw, stride)
    xp = np.pad(x.data.reshape(B * F, c_in, H, W), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    sh, sw = stride * (H_out - 1) + 1, stride * (W_out - 1) + 1
    K = kernels.data
    out = np.zeros((B * F, c_out, H_out, W_out))
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + sh:stride, j:j + sw:stride]
            out += np.einsum("oc,nchw->nohw", K[:, :, i, j], window)
    out += bias.data[None, :, None, None]

    def backward(g):
        g = g.reshape(B * F, c_out, H_out, W_out)
        gxp = np.zeros_like(xp)
        gK = np.empty_like(K)
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i:i + sh:stride, j:j + sw:stride]
                gK[:, :, i, j] = np.einsum("nohw,nchw->oc", g, window)
                gxp[:, :, i:i + sh:stride, j:j + sw:stride] += np.einsum("oc,nohw->nchw", K[:, :, i, j], g)
        gx = gxp[:, :, ph:ph + H, pw:pw + W].reshape(x.shape)
        return gx, gK, g.sum(axis=(0, 2, 3))

    return _record(out.reshape(B, F, c_out, H_out, W_out), (x, kernels, bias), backward, "conv2d")


def global_avg_pool(x):
    """Mean over every axis after the channel axis: ``(B, F, C, ...) -> (B, F, C)``."""
    if x.ndim < 4:
        raise DimensionError(f"global_avg_pool: need (B, F, C, ...) input, got {x.shape}")
    check_finite(x.data, "global_avg_pool input")
    axes = tuple(range(3, x.ndim))
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)), x.shape) / n,)

    return _record(out, (x,), backward, "global_avg_pool")


def flatten(x):
    """``(B, F, ...) -> (B, F, V)``."""
    B, F = x.shape[:2]
    return _record(x.data.reshape(B, F, -1), (x,), lambda g: (g.reshape(x.shape),), "flatten")


# ---------------------------------------------------------------- backward

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Backpropagate from a scalar ``loss``.

    Returns ``{name: grad}`` for every named parameter reached. Interior
    tape nodes are released afterwards, so a second call on the same loss
    raises :class:`StateError`.
    """
    if loss._consumed:
        raise StateError("backward already ran on this graph; run a new forward pass first")
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            check_finite(g, f"gradient flowing into {parent.op}")
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    grads = {}
    for node in order:
        if node.requires_grad and node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            if node.name is not None:
                grads[node.name] = node.grad
        elif node._backward is not None:
            node._parents = ()
            node._backward = None
            node.grad = None
            node._consumed = True
    loss._consumed = True
    return grads


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    per_parameter: dict = field(default_factory=dict)

    @property
    def max_rel_error(self):
        return max(self.per_parameter.values(), default=0.0)

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


def relative_error(analytic, numeric, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def finite_diff_check(loss_fn, params, eps=1e-5, scales=None):
    """Compare tape gradients with central differences.

    ``loss_fn()`` must rebuild the forward pass deterministically and return a
    scalar Tensor. ``scales`` maps parameter names to the factor the analytic
    gradient is expected to carry relative to the true derivative (the mixing
    module halves gradients flowing upstream of it).
    """
    scales = scales or {}
    grads = backward(loss_fn())
    report = GradCheckReport()
    for p in params:
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * eps)
        expected = numeric * scales.get(p.name, 1.0)
        report.per_parameter[p.name] = relative_error(grads[p.name], expected)
    return report


# ---------------------------------------------------------------- checkpoints

WEIGHTS_MAGIC = b"FLXW1"


def save_checkpoint(params, path):
    """Write ``{name: array}`` as FLXW1: magic, layer count, then per layer
    name, shape and little-endian float64 payload."""
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(5, "magic") != WEIGHTS_MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    (count,) = struct.unpack("<I", take(4, "layer count"))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * n, f"payload of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise ParseError("trailing bytes after last layer", pos)
    return params
