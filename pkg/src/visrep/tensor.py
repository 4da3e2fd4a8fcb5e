"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major float32 (or float64, for gradient-check
runs) numpy buffer. Operations executed while a ``Tape`` is active are
recorded in execution order, which is already topological; replaying the
record backwards accumulates gradients into every ``requires_grad`` leaf.
Outputs never alias their inputs, so buffers stay immutable between
optimizer steps.

Broadcasting is restricted to bias-add patterns: the result shape of a
binary op must equal one operand's shape. Anything richer needs an
explicit reshape, which keeps every backward rule auditable.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, LabelError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "concat2",
    "tsum",
    "tmean",
    "gather_rows",
    "sqrt",
    "relu",
    "sigmoid",
    "swish",
    "gelu",
    "softmax",
    "activation",
    "batchnorm",
    "layernorm",
    "global_avg_pool",
    "avg_pool2d",
    "conv2d",
    "cross_entropy",
    "multihead_attention",
    "l2_normalize",
    "backward",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense array plus optional gradient, the universal numeric carrier."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and np.asarray(data).dtype in _FLOAT_DTYPES:
            # numpy float input keeps its precision so f64 check mode propagates
            arr = np.asarray(data)
        else:
            # python lists, scalars, and integer arrays land on the f32 default
            arr = np.asarray(data, dtype=np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"


class _Node:
    __slots__ = ("inputs", "out", "rule")

    def __init__(self, inputs: tuple[Tensor, ...], out: Tensor, rule: Callable):
        self.inputs = inputs
        self.out = out
        self.rule = rule


_TAPES: list["Tape"] = []


class Tape:
    """Execution-ordered operation record for one differentiable region."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every recorded requires_grad leaf.

        Intermediate gradients are discarded as soon as their producing
        node has been replayed.
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        produced = {id(node.out) for node in self._nodes}
        if id(loss) not in produced:
            raise ContractError("loss tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gin in zip(node.inputs, node.rule(g)):
                if gin is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + gin
                    else:
                        grads[key] = gin
                else:
                    t.grad = gin if t.grad is None else t.grad + gin


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1]._nodes.append(_Node(inputs, out, rule))
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_binary_shapes(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not align")
    if out_shape != a.shape and out_shape != b.shape:
        raise ShapeError(
            f"{opname}: broadcast beyond bias-add is not supported "
            f"({a.shape} vs {b.shape}); reshape explicitly"
        )
    return out_shape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _out_dtype(*arrs: np.ndarray):
    return np.float64 if any(a.dtype == np.float64 for a in arrs) else np.float32


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a, b, "add")
    out = Tensor((a.data + b.data).astype(_out_dtype(a.data, b.data), copy=False))

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a, b, "sub")
    out = Tensor((a.data - b.data).astype(_out_dtype(a.data, b.data), copy=False))

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a, b, "mul")
    out = Tensor((a.data * b.data).astype(_out_dtype(a.data, b.data), copy=False))

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a, b, "div")
    out = Tensor((a.data / b.data).astype(_out_dtype(a.data, b.data), copy=False))

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))

    def rule(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), rule)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _record(out, (a,), rule)


def concat2(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeError(f"concat2: rank mismatch {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    split = a.shape[axis]

    def rule(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _record(out, (a, b), rule)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx, a.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is None:
            gx = np.broadcast_to(g, a.shape)
        else:
            gx = g if keepdims else np.expand_dims(g, axis)
            gx = np.broadcast_to(gx, a.shape)
        return ((gx / count).astype(a.dtype, copy=False),)

    return _record(out, (a,), rule)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along the first axis; backward scatter-adds (duplicates ok)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def rule(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (a,), rule)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} x {b.shape}")
    if a.ndim != b.ndim and not (a.ndim == 2 and b.ndim == 2):
        raise ShapeError(f"matmul: rank mismatch {a.shape} x {b.shape}")
    if a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ, {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), rule)


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def rule(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), rule)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s)

    def rule(g):
        return (g * s * (1.0 - s),)

    return _record(out, (a,), rule)


def swish(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(a.data * s)

    def rule(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _record(out, (a,), rule)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh form; smooth enough for every backbone here and scipy-free
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dt = (1.0 - t * t) * dinner
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _record(out, (a,), rule)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by row-max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), rule)


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "swish": swish,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "softmax": softmax,
}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation kind '{kind}'")
    return fn(a)


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    out = Tensor(r)

    def rule(g):
        return (g * 0.5 / r,)

    return _record(out, (a,), rule)


# ---------------------------------------------------------------------------
# normalization


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-3,
    training: bool = True,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = 0.99,
    update_running: bool = True,
) -> Tensor:
    """Per-channel normalization over batch (+ spatial) axes.

    Channel axis is 1 for >=3-D input and the last axis for 2-D input.
    Training mode uses biased batch statistics and, when asked, folds them
    into the running buffers in place; inference mode reads the buffers.
    """
    if x.ndim < 2:
        raise ShapeError(f"batchnorm: input must be >=2-D, got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("batchnorm: empty batch")
    caxis = 1 if x.ndim > 2 else x.ndim - 1
    channels = x.shape[caxis]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"batchnorm: gamma/beta must be ({channels},), got {gamma.shape}/{beta.shape}"
        )
    axes = tuple(i for i in range(x.ndim) if i != caxis)
    bshape = tuple(channels if i == caxis else 1 for i in range(x.ndim))

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running and running_mean is not None:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
    else:
        if running_mean is None or running_var is None:
            raise ContractError("batchnorm inference mode needs running stats")
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = Tensor(
        (gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)).astype(
            _out_dtype(x.data, gamma.data), copy=False
        )
    )

    count = x.size // channels

    def rule(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = gxhat.sum(axis=axes, keepdims=True)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv_std.reshape(bshape) / count) * (
                count * gxhat - s1 - xhat * s2
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return _record(out, (x, gamma, beta), rule)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must be ({d},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def rule(g):
        axes = tuple(range(x.ndim - 1))
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data
        s1 = gxhat.sum(axis=-1, keepdims=True)
        s2 = (gxhat * xhat).sum(axis=-1, keepdims=True)
        gx = (inv_std / d) * (d * gxhat - s1 - xhat * s2)
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    return _record(out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# pooling and convolution


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial axes (B,C,H,W)->(B,C) or the token axis (B,T,D)->(B,D)."""
    if x.ndim == 4:
        b, c, h, w = x.shape
        if h == 0 or w == 0:
            raise ShapeError(f"global_avg_pool: empty spatial axes in {x.shape}")
        out = Tensor(x.data.mean(axis=(2, 3)))
        count = h * w

        def rule(g):
            return (
                np.broadcast_to(g[:, :, None, None] / count, x.shape).astype(
                    x.dtype, copy=True
                ),
            )

        return _record(out, (x,), rule)
    if x.ndim == 3:
        b, t, d = x.shape
        if t == 0:
            raise ShapeError(f"global_avg_pool: empty token axis in {x.shape}")
        out = Tensor(x.data.mean(axis=1))

        def rule(g):
            return (
                np.broadcast_to(g[:, None, :] / t, x.shape).astype(x.dtype, copy=True),
            )

        return _record(out, (x,), rule)
    raise ShapeError(f"global_avg_pool: expected 3-D or 4-D input, got {x.shape}")


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (B, C, Ho, Wo, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_windows(
    cols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    """Inverse of _windows: sum window gradients back onto the padded grid."""
    b, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = cols.shape[2], cols.shape[3]
    xg = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    hidx = (np.arange(ho) * stride)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    widx = (np.arange(wo) * stride)[None, :, None, None] + np.arange(kw)[None, None, None, :]
    hidx = np.broadcast_to(hidx, (ho, wo, kh, kw))
    widx = np.broadcast_to(widx, (ho, wo, kh, kw))
    np.add.at(xg, (slice(None), slice(None), hidx, widx), cols)
    if padding:
        xg = xg[:, :, padding:-padding, padding:-padding]
    return xg


def avg_pool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Average pooling with zero padding; the divisor is always kernel**2."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ShapeError(
            f"avg_pool2d: kernel {kernel} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    xp = _pad2d(x.data, padding)
    win = _windows(xp, kernel, kernel, stride)
    out = Tensor(win.mean(axis=(4, 5)))
    denom = kernel * kernel

    def rule(g):
        cols = np.broadcast_to(
            g[:, :, :, :, None, None] / denom, g.shape + (kernel, kernel)
        ).astype(x.dtype, copy=True)
        return (_scatter_windows(cols, x.shape, kernel, kernel, stride, padding),)

    return _record(out, (x,), rule)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B,C,H,W) input with (O,C,kh,kw) kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >=1, got {stride}")
    b, c, h, wid = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} kernel {w.shape}")
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wid + 2 * padding}"
        )
    xp = _pad2d(x.data, padding)
    win = _windows(xp, kh, kw, stride)  # (B, C, Ho, Wo, kh, kw)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out_data = (cols @ wmat.T).transpose(0, 2, 1).reshape(b, o, ho, wo)
    out = Tensor(np.ascontiguousarray(out_data))

    def rule(g):
        gmat = g.reshape(b, o, ho * wo).transpose(0, 2, 1)  # (B, L, O)
        gw = np.einsum("blo,blk->ok", gmat, cols).reshape(w.shape)
        gcols = gmat @ wmat  # (B, L, C*kh*kw)
        gwin = gcols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = _scatter_windows(
            np.ascontiguousarray(gwin), x.shape, kh, kw, stride, padding
        )
        return gx.astype(x.dtype, copy=False), gw.astype(w.dtype, copy=False)

    return _record(out, (x, w), rule)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels must be ({b},), got {labels.shape}")
    bad = np.nonzero((labels < 0) | (labels >= c))[0]
    if bad.size:
        row = int(bad[0])
        raise LabelError(f"label {int(labels[row])} out of range [0, {c}) at row {row}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(np.asarray(-logp[np.arange(b), labels].mean(), dtype=logits.dtype))

    def rule(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return ((g / b) * p,)

    return _record(out, (logits,), rule)


# ---------------------------------------------------------------------------
# composites


def multihead_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over (B,T,D); returns (output, weights).

    Attention weights come back as (B, heads, T, T) with rows summing to 1,
    ready for probing.
    """
    if x.ndim != 3:
        raise ShapeError(f"multihead_attention: expected (B,T,D), got {x.shape}")
    b, t, d = x.shape
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    dh = d // heads

    def project(w: Tensor) -> Tensor:
        flat = matmul(reshape(x, (b * t, d)), w)
        split = reshape(flat, (b, t, heads, dh))
        return transpose(split, (0, 2, 1, 3))  # (B, heads, T, dh)

    q = project(wq)
    k = project(wk)
    v = project(wv)
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(logits)  # (B, heads, T, T)
    ctx = matmul(attn, v)  # (B, heads, T, dh)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b * t, d))
    out = reshape(matmul(merged, wo), (b, t, d))
    return out, attn


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm.

    The guard is max(norm2, eps), written as relu(norm2 - eps) + eps so it
    never biases a vector whose squared norm already exceeds eps.
    """
    n2 = tsum(mul(x, x), axis=-1, keepdims=True)
    guarded = add(relu(sub(n2, eps)), eps)
    return div(x, sqrt(guarded))
