"""Parameterized layers on top of the autodiff core.

Registration is explicit: a layer creates its parameters through
``add_param`` and wires submodules through ``add_module``, which gives
every tensor a stable dotted name for checkpoints and trainability
control. No attribute magic.

Init policy: truncated normal (std 0.02, resampled beyond two sigma) for
projection kernels, zeros for biases, ones for norm gains.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

__all__ = [
    "Param",
    "Module",
    "Dense",
    "Conv2d",
    "BatchNorm",
    "LayerNorm",
    "MultiHeadAttention",
    "trunc_normal",
]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples with |x| > 2 std redrawn, the usual projection init."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


class Param:
    """A named leaf tensor plus its trainability flag.

    Freezing also clears requires_grad so no gradient flows into the leaf.
    """

    __slots__ = ("tensor", "_trainable")

    def __init__(self, tensor: Tensor, trainable: bool = True):
        self.tensor = tensor
        self._trainable = trainable
        tensor.requires_grad = trainable

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = flag
        self.tensor.requires_grad = flag


class Module:
    def __init__(self):
        self._params: dict[str, Param] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._modules: dict[str, "Module"] = {}
        self.training = True

    # registration -----------------------------------------------------

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array, dtype=np.float32), requires_grad=True)
        self._params[name] = Param(t)
        return t

    def add_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        buf = np.asarray(array, dtype=np.float32).copy()
        self._buffers[name] = buf
        return buf

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    # traversal --------------------------------------------------------

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_params(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def leaf_modules(self) -> Iterator["Module"]:
        """Parameterized modules with no parameterized submodules."""
        for m in self.modules():
            if m._params:
                yield m

    def set_mode(self, training: bool) -> None:
        for m in self.modules():
            m.training = training

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.named_params():
            p.trainable = flag

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.tensor.grad = None

    def param_count(self) -> int:
        return sum(p.tensor.size for _, p in self.named_params())

    # state transfer ---------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in registration order, for checkpoints."""
        out = {name: p.tensor.data for name, p in self.named_params()}
        for name, buf in self.named_buffers():
            out[name] = buf
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = [k for k in own if k not in arrays]
        extra = [k for k in arrays if k not in own]
        if missing or extra:
            raise ShapeError(
                f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, p in self.named_params():
            src = arrays[name]
            if src.shape != p.tensor.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {src.shape} != model shape {p.tensor.shape}"
                )
            p.tensor.data = src.astype(np.float32, copy=True)
        for name, buf in self.named_buffers():
            src = arrays[name]
            if src.shape != buf.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {src.shape} != buffer shape {buf.shape}"
                )
            buf[...] = src

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Dense(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = self.add_param("w", trunc_normal(rng, (din, dout)))
        self.b = self.add_param("b", np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else T.reshape(x, (x.size // x.shape[-1], x.shape[-1]))
        out = T.matmul(flat, self.w)
        if x.ndim != 2:
            out = T.reshape(out, lead + (self.w.shape[1],))
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class Conv2d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.w = self.add_param("w", trunc_normal(rng, (cout, cin, kernel, kernel)))
        self.b = self.add_param("b", np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        if self.b is not None:
            out = T.add(out, T.reshape(self.b, (1, self.b.shape[0], 1, 1)))
        return out


class BatchNorm(Module):
    """Channel normalization with EMA running stats.

    Uses batch statistics only when the module is in training mode AND its
    parameters are trainable; a frozen layer keeps serving (and never
    updates) its running stats, so freezing a backbone makes its forward
    independent of batch composition.
    """

    def __init__(self, channels: int, eps: float = 1e-3, momentum: float = 0.99):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_buffer("running_mean", np.zeros(channels))
        self.running_var = self.add_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        live = self.training and self._params["gamma"].trainable
        return T.batchnorm(
            x,
            self.gamma,
            self.beta,
            eps=self.eps,
            training=live,
            running_mean=self.running_mean,
            running_var=self.running_var,
            momentum=self.momentum,
            update_running=live,
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta, eps=self.eps)


class MultiHeadAttention(Module):
    """Self-attention over (B, T, D); forward returns (output, weights)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.wq = self.add_param("wq", trunc_normal(rng, (dim, dim)))
        self.wk = self.add_param("wk", trunc_normal(rng, (dim, dim)))
        self.wv = self.add_param("wv", trunc_normal(rng, (dim, dim)))
        self.wo = self.add_param("wo", trunc_normal(rng, (dim, dim)))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return T.multihead_attention(
            x, self.wq, self.wk, self.wv, self.wo, heads=self.heads
        )
