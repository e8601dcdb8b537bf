"""Parameterized layers built on the tensor engine.

Modules own their parameters (gradient leaves) and expose them by
hierarchical name for the optimizer and checkpointing.  Stochastic layers
draw from a shared ``RngBox`` so one seed controls a whole model.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, InitializationError, ShapeError
from .tensor import Tensor


class RngBox:
    """Mutable holder for the random stream shared by a model's layers."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)


class Module:
    """Base class: tracks child modules, parameters, buffers, and mode."""

    def __init__(self):
        self.training = True

    def _components(self):
        for name, value in vars(self).items():
            yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in self._components():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                params[full] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{full}.{i}."))
        return params

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        buffers: dict[str, np.ndarray] = {}
        for name, value in self._components():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                buffers.update(value.named_buffers(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        buffers.update(item.named_buffers(f"{full}.{i}."))
        if isinstance(self, BatchNorm):
            buffers[f"{prefix}running_mean"] = self.running_mean
            buffers[f"{prefix}running_var"] = self.running_var
            buffers[f"{prefix}num_updates"] = np.asarray([self.num_updates], dtype=np.float64)
        return buffers

    def load_buffers(self, buffers: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, value in self._components():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                value.load_buffers(buffers, f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item.load_buffers(buffers, f"{full}.{i}.")
        if isinstance(self, BatchNorm):
            self.running_mean = buffers[f"{prefix}running_mean"].copy()
            self.running_var = buffers[f"{prefix}running_var"].copy()
            self.num_updates = int(buffers[f"{prefix}num_updates"][0])

    def modules(self):
        yield self
        for _, value in self._components():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, flag: bool = True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    scale = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


def zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.w = he_normal(rng, (in_dim, out_dim), in_dim, dtype)
        self.b = zeros((out_dim,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        # init std 1/sqrt(dim): after the sqrt(dim) embedding scale the token
        # signal matches the unit-amplitude positional encoding
        scale = 1.0 / np.sqrt(dim)
        self.table = Tensor((rng.standard_normal((vocab, dim)) * scale).astype(dtype), requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.take(self.table, np.asarray(ids, dtype=np.int64))


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.gain = ones((dim,), dtype)
        self.bias = zeros((dim,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class BatchNorm(Module):
    """Channels-last batch normalization over all leading axes.

    Train mode normalizes with the current batch statistics and updates the
    running exponential averages; eval mode is a pure affine map using the
    running statistics and refuses to run before any were recorded.
    """

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gain = ones((channels,), dtype)
        self.bias = zeros((channels,), dtype)
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.num_updates = 0

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.gain.shape[0]:
            raise ShapeError(f"batch_norm: expected {self.gain.shape[0]} channels, got input {x.shape}")
        if self.training:
            n_stats = int(np.prod(x.shape[:-1]))
            if n_stats <= 1:
                raise ShapeError("batch_norm: train mode needs statistics over more than one element")
            axes = tuple(range(x.ndim - 1))
            mu = T.mean(x, axis=axes, keepdims=True)
            centered = T.sub(x, mu)
            var = T.mean(T.mul(centered, centered), axis=axes, keepdims=True)
            inv = T.power(T.add(var, Tensor(np.asarray(self.eps, dtype=x.dtype.type))), -0.5)
            out = T.add(T.mul(T.mul(centered, inv), self.gain), self.bias)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data.reshape(-1).astype(np.float64)
            self.running_var = (1.0 - m) * self.running_var + m * var.data.reshape(-1).astype(np.float64)
            self.num_updates += 1
            return out
        if self.num_updates == 0:
            raise InitializationError("batch_norm: eval mode before any batch statistics were recorded")
        scale = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype.type)
        shift = self.running_mean.astype(x.dtype.type)
        centered = T.sub(x, Tensor(shift))
        return T.add(T.mul(T.mul(centered, Tensor(scale)), self.gain), self.bias)


class Dropout(Module):
    def __init__(self, rate: float, rngbox: RngBox):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rngbox = rngbox

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        return T.dropout(x, self.rate, self.rngbox.rng)


class Conv1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: tuple[int, int] = (0, 0),
        dtype=np.float32,
        bias: bool = True,
    ):
        super().__init__()
        self.w = he_normal(rng, (kernel, in_channels, out_channels), kernel * in_channels, dtype)
        self.b = zeros((out_channels,), dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv1d(x, self.w, self.stride, self.padding)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int],
        rng: np.random.Generator,
        stride: tuple[int, int] = (1, 1),
        padding: tuple[int, int] = (0, 0),
        dtype=np.float32,
        bias: bool = True,
    ):
        super().__init__()
        kh, kw = kernel
        self.w = he_normal(rng, (kh, kw, in_channels, out_channels), kh * kw * in_channels, dtype)
        self.b = zeros((out_channels,), dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.w, self.stride, self.padding)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: tuple[int, int, int],
        rng: np.random.Generator,
        stride: tuple[int, int, int] = (1, 1, 1),
        padding: tuple[int, int, int] = (0, 0, 0),
        dtype=np.float32,
        bias: bool = True,
    ):
        super().__init__()
        kt, kh, kw = kernel
        self.w = he_normal(rng, (kt, kh, kw, in_channels, out_channels), kt * kh * kw * in_channels, dtype)
        self.b = zeros((out_channels,), dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv3d(x, self.w, self.stride, self.padding)
        if self.b is not None:
            out = T.add(out, self.b)
        return out


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"depthwise kernel must be odd for same-padding, got {kernel}")
        self.w = he_normal(rng, (kernel, channels), kernel, dtype)
        self.b = zeros((channels,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.depthwise_conv1d(x, self.w), self.b)
