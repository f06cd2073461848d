"""Minimal module system: parameter containers built on the tensor ops."""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for name, p in self.named_parameters():
            arr = state[prefix + name]
            if arr.shape != p.shape:
                raise ValueError(f"{prefix + name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)
            p.zero_grad()
        for name, buf in self.named_buffers():
            buf[...] = state[prefix + name]

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        for name, buf in list(self.named_buffers()):
            owner, attr = self._locate(name)
            setattr(owner, attr, buf.astype(dtype))
        return self

    def _locate(self, dotted: str):
        owner = self
        *path, attr = dotted.split(".")
        for part in path:
            owner = owner[int(part)] if isinstance(owner, (list, tuple)) else getattr(owner, part)
        return owner, attr


def modules(module: Module) -> Iterator[Module]:
    yield module
    for _, child in module.children():
        yield from modules(child)


@contextlib.contextmanager
def recalibrate_batchnorm(module: Module):
    """Re-estimate batch-norm running statistics as an average over the forwards run inside.

    The module is put in training mode with graph recording off; the previous
    mode is restored on exit.
    """
    layers = [m for m in modules(module) if isinstance(m, BatchNorm)]
    was_training = module.training
    for layer in layers:
        layer.calls = 0
    module.train()
    try:
        with T.no_grad():
            yield
    finally:
        for layer in layers:
            layer.calls = None
        module.train(was_training)


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def clip_spectral_norm(w: np.ndarray, limit: float = 1.0, iters: int = 30) -> np.ndarray:
    """Rescale ``w`` so its largest singular value (power iteration) is at most ``limit``."""
    v = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
    for _ in range(iters):
        u = w @ v
        u /= np.linalg.norm(u)
        v = w.T @ u
        sigma = np.linalg.norm(v)
        v /= sigma
    return w * (limit / sigma) if sigma > limit else w


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride, rng, bias=True):
        self.stride = stride
        self.weight = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride)


class Deconv2d(Module):
    def __init__(self, cin, cout, k, stride, rng, bias=True):
        self.stride = stride
        # Each output pixel receives about cin * (k/stride)^2 contributions.
        fan_in = max(1, cin * k * k // (stride * stride))
        self.weight = Parameter(he_normal(rng, (cin, cout, k, k), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.deconv2d(x, self.weight, self.bias, self.stride)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=self.gamma.dtype)
        self.running_var = np.ones(channels, dtype=self.gamma.dtype)
        self.calls = None  # set by recalibration: running stats become a plain average

    def forward(self, x: Tensor) -> Tensor:
        momentum = self.momentum
        if self.calls is not None and self.training:
            self.calls += 1
            momentum = 1.0 / self.calls
        return T.batch_norm(x, self.gamma, self.beta, self.training,
                            self.running_mean, self.running_var, momentum, self.eps)


class Dense(Module):
    def __init__(self, din, dout, rng, bias=True, gain=2.0):
        self.weight = Parameter(rng.normal(0.0, np.sqrt(gain / din), size=(din, dout)))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


class Recurrent(Module):
    """Fully connected recurrent layer: h_t = relu(x_t W_in + h_{t-1} W_rec + b)."""

    def __init__(self, din, width, rng):
        self.width = width
        self.w_in = Parameter(he_normal(rng, (din, width), din))
        w_rec = rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, width))
        self.w_rec = Parameter(clip_spectral_norm(w_rec, 1.0))
        self.bias = Parameter(np.zeros(width))

    def initial_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.width), dtype=self.w_in.dtype))

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        return T.relu(T.dense(x, self.w_in, self.bias) + T.dense(h, self.w_rec))


class ConvBlock(Module):
    """conv or deconv, then batch norm and relu; the layer bias is folded into BN."""

    def __init__(self, cin, cout, k, stride, rng, transposed=False):
        layer = Deconv2d if transposed else Conv2d
        self.layer = layer(cin, cout, k, stride, rng, bias=False)
        self.bn = BatchNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.layer(x)))


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window of an image tensor."""
    if x.shape[2] == height and x.shape[3] == width:
        return x
    return x[:, :, :height, :width]
