"""Dense tensors with reverse-mode differentiation.

Every operation records a closure that maps the gradient of its output to the
gradients of its inputs.  ``backward`` walks the recorded graph in reverse
topological order, accumulates gradients into leaf tensors, and then releases
the graph so it cannot be replayed.

Image tensors use (batch, channels, height, width) layout.  Values default to
32-bit floats; verification code switches to 64-bit with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import GraphStateError, ShapeError

_default_dtype = np.float32
_local = threading.local()


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _default_dtype
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a gradient buffer of identical shape."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or _default_dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {what}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str = "op") -> Tensor:
    """Wrap a forward result computed outside this module as a graph node.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per parent.
    """
    return _make(np.asarray(data), parents, backward_fn, name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- graph walk


def _toposort(root: Tensor) -> list:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with requires_grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphStateError("graph already consumed by a previous backward pass")
    if loss._backward is None:
        if loss.requires_grad:
            # Leaf loss: d(loss)/d(loss) = 1.
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise GraphStateError("loss was not produced by recorded operations")

    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, "backward")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._consumed = True


# ---------------------------------------------------------- elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), grad_fn, "mul")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(a.data[index]), (a,), grad_fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------- affine and conv


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        grads = [g @ wd.T, xd.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "dense")


def _out_size(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Rows are output positions (n, ho, wo); columns are (c, ki, kj)."""
    n, c, h, w = x.shape
    p = (k - 1) // 2
    ho, wo = _out_size(h, stride), _out_size(w, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    sn, sc, sh, sw = xp.strides
    view = as_strided(xp, (n, ho, wo, c, k, k), (sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)
    return view.reshape(n * ho * wo, c * k * k)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int):
    n, _, h, wd = x.shape
    cout, _, k, _ = w.shape
    cols = _im2col(x, k, stride)
    out = cols @ w.reshape(cout, -1).T
    out = out.reshape(n, _out_size(h, stride), _out_size(wd, stride), cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_input_grad(dy: np.ndarray, w: np.ndarray, stride: int, in_hw: tuple) -> np.ndarray:
    """Adjoint of ``_conv_forward`` w.r.t. its input (scatter of weighted windows)."""
    n, cout, ho, wo = dy.shape
    _, cin, k, _ = w.shape
    h, wd = in_hw
    p = (k - 1) // 2
    # Laid out (cin, k, k, n, ho, wo) so every kernel tap scatters a contiguous block.
    dcols = w.reshape(cout, -1).T @ dy.transpose(1, 0, 2, 3).reshape(cout, -1)
    dcols = dcols.reshape(cin, k, k, n, ho, wo)
    dxp = np.zeros((cin, n, h + 2 * p, wd + 2 * p), dtype=dy.dtype)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, i, j]
    return np.ascontiguousarray(dxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3))


def _conv_weight_grad(cols: np.ndarray, dy: np.ndarray, w_shape: tuple) -> np.ndarray:
    cout = dy.shape[1]
    return (dy.transpose(0, 2, 3, 1).reshape(-1, cout).T @ cols).reshape(w_shape)


def _check_conv_args(op, x, weight, bias, stride, in_axis, out_axis):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"{op}: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    if int(stride) != stride or stride < 1:
        raise ValueError(f"{op}: stride must be a positive integer, got {stride}")
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ShapeError(f"{op}: kernel must be square, got {weight.shape[2:]}")
    # Even kernels only fit the transposed case, where they tile the stride.
    if (op == "conv2d" and k % 2 == 0) or k - 2 * ((k - 1) // 2) > stride:
        raise ShapeError(f"{op}: kernel size {k} incompatible with stride {stride}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels, weight expects {weight.shape[in_axis]}")
    if bias is not None and bias.shape != (weight.shape[out_axis],):
        raise ShapeError(f"{op}: bias {bias.shape} does not match {weight.shape[out_axis]} output channels")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero same-padding (K-1)/2.

    weight is (Cout, Cin, K, K); output spatial size is floor((H-1)/stride)+1.
    """
    _check_conv_args("conv2d", x, weight, bias, stride, 1, 0)
    xd, wd = x.data, weight.data
    out, cols = _conv_forward(xd, wd, stride)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        dx = _conv_input_grad(g, wd, stride, xd.shape[2:]) if x.requires_grad else None
        grads = [dx, _conv_weight_grad(cols, g, wd.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "conv2d")


def deconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Transposed convolution producing exactly stride x the input size.

    weight is (Cin, Cout, K, K).  The forward pass is the input gradient of
    the conv2d that maps the output space back onto the input space.
    """
    _check_conv_args("deconv2d", x, weight, bias, stride, 0, 1)
    xd, wd = x.data, weight.data
    out_hw = (xd.shape[2] * stride, xd.shape[3] * stride)
    out = _conv_input_grad(xd, wd, stride, out_hw)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        dx, gcols = _conv_forward(g, wd, stride)
        grads = [dx, _conv_weight_grad(gcols, xd, wd.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "deconv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, training: bool,
               running_mean: np.ndarray, running_var: np.ndarray,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode the running statistics are updated in place.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        count = xd.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    g_, b_ = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    out = xhat * g_ + b_

    def grad_fn(grad):
        dgamma = (grad * xhat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dxhat = grad * g_
        if training:
            m = xd.size // c
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return _make(out.astype(xd.dtype), (x, gamma, beta), grad_fn, "batch_norm")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {np.shape(labels)}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn, "softmax_cross_entropy")


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------- optimisation


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """value <- value - lr * gradient, then zero the gradients."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.data -= (lr * p.grad).astype(p.dtype)
        p.grad = np.zeros_like(p.data)


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and optional global-norm clipping."""

    def __init__(self, params: Sequence[Parameter], lr: float, momentum: float = 0.0,
                 clip_norm: Optional[float] = None):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr, self.momentum, self.clip_norm = lr, momentum, clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params)))

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += (scale * p.grad).astype(v.dtype)
            p.data -= (self.lr * v).astype(p.dtype)
            p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)


class Adam(SGD):
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: Optional[float] = None):
        super().__init__(params, lr, 0.0, clip_norm)
        self.betas, self.eps, self.t = betas, eps, 0
        self.second = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.velocity, self.second):
            g = scale * p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.grad = np.zeros_like(p.data)


def grad_check(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backprop gradients and central differences.

    ``fn`` must rebuild the scalar loss from ``tensors`` deterministically on
    every call.  Errors are |a - n| / max(1e-8, |a| + |n|).
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit tensors")
        t.grad = np.zeros_like(t.data)
    backward(fn())
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    with no_grad():
        for t, a in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                ai = a.reshape(-1)[i]
                err = abs(ai - numeric) / max(1e-8, abs(ai) + abs(numeric))
                worst = max(worst, err)
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    return worst
