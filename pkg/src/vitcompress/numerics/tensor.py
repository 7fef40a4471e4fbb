"""Dense f32 tensors with a small reverse-mode tape.

Only the op set the ViT forward pass and the trainer need is provided. Each op
builds a node holding its parents and a closure mapping the upstream gradient
to one gradient per parent.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

# sqrt(2/pi) and the cubic coefficient of the tanh GELU approximation
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class DimensionError(ValueError):
    pass


class UnknownParameterError(KeyError):
    pass


class MacCounter:
    def __init__(self):
        self.total = 0
        self.calls = 0

    def add(self, macs: int):
        self.total += int(macs)
        self.calls += 1


_counter: MacCounter | None = None
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_macs():
    """Record multiply-accumulates of every matmul issued inside the block."""
    global _counter
    prev, _counter = _counter, MacCounter()
    try:
        yield _counter
    finally:
        _counter = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a} and {b}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s32 = DTYPE(s)
    return _node(a.data * s32, (a,), lambda g: (g * s32,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    u = GELU_C * (xd + GELU_A * xd ** 3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _node(out.astype(DTYPE), (x,), backward)


def norm2(x: Tensor) -> Tensor:
    """Euclidean norm of the whole tensor (scalar)."""
    n = float(np.sqrt(np.sum(x.data.astype(np.float64) ** 2)))

    def backward(g):
        if n == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / DTYPE(n),)

    return _node(np.asarray(n, dtype=DTYPE), (x,), backward)


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(DTYPE)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _node(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axes, keepdims), 1.0 / count)


# ----------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _node(x.data[idx], (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ndim = xs[0].ndim
    ax = axis % ndim
    for t in xs[1:]:
        if t.ndim != ndim or any(t.shape[i] != xs[0].shape[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(np.concatenate([t.data for t in xs], axis=ax), xs, backward)


def scatter_last(x: Tensor, index: np.ndarray, width: int) -> Tensor:
    """Place x[..., j] at column index[j] of a zero tensor with last dim `width`."""
    index = np.asarray(index, dtype=np.int64)
    if x.shape[-1] != len(index):
        raise DimensionError(f"scatter_last: {x.shape} vs {len(index)} indices")
    out = np.zeros(x.shape[:-1] + (width,), dtype=DTYPE)
    out[..., index] = x.data
    return _node(out, (x,), lambda g: (g[..., index],))


# ------------------------------------------------------------------- matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over leading dims (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    batch = _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    if _counter is not None:
        _counter.add(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with x of shape [..., in]."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


# ------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: last dim {c} vs gamma {gamma.shape} / beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.astype(np.float64)
    out = (xhat * gd + beta.data).astype(DTYPE)

    def backward(g):
        g64 = g.astype(np.float64)
        red = tuple(range(g.ndim - 1))
        dgamma = (g64 * xhat).sum(axis=red).astype(DTYPE)
        dbeta = g64.sum(axis=red).astype(DTYPE)
        dxhat = g64 * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx.astype(DTYPE), dgamma, dbeta

    return _node(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(DTYPE)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True, dtype=np.float64).astype(DTYPE)
        return (p * (g - dot),)

    return _node(p, (x,), backward)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z64 = z.astype(np.float64)
    z64 = z64 - z64.max(axis=-1, keepdims=True)
    return z64 - np.log(np.exp(z64).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy over the batch.

    `target` is either an int label array of shape [B] or a probability
    array of shape [B, K] (soft targets, used for smoothing/distillation).
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    bsz, k = logits.shape
    target = np.asarray(target)
    if target.ndim == 1:
        if target.shape[0] != bsz:
            raise DimensionError(f"cross_entropy: {bsz} logits rows vs {target.shape[0]} labels")
        probs_t = np.zeros((bsz, k), dtype=np.float64)
        probs_t[np.arange(bsz), target.astype(np.int64)] = 1.0
    else:
        if target.shape != (bsz, k):
            raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {target.shape}")
        probs_t = target.astype(np.float64)
    logp = log_softmax_np(logits.data)
    loss = -(probs_t * logp).sum() / bsz

    def backward(g):
        return ((float(g) * (np.exp(logp) - probs_t) / bsz).astype(DTYPE),)

    return _node(np.asarray(loss, dtype=DTYPE), (logits,), backward)


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise DimensionError(f"gradient root must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=DTYPE)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    return grads


def grad_of(loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar `loss` with respect to each tensor in `params`."""
    params = list(params)
    if not loss.requires_grad:
        if params:
            raise UnknownParameterError(f"{params[0]!r} is not on the tape of this loss")
        return {}
    grads = _backprop(loss)
    out = {}
    for p in params:
        if id(p) not in grads:
            raise UnknownParameterError(f"{p!r} is not on the tape of this loss")
        out[p] = grads[id(p)]
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients into `.grad` of every leaf reachable from `loss`."""
    grads = _backprop(loss)
    for node in _toposort(loss):
        if not node._parents and id(node) in grads:
            node.grad = grads[id(node)] if node.grad is None else node.grad + grads[id(node)]
