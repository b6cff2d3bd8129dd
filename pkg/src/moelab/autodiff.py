"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records its parents and a closure that maps
the output gradient to parent gradients. ``backward`` walks that record in
reverse topological order and then releases it, so each forward record
supports one backward pass unless ``retain_graph`` is set.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_freed", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._freed = False
        self.name = name

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def tensor(x, requires_grad=False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._freed = False
    out.name = None
    live = [p for p in parents if p.requires_grad]
    if _grad_enabled and live:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise binary


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _lift(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    pick = a.data <= b.data
    return _make(
        np.where(pick, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)),
    )


def maximum(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    pick = a.data >= b.data
    return _make(
        np.where(pick, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _lift(a), _lift(b)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)),
    )


# elementwise unary


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


# reductions and shape


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def scatter_add(values, index, length: int) -> Tensor:
    """Rows of ``values`` summed into a zero tensor of ``length`` rows at ``index``."""
    values = _lift(values)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((length,) + values.shape[1:])
    np.add.at(out, index, values.data)
    return _make(out, (values,), lambda g: (g[index],))


def concat(tensors, axis=0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        tuple(ts),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors, axis=0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    return _make(
        np.stack([t.data for t in ts], axis=axis),
        tuple(ts),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), b.shape[:-2] + (b.shape[-1],))
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.shape[:-1])

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


# fused kernels


def softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    z = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    sh = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(sh).sum(axis=axis, keepdims=True))
    out = sh - lse
    return _make(out, (a,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-softmax ``logits``."""
    logits = _lift(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    x = logits.data.reshape(-1, logits.shape[-1])
    sh = x - x.max(axis=1, keepdims=True)
    lp = sh - np.log(np.exp(sh).sum(axis=1, keepdims=True))
    n = len(t)
    loss = -lp[np.arange(n), t].mean()

    def bw(g):
        p = np.exp(lp)
        p[np.arange(n), t] -= 1.0
        return ((g / n) * p).reshape(logits.shape),

    return _make(np.asarray(loss), (logits,), bw)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x, gain = _lift(x), _lift(gain)
    if gain.shape != (x.shape[-1],):
        raise ValueError(f"gain shape {gain.shape} does not match last dim {x.shape[-1]}")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    n = x.shape[-1]
    r = 1.0 / np.sqrt((x.data**2).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * r

    def bw(g):
        gg = g * gain.data
        gx = r * gg - x.data * r**3 * (gg * x.data).sum(axis=-1, keepdims=True) / n
        return gx, (g * xhat).reshape(-1, n).sum(axis=0)

    return _make(xhat * gain.data, (x, gain), bw)


def rope_angles(position, d_r: int, base: float = 10000.0) -> np.ndarray:
    """Angles ``position * base**(-2j/d_r)`` with a trailing axis of size ``d_r/2``."""
    if d_r % 2:
        raise ValueError(f"rotary dim must be even, got {d_r}")
    freq = base ** (-np.arange(0, d_r, 2) / d_r)
    return np.multiply.outer(np.asarray(position, dtype=np.float64), freq)


def rope_apply(x, position, base: float = 10000.0) -> Tensor:
    """Rotate each pair ``(x[2j], x[2j+1])`` by ``position * base**(-2j/d_r)``.

    ``position`` is an integer or an integer array broadcastable against
    ``x.shape[:-1]``.
    """
    x = _lift(x)
    d_r = x.shape[-1]
    ang = rope_angles(position, d_r, base)
    c, s = np.cos(ang), np.sin(ang)
    pairs = x.data.reshape(x.shape[:-1] + (d_r // 2, 2))
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.stack([x0 * c - x1 * s, x0 * s + x1 * c], axis=-1).reshape(x.shape)

    def bw(g):
        gp = g.reshape(g.shape[:-1] + (d_r // 2, 2))
        g0, g1 = gp[..., 0], gp[..., 1]
        gx = np.stack([g0 * c + g1 * s, g1 * c - g0 * s], axis=-1)
        return (_unbroadcast(gx.reshape(gx.shape[:-2] + (d_r,)), x.shape),)

    return _make(out, (x,), bw)


# backward


def backward(loss: Tensor, retain_graph: bool = False) -> dict:
    """Gradients of a scalar ``loss`` for every leaf that requires them.

    Returns a dict keyed by the leaf tensors themselves.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise RuntimeError("backward called on a tensor that is not attached to a graph")
    if loss._freed:
        raise RuntimeError("graph already consumed by a previous backward pass")
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    order, seen, stack_ = [], set(), [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                if p._freed:
                    raise RuntimeError("graph already consumed by a previous backward pass")
                stack_.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                leaves[node] = Tensor(g)
            continue
        if g is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + gp if key in grads else np.asarray(gp, dtype=np.float64)
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents, node._backward, node._freed = (), None, True
    return leaves


def gradcheck(fn, inputs, eps: float = 1e-6, max_coords: int | None = None, rng=None) -> float:
    """Largest gap between autodiff and central differences, relative to the gradient scale.

    ``fn`` takes no arguments and rebuilds the scalar from the current
    contents of ``inputs``. With ``max_coords`` only that many randomly
    chosen coordinates per input are probed.
    """
    rng = rng or np.random.default_rng(0)
    grads = backward(fn())
    ad, fd = [], []
    for t in inputs:
        g = grads.get(t, Tensor(np.zeros_like(t.data))).data.reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        for i in coords:
            old = flat[i]
            with no_grad():
                flat[i] = old + eps
                hi = fn().item()
                flat[i] = old - eps
                lo = fn().item()
            flat[i] = old
            ad.append(g[i])
            fd.append((hi - lo) / (2 * eps))
    ad, fd = np.array(ad), np.array(fd)
    scale = max(np.abs(fd).max(initial=0.0), np.abs(ad).max(initial=0.0), 1e-12)
    return float(np.abs(ad - fd).max(initial=0.0) / scale)


# optimizer

FULL = "full"
BF16_EMULATED = "emulated-16-bit-float"


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    learning_rate: float = 1e-3
    eps: float = 1e-8
    moment_precision: str = FULL

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.moment_precision not in (FULL, BF16_EMULATED):
            raise ValueError(f"unknown moment precision {self.moment_precision!r}")

    @classmethod
    def zeros_like(cls, param: Tensor, **kw) -> AdamWState:
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **kw)


def _bf16(x: np.ndarray) -> np.ndarray:
    from .fp8.formats import BF16, round_to_format

    return round_to_format(x, BF16)


def adamw_step(param: Tensor, grad, state: AdamWState) -> tuple[Tensor, AdamWState]:
    """One decoupled-weight-decay AdamW step with bias correction.

    ``param.data`` is updated in place so that every holder of the
    parameter, including modules that share it, sees the new value.
    """
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {g.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient entries")
    s = state
    s.step_count += 1
    s.m = s.beta1 * s.m + (1 - s.beta1) * g
    s.v = s.beta2 * s.v + (1 - s.beta2) * g * g
    if s.moment_precision == BF16_EMULATED:
        s.m, s.v = _bf16(s.m), _bf16(s.v)
    mhat = s.m / (1 - s.beta1**s.step_count)
    vhat = s.v / (1 - s.beta2**s.step_count)
    lr = s.learning_rate
    param.data *= 1 - lr * s.weight_decay
    param.data -= lr * mhat / (np.sqrt(vhat) + s.eps)
    return param, s


@dataclass
class AdamW:
    """AdamW over a list of parameters, one state per parameter."""

    params: list
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    moment_precision: str = FULL
    states: list = field(init=False)

    def __post_init__(self):
        self.states = [
            AdamWState.zeros_like(
                p,
                beta1=self.beta1,
                beta2=self.beta2,
                weight_decay=self.weight_decay,
                learning_rate=self.learning_rate,
                moment_precision=self.moment_precision,
            )
            for p in self.params
        ]

    def step(self, grads: dict, learning_rate: float | None = None):
        for p, s in zip(self.params, self.states):
            if learning_rate is not None:
                s.learning_rate = learning_rate
            g = grads.get(p)
            adamw_step(p, g if g is not None else np.zeros_like(p.data), s)
