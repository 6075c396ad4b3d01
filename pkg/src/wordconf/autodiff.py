"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. ``backward``
walks the graph once in reverse topological order.

All data is float64. An op that would produce NaN or Inf raises
:class:`NonFiniteError` immediately instead of letting the value propagate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9
LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DeterminismError(RuntimeError):
    """Two forward passes on identical inputs disagreed."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "flags", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.flags: dict = {}
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {backward_fn.__qualname__.split('.')[0]}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded from ``shape``."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * a.data / b.data, b.shape)

    return _result(a.data / b.data, (a, b), _bw)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only: no overflow on either tail
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function.

    Evaluated as ``exp(x) / (1 + exp(x))`` for negative ``x`` so nothing
    overflows. Results stay strictly inside (0, 1) for ``|x| <= 36``; beyond
    that float64 rounds the upper tail to exactly 1.0, and the lower tail
    keeps shrinking through the subnormal range until it underflows to 0.0
    below roughly ``x = -745``.
    """
    y = _sigmoid_np(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU; smooth, so finite differences stay clean."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    y = 0.5 * x.data * (1.0 + t)

    def _bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(y, (x,), _bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(y, (x,), _bw)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradient scatter-adds back."""
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def _bw(g):
        out = np.zeros_like(x.data)
        if advanced:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _result(x.data[index], (x,), _bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0 with integer indices of any shape (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for table of {x.shape[0]} rows")

    def _bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *x.shape[1:]))
        return (out,)

    return _result(x.data[idx], (x,), _bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ax = axis % xs[0].ndim
    sizes = [t.shape[ax] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in xs], axis=ax), xs, _bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _result(y, (a, b), _bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm needs a last axis of length >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def _bw(g):
        gx_hat = g * gain.data
        n = x.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)

    return _result(y, (x, gain, bias), _bw)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d) + mask) v``.

    ``mask`` is boolean, True where attending is allowed, and must broadcast
    to the score shape ``(..., n_query, n_key)``. Disallowed scores get
    :data:`MASK_VALUE`. A query row with no allowed key yields a zero vector;
    such rows are reported in ``out.flags["masked_rows"]``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key widths differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("keys and values disagree on length")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    empty = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            fits = np.broadcast_shapes(mask.shape, scores.shape) == scores.shape
        except ValueError:
            fits = False
        if not fits:
            raise DimensionError(f"mask {mask.shape} does not fit scores {scores.shape}")
        scores = np.where(mask, scores, MASK_VALUE)
        empty = ~np.broadcast_to(mask, scores.shape).any(axis=-1)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    if empty is not None:
        p *= (~empty)[..., None]
    y = np.matmul(p, v.data)

    def _bw(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return unbroadcast(gq, q.shape), unbroadcast(gk, k.shape), unbroadcast(gv, v.shape)

    out = _result(y, (q, k, v), _bw)
    if empty is not None and empty.any():
        out.flags["masked_rows"] = empty
    return out


# ---------------------------------------------------------------------------
# losses


def bce(conf: Tensor, target: np.ndarray, weight: np.ndarray | None = None,
        eps: float = 1e-7) -> Tensor:
    """Summed binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    target = np.asarray(target, dtype=np.float64)
    w = np.ones_like(conf.data) if weight is None else np.asarray(weight, dtype=np.float64)
    c = np.clip(conf.data, eps, 1.0 - eps)
    value = -(w * (target * np.log(c) + (1.0 - target) * np.log(1.0 - c))).sum()
    inside = (conf.data > eps) & (conf.data < 1.0 - eps)

    def _bw(g):
        return (g * w * inside * (-target / c + (1.0 - target) / (1.0 - c)),)

    return _result(value, (conf,), _bw)


# ---------------------------------------------------------------------------
# graph traversal


def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Sets ``.grad`` (overwriting, never accumulating across calls) on every
    leaf that requires grad and is reachable. Returns gradients for
    ``leaves`` in order; unreachable leaves get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topo(loss) if loss.requires_grad else []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            node.grad = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if leaves is None:
        return []
    out = []
    reached = {id(n) for n in order}
    for leaf in leaves:
        if id(leaf) not in reached:
            leaf.grad = np.zeros_like(leaf.data)
        out.append(leaf.grad)
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
                lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam step, in place on ``params`` and ``state``."""
    if len(state.m) != len(params):
        raise DimensionError("optimizer state does not match parameter list")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.data.shape:
            raise DimensionError(f"optimizer state shape {m.shape} != parameter {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_update(self.params, grads, self.state, self.lr, *self.betas, self.eps)


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_checked: int
    worst: tuple[str, int] | None = None
    errors: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a| + |n|, floor)``.

    The floor turns the test into an absolute one for gradients that are
    themselves around finite-difference noise level.
    """
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)


def grad_check(model, batch, eps: float = 1e-5, tol: float = 1e-3, n_coords: int = 100,
               seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``model`` must expose ``named_parameters()`` (name -> trainable Tensor)
    and ``loss(batch)`` returning a scalar Tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = list(model.named_parameters().items())
    params = [p for _, p in named]
    loss = model.loss(batch)
    again = model.loss(batch)
    if loss.data.tobytes() != again.data.tobytes():
        raise DeterminismError("forward pass is not deterministic")
    grads = backward(loss, params)

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    errors, worst, worst_err = [], None, -1.0
    for f in np.sort(flat):
        pi = int(np.searchsorted(offsets, f, side="right") - 1)
        j = int(f - offsets[pi])
        p = params[pi]
        orig = p.data.flat[j]
        p.data.flat[j] = orig + eps
        up = model.loss(batch).item()
        p.data.flat[j] = orig - eps
        down = model.loss(batch).item()
        p.data.flat[j] = orig
        numeric = (up - down) / (2 * eps)
        err = relative_error(float(grads[pi].flat[j]), numeric, floor)
        errors.append(err)
        if err > worst_err:
            worst_err, worst = err, (named[pi][0], j)
    return GradCheckReport(max(errors) if errors else 0.0, tol, len(errors), worst, errors)
