"""Small dense autodiff core.

Only the handful of operations the actor, critic and state-representation
networks need are supported. Every forward call records its parents and a
closure that pushes the output gradient back to them; ``backward`` walks that
record in reverse topological order. Values are float64 numpy arrays.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's contract."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient contains NaN/Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar for loss assembly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


class Param(Tensor):
    """Trainable tensor carrying its own Adam moments."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def constant(self) -> Tensor:
        """Read-only view used when this parameter must not receive gradient."""
        return Tensor(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    out_data = x.data + y.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(g, y.shape))

    return _node(out_data, (x, y), bw)


def neg(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(-g)

    return _node(-x.data, (x,), bw)


def mul(x, y) -> Tensor:
    """Broadcasting product; ``elementwise_product`` is the equal-shape case."""
    x, y = _as_tensor(x), _as_tensor(y)
    out_data = x.data * y.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(_unbroadcast(g * y.data, x.shape))
        if y.requires_grad:
            y._accumulate(_unbroadcast(g * x.data, y.shape))

    return _node(out_data, (x, y), bw)


def elementwise_product(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"elementwise_product: {x.shape} vs {y.shape}")
    return mul(x, y)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(2.0 * x.data * g)

    return _node(x.data * x.data, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - y * y))

    return _node(y, (x,), bw)


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum()), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _node(np.asarray(x.data.mean()), (x,), bw)


# ---------------------------------------------------------------- structure

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if len(parts) == 0:
        raise ShapeError("concat: empty list")
    parts = [_as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    ax = axis % parts[0].data.ndim
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)
    try:
        out_data = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _node(out_data, parts, bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape

    def bw(g):
        x._accumulate(g.reshape(src))

    return _node(x.data.reshape(shape), (x,), bw)


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    ax = axis % x.data.ndim

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, index, np.moveaxis(g, ax, 0))
        x._accumulate(full)

    return _node(np.take(x.data, index, axis=ax), (x,), bw)


# ---------------------------------------------------------------- layers

def dense_forward(x: Tensor, weights: Tensor, bias: Tensor, activation: str = "identity") -> Tensor:
    """``activation(x @ W + b)`` for x of shape [B, d_in] (or [d_in])."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    x = _as_tensor(x)
    if weights.data.ndim != 2 or bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense: W {weights.shape}, b {bias.shape}")
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match W {weights.shape}")
    pre = x.data @ weights.data + bias.data
    if activation == "relu":
        out = np.maximum(pre, 0.0)
    elif activation == "tanh":
        out = np.tanh(pre)
    else:
        out = pre

    def bw(g):
        if activation == "relu":
            g = g * (pre > 0)
        elif activation == "tanh":
            g = g * (1.0 - out * out)
        if weights.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            weights._accumulate(x2.T @ g.reshape(-1, g.shape[-1]))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ weights.data.T)

    return _node(out, (x, weights, bias), bw)


def scale_slots(items: Tensor, weights: Tensor) -> Tensor:
    """Multiply slot ``a`` of items [..., n, k] by weights[a]."""
    if items.data.ndim < 2 or weights.shape != (items.shape[-2],):
        raise ShapeError(f"scale_slots: items {items.shape}, weights {weights.shape}")
    return mul(items, reshape(weights, (weights.shape[0], 1)))


def weighted_average(items, weights: Tensor) -> Tensor:
    """(1/n) * sum_a weights[a] * items[a].

    ``items`` is either a list of n vectors [k] or one tensor [..., n, k].
    """
    if isinstance(items, (list, tuple)):
        if len(items) == 0:
            raise ShapeError("weighted_average: n == 0")
        items = concat([reshape(_as_tensor(v), (1, -1)) for v in items], axis=0)
    items = _as_tensor(items)
    n = items.shape[-2]
    if n == 0:
        raise ShapeError("weighted_average: n == 0")
    if weights.shape != (n,):
        raise ShapeError(f"weighted_average: weights {weights.shape} for n={n}")
    w = weights.data
    # summing in sorted order makes the result exactly invariant to slot order
    weighted = np.sort(items.data * w[:, None], axis=-2)
    out = weighted.sum(axis=-2) / n

    def bw(g):
        if items.requires_grad:
            items._accumulate(g[..., None, :] * (w[:, None] / n))
        if weights.requires_grad:
            it = items.data.reshape(-1, n, items.shape[-1])
            gw = np.einsum("bak,bk->a", it, g.reshape(-1, g.shape[-1])) / n
            weights._accumulate(gw)

    return _node(out, (items, weights), bw)


# ---------------------------------------------------------------- backward

def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Param.grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    order = topological_order(loss)
    # intermediate grads live only for this pass
    for node in order:
        if not isinstance(node, Param):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not isinstance(node, Param):
            node.grad = None


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with coupled L2 (``grad += l2 * value`` before the moments)."""

    def __init__(self, params: Iterable[Param], lr: float, l2: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.l2 = l2
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.l2, self.beta1, self.beta2, self.eps)


@njit(cache=True)
def _adam_kernel(x, g, m, v, lr_t, l2, beta1, beta2, eps, inv_sqrt_bc2):  # pragma: no cover - jitted
    for i in range(x.size):
        gi = g[i] + l2 * x[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        x[i] -= lr_t * m[i] / (np.sqrt(v[i]) * inv_sqrt_bc2 + eps)
        g[i] = 0.0


@njit(cache=True)
def _lerp_kernel(target, online, tau):  # pragma: no cover - jitted
    for i in range(target.size):
        target[i] = tau * online[i] + (1.0 - tau) * target[i]


def adam_step(params: Sequence[Param], lr: float, l2: float = 0.0, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update per param, then zero the grads.

    Equivalent to m_hat / (sqrt(v_hat) + eps) with m_hat = m / (1 - beta1^t)
    and v_hat = v / (1 - beta2^t); the corrections are folded into scalars.
    """
    for p in params:
        if not np.isfinite(p.grad).all():
            bad = p.name or repr(p)
            for q in params:
                q.zero_grad()
            raise NonFiniteError(f"non-finite gradient in {bad}; step aborted")
    if lr == 0.0:
        for p in params:
            p.grad.fill(0.0)
        return
    for p in params:
        p.step_count += 1
        bc1 = 1.0 - beta1 ** p.step_count
        bc2 = 1.0 - beta2 ** p.step_count
        _adam_kernel(p.data.reshape(-1), p.grad.reshape(-1), p.adam_m.reshape(-1), p.adam_v.reshape(-1),
                     lr / bc1, l2, beta1, beta2, eps, 1.0 / np.sqrt(bc2))


def lerp_(target: np.ndarray, online: np.ndarray, tau: float) -> None:
    """In place: target <- tau * online + (1 - tau) * target."""
    _lerp_kernel(target.reshape(-1), online.reshape(-1), tau)


def uniform_fan_in(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(d_in)
    return rng.uniform(-bound, bound, size=(d_in, d_out))

