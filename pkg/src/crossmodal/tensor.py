"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a graph node on its output; `backward` replays the
recorded nodes in reverse creation order (creation order is a topological
order because inputs always exist before their consumers). All storage is
row-major float64. Any op that produces a NaN/Inf raises NumericsError
instead of committing the value.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericsError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_seq = itertools.count()


@dataclass
class Node:
    """One recorded operation: kind, input tensors, and the closure that
    maps the output gradient to per-input gradients (None for non-grad
    inputs)."""

    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """n-dimensional float64 value, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "node", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced non-finite values")


def _make(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...],
          backward_fn) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out.node = Node(op, inputs, backward_fn) if out.requires_grad else None
    out._seq = next(_seq)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. The only broadcasting allowed is a trailing-axis
    affine term: one operand's shape must equal the other's trailing axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        if a.shape[-len(b.shape):] != b.shape and b.shape[-len(a.shape):] != a.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ "
                                 "and neither is a trailing suffix of the other")
    out = a.data + b.data

    def backward_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make("add", out, (a, b), backward_fn)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(old),))


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return _make("swap_axes", out, (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = tuple(parts)
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make("concat_rows", out, parts, backward_fn)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows (axis 0) by integer index; duplicate indices accumulate
    gradient. Used for embeddings, positions and sequence reordering."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError(f"take_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"take_rows: index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make("take_rows", out, (a,), backward_fn)


def tile_rows(a: Tensor, k: int) -> Tensor:
    """Replicate a vector (d,) into k identical rows (k, d)."""
    if a.data.ndim != 1:
        raise ContractError(f"tile_rows: expected a vector, got shape {a.shape}")
    out = np.tile(a.data, (k, 1))
    return _make("tile_rows", out, (a,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("sum_all", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _make("mean_all", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D, or stacked with identical leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward_fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make("matmul", out, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact erf form of the normal CDF."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def backward_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * pdf),)

    return _make("gelu", out, (a,), backward_fn)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _make("softmax", y, (a,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization of the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last axis {d} does not match "
                             f"gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (x, gain, bias), backward_fn)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor,
                      mask: Tensor | None = None) -> Tensor:
    """softmax(q k^T / sqrt(dk)) v over rows. `mask` is an optional additive
    logit bias (0 for visible, large negative for blocked pairs); it enters
    before the softmax so blocked weights underflow to exactly zero."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: q {q.shape} and k {k.shape} disagree on dk")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: k {k.shape} and v {v.shape} disagree on N")
    dk = q.shape[-1]
    logits = scale(matmul(q, swap_axes(k, -1, -2)), 1.0 / np.sqrt(dk))
    if mask is not None:
        logits = add(logits, mask)
    return matmul(softmax(logits), v)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer class targets against logit rows."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} logit rows vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ContractError(f"cross_entropy: target id outside [0, {c})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1)) + logits.data.max(axis=-1)
    losses = lse - logits.data[np.arange(n), targets]
    out = np.asarray(losses.mean())

    def backward_fn(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return _make("cross_entropy", out, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def toposort(root: Tensor) -> list[Tensor]:
    """Tensors reachable from `root` that carry a recorded node, ordered so
    that every node's inputs precede it (ascending creation order)."""
    seen: set[int] = set()
    found: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(t.node.inputs)
    found.sort(key=lambda t: t._seq)
    return found


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate .grad with dLoss/dTensor for every requires_grad tensor in
    the recorded graph. Parameters passed in `params` that the graph never
    touched receive zero gradients."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        node = t.node
        g = t.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += gi
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
