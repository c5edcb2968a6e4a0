"""Dense tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a handful of fused ops (layer norm,
masked softmax, cross entropy) plus the elementwise and matmul plumbing a
post-LN encoder needs. Broadcasting is limited to adding/multiplying a
vector over the last axis.

Every op checks its output for NaN/Inf and raises ``NumericalError``
instead of letting non-finite values travel down the graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class NumericalError(FloatingPointError):
    """An op produced NaN or Inf."""


def default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the default element type (32 or 64 bits)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype({32: np.float32, 64: np.float64}[bits])
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a tape."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` are parameters; tensors
    produced by ops carry a backward closure and references to their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{label})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_vector_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> bool:
    """True when ``b`` is a vector over the last axis of ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to_vector(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 1 and b.ndim > 1:
        return add(b, a)
    bcast = _check_vector_broadcast(a.data, b.data, "add")
    n = a.shape[-1] if a.ndim else 1

    def backward(g):
        return g, (_reduce_to_vector(g, n) if bcast else g)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    bcast = _check_vector_broadcast(a.data, b.data, "sub")
    n = a.shape[-1] if a.ndim else 1

    def backward(g):
        gb = -g
        return g, (_reduce_to_vector(gb, n) if bcast else gb)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 1 and b.ndim > 1:
        return mul(b, a)
    bcast = _check_vector_broadcast(a.data, b.data, "mul")
    n = a.shape[-1] if a.ndim else 1
    ad, bd = a.data, b.data

    def backward(g):
        gb = g * ad
        return g * bd, (_reduce_to_vector(gb, n) if bcast else gb)

    return _node(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        return (g * s,)

    return _node(a.data * a.dtype.type(s), (a,), backward, "scale")


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _node((xd * cdf).astype(xd.dtype, copy=False), (x,), backward, "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * keep,)

    return _node(x.data * keep, (x,), backward, "dropout")


# ---------------------------------------------------------------------------
# shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for (..., m, k) @ (k, n) or matching batch dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _node(a.data.reshape(tuple(shape)), (a,), backward, "reshape")


def take_rows(x: Tensor, index) -> Tensor:
    """Rows of ``x`` along axis 0 (gather)."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for extent {x.shape[0]}")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(x.data[idx], (x,), backward, "take_rows")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {table.shape[0]}")
    out = take_rows(table, ids)
    out._op = "embedding_lookup"
    return out


def append_position(x: Tensor, v: Tensor) -> Tensor:
    """Append vector ``v`` as one extra position: (B, S, h) -> (B, S + 1, h)."""
    if x.ndim != 3 or v.shape != (x.shape[-1],):
        raise ValueError(f"append_position: {x.shape} and {v.shape} are incompatible")
    b, s, _ = x.shape
    out = np.concatenate([x.data, np.broadcast_to(v.data, (b, 1, v.shape[0]))], axis=1)

    def backward(g):
        return g[:, :s], g[:, s].sum(axis=0)

    return _node(out, (x, v), backward, "append_position")


def add_at_position(x: Tensor, v: Tensor, position: int) -> Tensor:
    """Add ``v`` to ``x[:, position]`` of a (B, S, h) tensor, leaving other positions."""
    if x.ndim != 3 or v.shape != (x.shape[-1],):
        raise ValueError(f"add_at_position: {x.shape} and {v.shape} are incompatible")
    out = x.data.copy()
    out[:, position] += v.data

    def backward(g):
        return g, g[:, position].sum(axis=0)

    return _node(out, (x, v), backward, "add_at_position")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum()), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size

    def backward(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _node(np.asarray(a.data.mean()), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# fused ops


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    h = x.shape[-1]
    if h < 2:
        raise ValueError("layer_norm needs at least 2 features on the last axis")
    if gain.shape != (h,) or bias.shape != (h,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({h},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to_vector(g * xhat, h), _reduce_to_vector(g, h)

    return _node(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def softmax_masked(scores: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is boolean, True marks usable positions.

    Masked positions get probability exactly 0. Rows with no usable
    position are rejected.
    """
    sd = scores.data
    if mask is None:
        keep = np.ones(sd.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), sd.shape)
    if not keep.any(axis=-1).all():
        raise ValueError("softmax_masked: a row has every position masked")
    masked = np.where(keep, sd, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(sd.dtype, copy=False)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (scores,), backward, "softmax_masked")


def cross_entropy(logits: Tensor, targets, valid=None) -> Tensor:
    """Mean cross entropy of (N, C) logits against integer targets.

    ``valid`` optionally masks targets out of both the sum and the count.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ValueError(f"cross_entropy: expected {n} targets, got shape {t.shape}")
    keep = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: no targets to score")
    if (t[keep] < 0).any() or (t[keep] >= c).any():
        raise IndexError("cross_entropy: target class out of range")
    safe_t = np.where(keep, t, 0)
    ld = logits.data
    shifted = ld - ld.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    picked = log_p[np.arange(n), safe_t]
    loss = -(picked * keep).sum() / count

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(n), safe_t] -= 1.0
        grad *= (keep / count)[:, None]
        return (grad * g,)

    return _node(np.asarray(loss, dtype=ld.dtype), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"mse: shapes {pred.shape} and {t.shape} differ")
    diff = pred.data - t
    n = diff.size

    def backward(g):
        return (g * 2.0 * diff / n,)

    return _node(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), backward, "mse")


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every parameter that ``loss`` depends on.

    The graph is consumed: a second call on the same graph raises.
    Gradients accumulate into existing ``.grad`` slots, so reset them
    (``zero_grad``) between steps.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; run a fresh forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached: no parameter requiring gradients is reachable")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        if node._consumed:
            raise RuntimeError(f"graph node {node._op} was already consumed by a previous backward")
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
        node._parents = ()
        node._backward = None
