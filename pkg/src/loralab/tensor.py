"""Dense float64 tensors with define-by-run reverse-mode autodiff.

The graph is rebuilt on every forward pass: each op that sees a
grad-requiring input records its parents and a backward closure on the
output tensor. ``Tensor.backward`` replays the closures in reverse
topological order. Values live in row-major numpy arrays; numpy supplies
the arithmetic kernels, this module supplies the gradient rules.

Graphs are confined to a single thread. Tensors without a grad record are
immutable by convention and safe to share read-only.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ComputationError, ContractError, DimensionError, InputError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the module-level functions carry the gradient rules
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not part of the op set")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every grad-requiring tensor reachable from a scalar loss."""
        if self.data.shape != ():
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            # grads are never mutated in place, so sharing array objects is safe
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if pgrad is None:
                    continue
                parent.grad = pgrad if parent.grad is None else parent.grad + pgrad


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def backward(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def backward(g):
        return (g * c,)

    return _record(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul expects rank 1 or 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = gb = None
        if a.ndim == 2 and b.ndim == 2:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                gb = a.data.T @ g
        elif a.ndim == 2 and b.ndim == 1:
            if a.requires_grad:
                ga = np.outer(g, b.data)
            if b.requires_grad:
                gb = a.data.T @ g
        elif a.ndim == 1 and b.ndim == 2:
            if a.requires_grad:
                ga = b.data @ g
            if b.requires_grad:
                gb = np.outer(a.data, g)
        else:
            if a.requires_grad:
                ga = g * b.data
            if b.requires_grad:
                gb = g * a.data
        return ga, gb

    return _record(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    out = Tensor(a.data.T)

    def backward(g):
        return (g.T,)

    return _record(out, (a,), backward)


def index1d(a: Tensor, i: int) -> Tensor:
    """Scalar entry a[i] of a vector, with gradient."""
    if a.ndim != 1:
        raise DimensionError(f"index1d expects a vector, got {a.shape}")
    out = Tensor(a.data[i])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[i] = g
        return (ga,)

    return _record(out, (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"slice_cols expects a matrix, got {a.shape}")
    out = Tensor(a.data[:, start:stop])

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _record(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def softmax(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    if x.data.size == 0:
        raise DimensionError("softmax of an empty tensor")
    if np.isnan(x.data).any():
        raise ComputationError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s)

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _record(out, (x,), backward)


RMSNORM_EPS = 1e-5


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    """Root-mean-square normalization of each row, scaled by ``gain``."""
    if x.shape[-1] != gain.shape[0] or gain.ndim != 1:
        raise DimensionError(f"rmsnorm: gain {gain.shape} does not match rows of {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + RMSNORM_EPS)
    out = Tensor(x.data * inv * gain.data)

    def backward(g):
        gx = gg = None
        if x.requires_grad:
            gw = g * gain.data
            dot = (gw * x.data).sum(axis=-1, keepdims=True)
            gx = gw * inv - x.data * (inv ** 3) * dot / d
        if gain.requires_grad:
            gg = (g * x.data * inv).reshape(-1, gain.shape[0]).sum(axis=0)
        return gx, gg

    return _record(out, (x, gain), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids (length T) -> (T, d). Backward scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"embedding ids must be a flat sequence, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InputError(
            f"token id out of range [0, {table.shape[0]}): {idx[(idx < 0) | (idx >= table.shape[0])][0]}"
        )
    out = Tensor(table.data[idx])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    q, k, v: (T, d) with d divisible by n_heads. Position t attends to
    positions <= t only.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    T, d = q.shape
    if d % n_heads != 0:
        raise DimensionError(f"attention width {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    def split(t):  # (T, d) -> (H, T, hd)
        return t.reshape(T, n_heads, hd).transpose(1, 0, 2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(hd)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)  # (H, T, T)
    oh = p @ vh
    out = Tensor(oh.transpose(1, 0, 2).reshape(T, d))

    def backward(g):
        gh = g.reshape(T, n_heads, hd).transpose(1, 0, 2)
        gq = gk = gv = None
        dp = gh @ vh.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds /= math.sqrt(hd)
        if q.requires_grad:
            gq = (ds @ kh).transpose(1, 0, 2).reshape(T, d)
        if k.requires_grad:
            gk = (ds.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(T, d)
        if v.requires_grad:
            gv = (p.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(T, d)
        return gq, gk, gv

    return _record(out, (q, k, v), backward)


def masked_nll(logits: Tensor, targets, mask) -> Tensor:
    """Sum of -log softmax(logits)[t, targets[t]] over positions where mask is 1."""
    y = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=np.float64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],) or m.shape != y.shape:
        raise DimensionError(
            f"masked_nll: logits {logits.shape}, targets {y.shape}, mask {m.shape}"
        )
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise InputError("target id out of vocabulary range")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    logp = z[np.arange(len(y)), y] - lse
    out = Tensor(-(m * logp).sum())

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(len(y)), y] -= 1.0
        return (g * p * m[:, None],)

    return _record(out, (logits,), backward)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy row-wise log-softmax (no autograd; shared by oracles and eval)."""
    zmax = logits.max(axis=-1, keepdims=True)
    return logits - zmax - np.log(np.exp(logits - zmax).sum(axis=-1, keepdims=True))
