"""Dense f64 tensors with define-by-run reverse-mode autodiff.

Every op returns a new :class:`Tensor` whose ``_backward`` closure pushes the
upstream gradient into its parents.  :func:`backward` walks the graph reachable
from a scalar root in reverse creation order, so each node is visited once.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._id = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = Tensor(data, requires_grad=requires_grad)
    _check_finite(t.data, "tensor")
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a} and {b}") from None


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Executed ops reachable from a root, in execution order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        stack = [root]
        found: list[Tensor] = []
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            found.append(node)
            stack.extend(node._parents)
        found.sort(key=lambda n: n._id)
        return cls(found)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents and n.requires_grad]


def backward(root: Tensor, grad: np.ndarray | None = None) -> Graph:
    """Reverse-mode sweep from ``root``; returns the traversed graph."""
    if grad is None:
        if root.data.size != 1:
            raise DimensionError(f"backward needs a scalar root or explicit grad, got {root.shape}")
        grad = np.ones_like(root.data)
    graph = Graph.from_root(root)
    root._accumulate(np.asarray(grad, dtype=np.float64))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # intermediate buffers are not needed once the sweep is done
    for node in graph.nodes:
        if node._parents:
            node.grad = None
    return graph


# --------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), "scale", bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0

    def bw(g):
        a._accumulate(g * on)

    return _make(np.where(on, a.data, 0.0), (a,), "relu", bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log requires strictly positive input")

    def bw(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), "log", bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out)

    return _make(out, (a,), "exp", bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("sqrt requires strictly positive input")
    out = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), "sqrt", bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(out), (a,), "mean", bw)


def std(a, axis=None, keepdims: bool = False, eps: float = 1e-9) -> Tensor:
    """Population standard deviation, ``sqrt(var + eps)``."""
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    var = (centered**2).mean(axis=axis, keepdims=True)
    sd = np.sqrt(var + eps)
    out = sd
    if not keepdims:
        out = sd.reshape(()) if axis is None else np.squeeze(sd, axis=axis)

    def bw(g):
        if not keepdims:
            g = g.reshape(sd.shape)
        a._accumulate(g * centered / (n * sd))

    return _make(np.asarray(out), (a,), "std", bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat of shapes {[t.shape for t in ts]}: {exc}") from None
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out, tuple(ts), "concat", bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), "reshape", bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), "transpose", bw)


def take(table, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]`` along axis 0."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, index, g)
        table._accumulate(acc)

    return _make(table.data[index], (table,), "take", bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match.

    A 2-D right operand is shared across all leading axes of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*lead, b.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g2)

    else:
        out = a.data @ b.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), "matmul", bw)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------------
# normalised / probabilistic ops


def softmax_lastdim(x, bias=None, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``x + bias``.

    ``bias`` may be a Tensor (finite, may require grad) or an array whose
    ``-inf`` entries act as a hard mask.  ``mask`` is a boolean array, True
    where a key may be attended; False entries get exactly zero weight.
    """
    x = as_tensor(x)
    z = x.data
    bias_t = None
    if bias is not None:
        if isinstance(bias, Tensor):
            bias_t = bias
            braw = bias.data
        else:
            braw = np.asarray(bias, dtype=np.float64)
        _broadcast_shape(z.shape, braw.shape)
        with np.errstate(invalid="ignore"):
            z = z + braw
    keep = np.isfinite(z) if bias is not None and bias_t is None else None
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        keep = m if keep is None else (keep & m)
    if keep is not None:
        if not keep.any(axis=-1).all():
            raise DegenerateRowError("softmax row has no attendable entries")
        z = np.where(keep, z, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dz = out * (g - (g * out).sum(axis=-1, keepdims=True))
        if x.requires_grad:
            x._accumulate(dz)
        if bias_t is not None and bias_t.requires_grad:
            bias_t._accumulate(_unbroadcast(dz, bias_t.shape))

    parents = (x,) if bias_t is None else (x, bias_t)
    return _make(out, parents, "softmax", bw)


def log_softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        x._accumulate(g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), "log_softmax", bw)


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects [n, c] logits and [n] targets, got {logits.shape}, {targets.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(n), targets].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), targets] -= 1.0
        logits._accumulate(d * (float(g) / n))

    return _make(np.asarray(loss), (logits,), "cross_entropy", bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gh = g * gamma.data
            x._accumulate(
                inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            )

    return _make(out, (x, gamma, beta), "layer_norm", bw)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, dim: int) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim))


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train") -> Tensor:
    """Batch normalisation over axis 0 of a ``[batch, d]`` input.

    Train mode normalises with the biased batch variance and updates the
    running statistics (unbiased variance, torch convention) in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise DimensionError(f"batchnorm expects [batch, d], got {x.shape}")
    eps = state.eps
    if mode == "train":
        n = x.shape[0]
        if n < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc**2).mean(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)

        def bw(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=0))
            if x.requires_grad:
                gh = g * gamma.data
                x._accumulate(inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0)))

    elif mode == "infer":
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean) * inv

        def bw(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=0))
            if x.requires_grad:
                x._accumulate(g * gamma.data * inv)

    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), "batchnorm", bw)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Iterable[Tensor]) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    lr_mult: float = 1.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update in place, with decoupled weight decay.

    ``lr_mult`` scales the base rate (warmup and step-halving schedules).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    b1, b2 = betas
    state.t += 1
    t = state.t
    step = lr * lr_mult
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = grads[i]
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(f"param {i}: shape {p.data.shape} but grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - step * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p.data)
        if not np.isfinite(p.data).all():
            raise NonFiniteError(f"adam produced non-finite values in param {i}")


def no_grad_copy(t: Tensor) -> Tensor:
    return Tensor(t.data.copy())


__all__ = [
    "AdamState",
    "BatchNormState",
    "DegenerateRowError",
    "DimensionError",
    "DomainError",
    "Graph",
    "NonFiniteError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "batchnorm",
    "concat",
    "cross_entropy",
    "exp",
    "layer_norm",
    "linear",
    "log",
    "log_softmax_lastdim",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scale",
    "softmax_lastdim",
    "sqrt",
    "std",
    "sub",
    "sum",
    "take",
    "tensor",
    "transpose",
]
