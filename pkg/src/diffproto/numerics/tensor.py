"""Dense float tensors with tape-based reverse-mode differentiation.

The op set is deliberately small: just enough to express a pre-norm
transformer, a distance-softmax classifier, and their training losses, in
float32 or float64. Shapes are checked eagerly and mismatches raise
:class:`ShapeError` with both shapes in the message. Broadcasting is limited
to leading batch dimensions (one operand's shape must be a suffix of the
other's); anything else requires an explicit reshape.

Recording: ops executed inside a ``with Tape() as tape:`` block are appended
to the tape whenever an input requires gradients. ``backward(tape, loss)``
replays the records in reverse, which is a reverse topological order because
every operand necessarily predates its result on the tape.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .rng import RngStream

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericsError",
    "as_tensor",
    "parameter",
    "backward",
    "gaussian",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "gather_rows",
    "tsum",
    "tmean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "pairwise_sqdist",
    "normalize_rows",
    "cross_entropy_with_logits",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericsError(ArithmeticError):
    """Non-finite values or other numerical contract violations."""


class Tensor:
    """A dense float array, optionally tracked for gradients.

    Tensors are treated as immutable during graph evaluation; parameter
    updates mutate ``data`` in place only after the tape of the step has
    been consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype.name}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))


class Tape:
    """Ordered record of primitive ops for one backward pass.

    A tape is confined to the thread that opened it; nested tapes stack.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))


_LOCAL = threading.local()


def _tape_stack():
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        if dtype is not None and x.dtype != dtype:
            raise ShapeError(f"dtype mismatch: tensor is {x.dtype}, wanted {np.dtype(dtype)}")
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def gaussian(rng: RngStream, shape, dtype=np.float32) -> Tensor:
    """Leaf tensor of i.i.d. standard normals drawn from ``rng``."""
    return Tensor(rng.standard_normal(shape, dtype=dtype))


def _check_same_dtype(*tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed dtypes in one op: {sorted(d.name for d in dtypes)}")


def _emit(data, inputs, backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape._record(out, inputs, backward_fn)
    return out


def _suffix_broadcast(sa: tuple, sb: tuple):
    """Return the output shape if one shape is a trailing suffix of the other."""
    if sa == sb:
        return sa
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"shapes {list(sa)} and {list(sb)} differ beyond leading batch dimensions")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the leading axes that were broadcast to reach ``g.shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    _check_same_dtype(a, b)
    _suffix_broadcast(a.shape, b.shape)
    data = fwd(a.data, b.data)

    def backward_fn(g):
        ga = _reduce_to(bwd_a(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _reduce_to(bwd_b(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(data, (a, b), backward_fn)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, batched ND x ND (equal leading dims), or ND x 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {list(a.shape)} x {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    if a.ndim == b.ndim:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch dimensions differ: {list(a.shape)} x {list(b.shape)}")

        def backward_fn(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    elif b.ndim == 2:

        def backward_fn(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:
        raise ShapeError(f"unsupported matmul arrangement: {list(a.shape)} x {list(b.shape)}")
    return _emit(a.data @ b.data, (a, b), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _emit(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    _check_same_dtype(*tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        pieces = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                pieces.append(g[tuple(idx)])
            else:
                pieces.append(None)
        return tuple(pieces)

    return _emit(data, tuple(tensors), backward_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if not 0 <= start <= start + length <= a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis {axis} of shape {list(a.shape)}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _emit(a.data[idx], (a,), backward_fn)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows (axis 0) by integer index; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows wants a 1-D index list, got shape {list(idx.shape)}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather index out of range for {a.shape[0]} rows")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(a.data[idx], (a,), backward_fn)


def _normalize_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _emit(data, (a,), backward_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.ndim)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _emit(data, (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericsError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, (a,), backward_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericsError("log_softmax input contains NaN")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit(y, (a,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    _check_same_dtype(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {list(gain.shape)}/{list(bias.shape)} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _emit(data, (x, gain, bias), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (the GPT-2 variant)."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _emit(data.astype(x.dtype, copy=False), (x,), backward_fn)


def pairwise_sqdist(x: Tensor, z: Tensor) -> Tensor:
    """Squared Euclidean distances between rows of x [Q,D] and z [N,D]."""
    x, z = as_tensor(x), as_tensor(z)
    _check_same_dtype(x, z)
    if x.ndim != 2 or z.ndim != 2 or x.shape[1] != z.shape[1]:
        raise ShapeError(f"pairwise_sqdist wants [Q,D] x [N,D], got {list(x.shape)} x {list(z.shape)}")
    x2 = (x.data * x.data).sum(axis=1)[:, None]
    z2 = (z.data * z.data).sum(axis=1)[None, :]
    cross = x.data @ z.data.T
    data = np.maximum(x2 + z2 - 2.0 * cross, 0.0)

    def backward_fn(g):
        gx = 2.0 * (g.sum(axis=1, keepdims=True) * x.data - g @ z.data) if x.requires_grad else None
        gz = 2.0 * (g.sum(axis=0)[:, None] * z.data - g.T @ x.data) if z.requires_grad else None
        return gx, gz

    return _emit(data, (x, z), backward_fn)


def normalize_rows(x: Tensor, min_norm: float = 1e-30) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (n <= min_norm).any():
        raise NumericsError("cannot normalize a zero-norm vector")
    y = x.data / n

    def backward_fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _emit(y, (x,), backward_fn)


def cross_entropy_with_logits(logits: Tensor, labels, reduction: str = "sum") -> Tensor:
    """Fused log-softmax + negative log likelihood over the last axis.

    ``labels`` is an integer vector, one entry per row of ``logits``.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy wants logits [Q,N] and labels [Q], got {list(logits.shape)} and {list(labels.shape)}")
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ShapeError(f"label out of range for {n} classes")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    rows = np.arange(labels.size)
    per_row = lse[:, 0] - logits.data[rows, labels]
    scale = 1.0 / labels.size if reduction == "mean" else 1.0
    data = np.asarray(per_row.sum() * scale, dtype=logits.dtype)

    def backward_fn(g):
        p = np.exp(logits.data - lse)
        p[rows, labels] -= 1.0
        return (p * (float(g) * scale),)

    return _emit(data, (logits,), backward_fn)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf on the tape.

    Returns a map {leaf tensor: gradient array}; the same arrays are also
    accumulated into each leaf's ``.grad``. Gradients of tensors with
    requires_grad=False are never materialized.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = backward_fn(g)
        for t, gi in zip(inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = gi.astype(t.dtype, copy=False)
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi
            if t.is_leaf:
                leaf_grads[t] = grads[id(t)]
    for t, g in leaf_grads.items():
        t.grad = g if t.grad is None else t.grad + g
    return leaf_grads
