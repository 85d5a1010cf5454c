"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

Operations are recorded on the active :class:`Tape` (one per thread) whenever
at least one input requires a gradient. :func:`backward` replays the tape in
reverse and returns gradients for the requested leaf tensors.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_sum(w * 3.0)
    >>> backward(loss, tape)[w]
    array([3., 3.])
"""
from __future__ import annotations

import json
import struct
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

EPS = 1e-12

_local = threading.local()


class DimensionError(ValueError):
    pass


class Tensor:
    """A dense array plus autodiff bookkeeping.

    Hash and equality are by identity, so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class _Record:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tape:
    """Ordered log of executed operations.

    Use as a context manager to make it the recording target for the
    current thread. Tapes nest; the innermost one records.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on this thread (evaluation, optimizer updates)."""

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap a forward result; record it when any input is differentiable."""
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.name = None
    if needs:
        tape.records.append(_Record(out, tuple(inputs), grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit(a.data + b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def log(x: Tensor, eps: float = EPS) -> Tensor:
    """Natural log of ``x + eps``."""
    xe = x.data + eps
    return _emit(np.log(xe), (x,), lambda g: (g / xe,))


# -- linear algebra and shape ----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules for leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn)


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer array of any shape."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit(table.data[index], (table,), grad_fn)


def take(x: Tensor, index, axis: int) -> Tensor:
    """Select a single position along ``axis`` (the axis is dropped)."""
    shape = x.shape
    sl = [slice(None)] * x.ndim
    sl[axis] = index
    sl = tuple(sl)

    def grad_fn(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return _emit(x.data[sl], (x,), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def grad_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(np.stack([t.data for t in tensors], axis=axis), tensors, grad_fn)


# -- reductions --------------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis)), (x,), grad_fn)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / n)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    arg = np.argmax(x.data, axis=axis)
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (out,)

    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis).squeeze(axis)
    return _emit(out, (x,), grad_fn)


def masked_max(x: Tensor, mask: np.ndarray) -> Tensor:
    """Neighbourhood max: ``out[..., i, :] = max_{j: mask[..., i, j]} x[..., j, :]``.

    Rows with an empty mask produce zeros and receive no gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    vals = np.where(mask[..., :, :, None], x.data[..., None, :, :], -np.inf)
    arg = np.argmax(vals, axis=-2)  # [..., N, h], index of the winning neighbour
    empty = ~mask.any(axis=-1)
    out = np.take_along_axis(vals, arg[..., None, :], axis=-2).squeeze(-2)
    out[empty] = 0.0
    shape = x.shape

    def grad_fn(g):
        g = np.where(empty[..., None], 0.0, g)
        lead = int(np.prod(shape[:-2], dtype=np.int64))
        a = arg.reshape(lead, *arg.shape[-2:])
        b_idx = np.arange(lead)[:, None, None]
        c_idx = np.arange(shape[-1])[None, None, :]
        grad = np.zeros((lead, *shape[-2:]))
        np.add.at(grad, (b_idx, a, c_idx), g.reshape(a.shape))
        grad = grad.reshape(shape)
        return (grad,)

    return _emit(out, (x,), grad_fn)


# -- probability ---------------------------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (x,), grad_fn)


def cross_entropy(probs: Tensor, target) -> Tensor:
    """``-log(probs[target] + eps)``; batched rows are averaged."""
    target = np.asarray(target)
    n = probs.shape[-1]
    if np.any(target < 0) or np.any(target >= n):
        raise IndexError(f"target index {target} out of range for {n} classes")
    if probs.ndim == 1:
        picked = take(probs, int(target), axis=0)
        return mul(log(picked), -1.0)
    rows = np.arange(probs.shape[0])
    p = probs.data[rows, target] + EPS
    shape = probs.shape
    b = shape[0]

    def grad_fn(g):
        out = np.zeros(shape)
        out[rows, target] = -g / (p * b)
        return (out,)

    return _emit(np.asarray(-np.log(p).mean()), (probs,), grad_fn)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``, gradient routed to ``soft`` unchanged."""
    return _emit(np.asarray(hard, dtype=np.float64), (soft,), lambda g: (g,))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- backward ----------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Returns a map from each tensor in ``wrt`` (default: every leaf on the
    tape that requires a gradient) to its gradient; tensors the loss does
    not reach get zeros.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        produced.add(id(rec.out))
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.grad_fn(g)):
            if not inp.requires_grad or gi is None:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
            leaves.setdefault(k, inp)
    if wrt is None:
        wrt = [t for k, t in leaves.items() if k not in produced]
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


# -- checkpoints -------------------------------------------------------------------

_MAGIC = b"GGCKPT01"


def save_params(path, params: Mapping[str, Tensor]) -> None:
    """Binary checkpoint: magic, u64 manifest length, JSON manifest, <f8 values."""
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    head = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for v in params.values():
            f.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n])
    offset = 16 + n
    out = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        out[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after manifest payload")
    return out
