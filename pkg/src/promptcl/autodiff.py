"""Minimal reverse-mode automatic differentiation on top of numpy.

Every operation records its parents and a closure mapping the output gradient
to per-parent gradients. ``Tensor.backward`` replays the recorded operations in
reverse creation order, so each node is visited exactly once.
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True
_default_dtype = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class StopGradientTape:
    """Records the values of ``stop_gradient`` calls, then replays them in call order.

    Finite differences of a loss containing ``stop_gradient`` only agree with
    backprop if the stopped values are held fixed at the base point: evaluate the
    base point inside ``recording()`` and each perturbed point inside ``replaying()``.
    """

    def __init__(self):
        self.values: list = []
        self._mode = None
        self._cursor = 0

    @contextmanager
    def _active(self, mode):
        global _sg_tape
        prev, _sg_tape = _sg_tape, self
        self._mode, self._cursor = mode, 0
        try:
            yield self
        finally:
            _sg_tape, self._mode = prev, None

    def recording(self):
        self.values = []
        return self._active("record")

    def replaying(self):
        return self._active("replay")

    def _pass(self, data: np.ndarray) -> np.ndarray:
        if self._mode == "record":
            self.values.append(data.copy())
            return data
        if self._cursor >= len(self.values):
            raise RuntimeError("replay ran past the recorded stop_gradient calls")
        out = self.values[self._cursor]
        if out.shape != data.shape:
            raise RuntimeError("replayed graph differs from the recorded one")
        self._cursor += 1
        return out


_sg_tape: "StopGradientTape | None" = None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op!r}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _default_dtype)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_ids)
        self.op = op

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        _check_finite(data, op)
        out.data = data
        out.grad = None
        out._id = next(_ids)
        out.op = op
        live = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = live
        if live:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("implicit gradient only for scalar outputs")
            grad = np.ones_like(self.data)
        tape = _collect_tape(self)
        grads = {self._id: np.asarray(grad, dtype=self.data.dtype)}
        for node in tape:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node.is_leaf:
                _check_finite(g, "backward")
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _collect_tape(root: Tensor) -> list:
    """Nodes reachable from ``root`` that carry gradient, newest first."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack.append(p)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    """Elementwise product; a plain number acts as ``scale``."""
    if not isinstance(b, Tensor):
        return scale(a, b)
    a = _wrap(a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "mul")


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant (scalar or non-differentiable array)."""
    c_arr = np.asarray(c, dtype=a.data.dtype)
    out = a.data * c_arr

    def backward(g):
        return (_unbroadcast(g * c_arr, a.shape),)

    return Tensor._from_op(out, (a,), backward, "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,), "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out, (a,), backward, "gelu")


def stop_gradient(a: Tensor) -> Tensor:
    """Same value, but a dead end for backpropagation."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    if _sg_tape is not None:
        out.data = _sg_tape._pass(a.data)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._id = next(_ids)
    out.op = "stop_gradient"
    return out


# -- reductions / shape ---------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    out = np.swapaxes(a.data, -1, -2)
    return Tensor._from_op(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor._from_op(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return Tensor._from_op(out, tensors, backward, "concat")


concat_tokens = concat


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return Tensor._from_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim == 1 or b.ndim == 1:
        raise ShapeError("matmul expects operands of rank >= 2")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch axes into rows instead of materialising per-batch products
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out); ``x`` may be a single vector."""
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, x.shape[0])), weight, bias), (weight.shape[-1],))
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- normalisations / probabilities ----------------------------------------------

def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    if not -z.ndim <= axis < max(z.ndim, 1):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {z.shape}")
    out = _softmax_np(z.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (z,), backward, "softmax")


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    if not -z.ndim <= axis < max(z.ndim, 1):
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {z.shape}")
    out = _log_softmax_np(z.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (z,), backward, "log_softmax")


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = Tensor._from_op(xhat, (x,), backward, "layer_norm")
    if weight is not None:
        if weight.shape != (n,):
            raise ShapeError(f"layer_norm weight {weight.shape} != ({n},)")
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- losses / similarities -------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    Accepts a single logit vector with an integer label, or a (B, C) batch with
    a length-B label array.
    """
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_cls = z.shape[-1]
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {y.shape[0]} labels for {z.shape[0]} rows")
    if (y < 0).any() or (y >= n_cls).any():
        raise IndexError(f"cross_entropy: label out of range for {n_cls} classes")
    logp = _log_softmax_np(z, -1)
    rows = np.arange(z.shape[0])
    out = np.asarray(-logp[rows, y].mean())

    def backward(g):
        p = np.exp(logp)
        p[rows, y] -= 1.0
        p *= g / z.shape[0]
        return (p[0] if single else p,)

    return Tensor._from_op(out, (logits,), backward, "cross_entropy")


def soft_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Per-row ``-sum(target * log_softmax(logits))`` for target rows that are distributions.

    The logit gradient uses the normalised form ``softmax(logits) - target``, so a
    target computed by :func:`softmax` from the same logits gives exactly zero.
    """
    if logits.shape != target.shape:
        raise ShapeError(f"soft_cross_entropy: shapes {logits.shape} and {target.shape} differ")
    if not np.allclose(target.data.sum(axis=-1), 1.0, rtol=0, atol=1e-5):
        raise ValueError("soft_cross_entropy: target rows must sum to 1")
    logp = _log_softmax_np(logits.data, -1)
    out = np.asarray(-(target.data * logp).sum(axis=-1))

    def backward(g):
        g = np.asarray(g)[..., None]
        return g * (_softmax_np(logits.data, -1) - target.data), -g * logp

    return Tensor._from_op(out, (logits, target), backward, "soft_cross_entropy")


COSINE_EPS = 1e-12


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """cos(a, b) for two vectors of equal length."""
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: expected equal-length vectors, got {a.shape}, {b.shape}")
    out = cosine_matrix(reshape(a, (1, -1)), reshape(b, (1, -1)))
    return reshape(out, ())


def cosine_matrix(q: Tensor, k: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of q (B, D) and rows of k (K, D)."""
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"cosine_matrix: {q.shape} vs {k.shape}")
    qn = np.sqrt((q.data * q.data).sum(axis=1))
    kn = np.sqrt((k.data * k.data).sum(axis=1))
    if (qn <= COSINE_EPS).any() or (kn <= COSINE_EPS).any():
        raise ZeroDivisionError("cosine similarity of a zero-norm vector")
    qh = q.data / qn[:, None]
    kh = k.data / kn[:, None]
    out = np.clip(qh @ kh.T, -1.0, 1.0)

    def backward(g):
        gq = gk = None
        if q.requires_grad:
            gq = (g @ kh - (g * out).sum(axis=1, keepdims=True) * qh) / qn[:, None]
        if k.requires_grad:
            gk = (g.T @ qh - (g * out).sum(axis=0)[:, None] * kh) / kn[:, None]
        return gq, gk

    return Tensor._from_op(out, (q, k), backward, "cosine_matrix")
