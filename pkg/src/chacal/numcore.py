"""Dense tensors on numpy with a reverse-mode tape.

Every differentiable op builds a ``Tensor`` whose ``node`` records the op
name, its inputs and a closure mapping the upstream gradient to one gradient
per input. ``Tensor.backward`` walks the recorded nodes once, in reverse
creation order (creation order is forward execution order).
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

MASK_VALUE = -1e9
LN_EPS = 1e-5

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True}
_ids = itertools.count()


class ShapeError(ValueError):
    pass


class SingularMatrixError(ArithmeticError):
    def __init__(self, row: int, value: float):
        super().__init__(f"triangular system is singular at row {row} (diagonal {value!r})")
        self.row = row


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the dtype used for newly created tensors (float32 or float64)."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@dataclass
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating) or arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self._id = next(_ids)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return permute(self, axes) if axes else transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- reverse pass -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = _collect_tape(self)
        grads: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=self.dtype)}
        for t in tape:
            g = grads.pop(t._id, None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for inp, gi in zip(t.node.inputs, t.node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{t.node.op}: gradient {gi.shape} vs input {inp.shape}")
                prev = grads.get(inp._id)
                grads[inp._id] = gi if prev is None else prev + gi
        if grads:
            raise RuntimeError("tape traversal left unconsumed gradients")


def _collect_tape(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        if t.node is not None:
            stack.extend(t.node.inputs)
    # ids grow monotonically with creation, so this is reverse execution order
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants take the dtype of the tensor they meet, so float64 graphs stay float64
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    return as_tensor(a, tb), as_tensor(b, ta)


def _make(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward, **saved) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward, saved)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _make(out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _make(out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    return _make(
        out,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _make(
        out,
        "div",
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (the GPT-2 variant)."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), "gelu", (x,), backward)


# -- reductions and shape ops ------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "permute", (x,), lambda g: (np.transpose(g, inv),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        return x
    return _make(np.swapaxes(x.data, -1, -2), "transpose", (x,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), "getitem", (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, "concat", tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    n = x.shape[axis]
    if n % sections:
        raise ShapeError(f"cannot split axis of size {n} into {sections} equal parts")
    step = n // sections
    ax = axis % x.ndim
    out = []
    for i in range(sections):
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(i * step, (i + 1) * step)
        out.append(getitem(x, tuple(idx)))
    return out


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    for x, y in zip(ba[::-1], bb[::-1]):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold batch dims into one GEMM instead of summing per-batch products
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, "matmul", (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _forward_substitution(b: np.ndarray, c: np.ndarray) -> np.ndarray:
    n = b.shape[-1]
    y = np.empty(np.broadcast_shapes(b.shape[:-2], c.shape[:-2]) + c.shape[-2:], dtype=c.dtype)
    for i in range(n):
        acc = c[..., i, :]
        if i:
            acc = acc - np.matmul(b[..., i : i + 1, :i], y[..., :i, :])[..., 0, :]
        y[..., i, :] = acc / b[..., i, i, None]
    return y


def _back_substitution(u: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Solve ``u @ y = c`` with ``u`` upper-triangular."""
    n = u.shape[-1]
    y = np.empty(np.broadcast_shapes(u.shape[:-2], c.shape[:-2]) + c.shape[-2:], dtype=c.dtype)
    for i in range(n - 1, -1, -1):
        acc = c[..., i, :]
        if i < n - 1:
            acc = acc - np.matmul(u[..., i : i + 1, i + 1 :], y[..., i + 1 :, :])[..., 0, :]
        y[..., i, :] = acc / u[..., i, i, None]
    return y


def _check_diagonal(b: np.ndarray, tol: float) -> None:
    diag = np.abs(np.diagonal(b, axis1=-2, axis2=-1))
    bad = diag <= tol
    if bad.any():
        row = int(np.argwhere(bad)[0][-1])
        raise SingularMatrixError(row, float(diag[bad].flat[0]))


def solve_lower_triangular(b: Tensor, c: Tensor, tol: float = 1e-12) -> Tensor:
    """Solve ``b @ y = c`` for lower-triangular ``b`` by forward substitution.

    Only the lower triangle of ``b`` is read. The backward rule is analytic:
    ``dC = b^-T G`` (a back substitution) and ``dB = tril(-dC y^T)``.
    """
    b, c = _pair(b, c)
    if b.ndim < 2 or b.shape[-1] != b.shape[-2] or c.shape[-2] != b.shape[-1]:
        raise ShapeError(f"solve_lower_triangular: incompatible shapes {b.shape} and {c.shape}")
    _check_diagonal(b.data, tol)
    y = _forward_substitution(b.data, c.data)

    def backward(g):
        gc = _back_substitution(np.swapaxes(b.data, -1, -2), g)
        gb = None
        if b.requires_grad:
            gb = np.tril(-np.matmul(gc, np.swapaxes(y, -1, -2)))
            gb = _unbroadcast(gb, b.shape)
        return gb, _unbroadcast(gc, c.shape)

    return _make(y, "solve_lower_triangular", (b, c), backward)


# -- normalisation / probabilities -----------------------------------------------
def _check_rows_have_support(mask: np.ndarray) -> None:
    dead = np.all(mask <= MASK_VALUE / 2, axis=-1)
    if dead.any():
        raise ValueError(f"softmax row {tuple(np.argwhere(dead)[0])} has every entry masked")


def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Row-wise softmax over the last axis after adding a 0 / MASK_VALUE mask."""
    z = x.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask)
        _check_rows_have_support(m)
        z = z + m.astype(z.dtype, copy=False)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * p).sum(axis=-1, keepdims=True)) * p,)

    return _make(p, "softmax", (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (
            gx,
            _unbroadcast(g * xhat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return _make(out.astype(xd.dtype, copy=False), "layer_norm", (x, gain, bias), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, "log_softmax", (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, targets, loss_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    ``logits`` is (..., V); ``targets`` and ``loss_mask`` match its leading
    shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    mask = np.ones(targets.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is masked")
    if (targets[mask] < 0).any() or (targets[mask] >= v).any():
        raise ValueError(f"cross_entropy: target id out of range [0, {v})")
    safe = np.where(mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], axis=-1) - 1.0, axis=-1)
        p *= (mask / count)[..., None]
        return (p * g,)

    return _make(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather; the gradient scatter-adds back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, "embedding", (table,), backward)


# -- gradient checking -------------------------------------------------------------
def finite_difference_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (evaluated in float64)."""
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    with precision(np.float64), no_grad():
        flat = base.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = old - h
            fm = float(f(Tensor(base, dtype=np.float64)).data)
            flat[i] = old
            grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def tape_gradient(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` through the tape, in float64."""
    with precision(np.float64):
        t = Tensor(np.array(getattr(x, "data", x), dtype=np.float64), requires_grad=True, dtype=np.float64)
        f(t).backward()
    return t.grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
