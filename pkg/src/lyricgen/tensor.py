"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on a tensor that requires gradients records its parents and
a local backward rule on the output tensor. :func:`backward` walks that graph
in reverse topological order, so the graph recorded during a forward pass is
the tape. Graphs are rebuilt from scratch on every forward pass.

Binary elementwise operations require identical shapes. Broadcasting is
always explicit (:func:`broadcast_to`), which keeps the backward rules
simple and catches silent shape bugs in the model code.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError

__all__ = [
    "Tensor",
    "GradCheckReport",
    "no_grad",
    "is_grad_enabled",
    "make_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "elementwise",
    "sum",
    "dot",
    "reshape",
    "broadcast_to",
    "concat",
    "stack",
    "slice_",
    "take",
    "embedding_lookup",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "mask_fill",
    "mul_const",
    "blend",
    "backward",
    "grad_check",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float64 array that can record its own gradient.

    ``data`` is a numpy array (row-major). ``grad`` is populated on leaf
    tensors with ``requires_grad=True`` by :func:`backward` and accumulates
    across calls until cleared with :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def zeros(cls, *shape, requires_grad=False):
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape)
    return Tensor(arr)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Create the output tensor of a recorded operation.

    ``backward_fn(g)`` receives the gradient of the output and returns one
    gradient array (or ``None``) per parent, in order.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics.

    Supports vector/matrix operands and a leading batch dimension on either
    side. The gradient of a 2-D operand used against a batched operand is
    summed over the batch.
    """
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul cannot combine {a.shape} and {b.shape}") from exc

    a_shape, b_shape = a.shape, b.shape
    a_data, b_data = a.data, b.data

    def _back(g):
        A = a_data[None, :] if a_data.ndim == 1 else a_data
        B = b_data[:, None] if b_data.ndim == 1 else b_data
        G = g
        if a_data.ndim == 1:
            G = np.expand_dims(G, -2)
        if b_data.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = np.matmul(G, np.swapaxes(B, -1, -2))
        gb = np.matmul(np.swapaxes(A, -1, -2), G)
        ga = _unbroadcast(ga, A.shape).reshape(a_shape)
        gb = _unbroadcast(gb, B.shape).reshape(b_shape)
        return ga, gb

    return make_op(out, (a, b), _back)


# --------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(x: Tensor) -> Tensor:
    return make_op(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise ContractError("log of a non-positive value")
    return make_op(np.log(xd), (x,), lambda g: (g / xd,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "neg": neg, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch a named pointwise operation (add, sub, mul, sigmoid, tanh, ...)."""
    if op in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{op} takes one operand, got {len(operands)}")
        return _UNARY[op](operands[0])
    if op in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{op} takes two operands, got {len(operands)}")
        return _BINARY[op](*operands)
    raise ContractError(f"unknown elementwise op {op!r}")


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``x``; no gradient to ``c``."""
    c = np.asarray(c, dtype=np.float64)
    try:
        out = x.data * c
    except ValueError as exc:
        raise DimensionError(f"mul_const: cannot broadcast {c.shape} to {x.shape}") from exc
    if out.shape != x.shape:
        raise DimensionError(f"mul_const: constant {c.shape} would grow {x.shape}")
    return make_op(out, (x,), lambda g: (g * c,))


def blend(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """``mask * a + (1 - mask) * b`` for a constant mask broadcastable to ``a``."""
    _same_shape(a, b, "blend")
    m = np.asarray(mask, dtype=np.float64)
    try:
        out = m * a.data + (1.0 - m) * b.data
    except ValueError as exc:
        raise DimensionError(f"blend: mask {m.shape} incompatible with {a.shape}") from exc
    if out.shape != a.shape:
        raise DimensionError(f"blend: mask {m.shape} would grow {a.shape}")
    return make_op(out, (a, b), lambda g: (g * m, g * (1.0 - m)))


def mask_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is false by the constant ``value``."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise DimensionError(f"mask_fill: mask {keep.shape} vs tensor {x.shape}")
    out = np.where(keep, x.data, value)
    return make_op(out, (x,), lambda g: (np.where(keep, g, 0.0),))


# --------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out, dtype=np.float64), (x,), _back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-shape tensors (full contraction)."""
    return sum(mul(a, b))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    src = x.shape
    return make_op(out, (x,), lambda g: (g.reshape(src),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape
    return make_op(out, (x,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ndim = tensors[0].ndim
    ax = axis % ndim if ndim else 0
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[d] != ref[d] for d in range(ndim) if d != ax):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def _back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op(out, tensors, _back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("stack of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def _back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_op(out, tensors, _back)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (view) indexing: integers and slices only."""
    out = x.data[key]
    shape = x.shape

    def _back(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return make_op(np.array(out, dtype=np.float64), (x,), _back)


def take(x: Tensor, index) -> Tensor:
    """Advanced (gather) indexing; repeated indices accumulate in backward."""
    out = x.data[index]
    shape = x.shape

    def _back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return make_op(out, (x,), _back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; output shape is ``ids.shape + (d,)``."""
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size:
        bad = ids[(ids < 0) | (ids >= vocab)]
        if bad.size:
            raise IndexError(f"embedding id {int(bad.reshape(-1)[0])} outside [0, {vocab})")
    if ids.size == 0:
        return make_op(np.zeros(ids.shape + (table.shape[1],)), (table,),
                       lambda g: (np.zeros(table.shape),))
    return take(table, ids)


# --------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax of an empty tensor")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def _back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return make_op(y, (x,), _back)


def _log_softmax_array(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    z = a - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty tensor")
    y = _log_softmax_array(x.data, axis)

    def _back(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return make_op(y, (x,), _back)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Masked mean negative log-likelihood.

    ``logits`` has shape ``(..., V)``; ``targets`` and ``mask`` have the
    leading shape. Returns ``-(1/sum(mask)) * sum(mask * log p[target])``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if mask is None:
        mask = np.ones(lead, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise DimensionError(f"mask {mask.shape} does not match logits {logits.shape}")
    total = int(mask.sum())
    if total == 0:
        raise DegenerateBatchError("cross_entropy over a fully masked batch")
    vocab = logits.shape[-1]
    safe_targets = np.where(mask, targets, 0)
    if np.any((safe_targets < 0) | (safe_targets >= vocab)):
        raise IndexError("target id outside vocabulary")
    logp = _log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, safe_targets[..., None], axis=-1)[..., 0]
    weights = mask.astype(np.float64) / total
    loss = -np.sum(weights * picked)

    def _back(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, safe_targets[..., None],
            np.take_along_axis(grad, safe_targets[..., None], axis=-1) - 1.0, axis=-1,
        )
        return (grad * (weights * g)[..., None],)

    return make_op(np.asarray(loss), (logits,), _back)


# --------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topological(loss)):
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
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple | None = None  # (input index, flat coordinate)
    checked: int = 0


def grad_check(
    f: Callable[..., Tensor],
    x,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central differences coordinate-wise.

    ``x`` is a tensor or a sequence of tensors passed positionally to ``f``.
    The relative error for a coordinate is ``|a - n| / max(|a|, |n|, 1e-6)``.
    With ``max_coords`` only that many coordinates per input are probed,
    chosen with a seeded generator.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    first = f(*xs)
    second = f(*xs)
    if first.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    if not np.array_equal(first.data, second.data):
        raise ContractError("function is not deterministic: two forward passes differ")
    backward(first)
    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked = 0.0, None, 0
    with no_grad():
        for i, t in enumerate(xs):
            analytic = np.zeros(t.shape) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = analytic.reshape(-1)
            for j in coords:
                orig = flat[j]
                flat[j] = orig + eps
                up = f(*xs).item()
                flat[j] = orig - eps
                down = f(*xs).item()
                flat[j] = orig
                num = (up - down) / (2.0 * eps)
                a = a_flat[j]
                err = abs(a - num) / max(abs(a), abs(num), 1e-6)
                checked += 1
                if err > worst_err:
                    worst_err, worst_at = err, (i, int(j))
    return GradCheckReport(max_rel_error=worst_err, passed=worst_err < tol, worst=worst_at,
                           checked=checked)
