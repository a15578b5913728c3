"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active on the
current thread and at least one operand requires a gradient, the operation is
appended to the tape together with a closure computing the vector-Jacobian
product. :func:`backward` walks the tape in reverse.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import math
import threading
from collections import Counter
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "BackwardError",
    "Tensor",
    "Tape",
    "current_tape",
    "backward",
    "matmul",
    "transpose",
    "add",
    "mul",
    "scale",
    "gelu",
    "layernorm",
    "softmax",
    "embed_lookup",
    "concat",
    "narrow",
    "reduce_sum",
    "mean",
    "cross_entropy",
    "finite_difference_check",
]


class AutodiffError(Exception):
    """Base class for errors raised by this module."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError, ArithmeticError):
    pass


class BackwardError(AutodiffError, RuntimeError):
    pass


class Tensor:
    """A dense row-major float64 array, optionally tracked for gradients.

    ``values`` is kept as the caller's array when it is already C-contiguous
    float64, so optimizers can update parameters in place.
    """

    __slots__ = ("values", "requires_grad", "grad", "node", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"tensor {name!r} has non-finite values")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[_Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.values = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("op", "out", "parents", "vjp")

    def __init__(self, op, out, parents, vjp):
        self.op = op
        self.out = out
        self.parents = parents
        self.vjp = vjp


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; it is only visible to the thread that entered it.
    Nodes are appended as operations execute, so every node's parents were
    produced earlier in the list.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.backward_calls = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out.node = None
        self.nodes.clear()
        self._consumed = False

    def op_counts(self) -> Counter:
        return Counter(node.op for node in self.nodes)

    def _record(self, op, out, parents, vjp) -> None:
        node = _Node(op, out, parents, vjp)
        out.node = node
        self.nodes.append(node)


def _result(op: str, value: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    req = any(p.requires_grad for p in parents)
    out = Tensor._wrap(value, req)
    if req:
        tape = current_tape()
        if tape is not None:
            tape._record(op, out, parents, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring leaf recorded on ``tape``.

    Leaf gradients are added to any existing ``.grad``; callers reset them
    between optimization steps.
    """
    if loss.size != 1:
        raise BackwardError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape._consumed:
        raise BackwardError("backward: tape already consumed; call tape.reset() first")
    tape._consumed = True
    tape.backward_calls += 1

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for p in node.parents:
            if p.requires_grad and p.node is None:
                leaves[id(p)] = p

    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        pgs = node.vjp(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            target = leaf_grads if p.node is None else grads
            key = id(p)
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg

    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
        leaf_grads[id(loss)] = grads[id(loss)]

    for key, leaf in leaves.items():
        g = leaf_grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.values)
        else:
            g = np.array(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# --------------------------------------------------------------------------
# primitives


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor, rowwise: bool = False) -> Tensor:
    """Matrix product of 2-D tensors.

    With ``rowwise=True`` each output row is computed independently of the
    other rows of ``a`` (bitwise), at some cost in speed. BLAS kernels may
    otherwise pick different accumulation orders for different row counts.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values
    out = np.einsum("ik,kj->ij", av, bv) if rowwise else av @ bv

    def vjp(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _result("matmul", out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected 2-D")
    out = np.ascontiguousarray(a.values.T)
    return _result("transpose", out, (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a vector matching ``a``'s last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def vjp(g):
            return g, g
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def vjp(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
    else:
        raise ShapeError("add", a.shape, b.shape)
    return _result("add", a.values + b.values, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also be a column of shape ``a.shape[:-1] + (1,)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if a.shape == b.shape:
        def vjp(g):
            return g * bv, g * av
    elif a.ndim >= 1 and b.shape == a.shape[:-1] + (1,):
        def vjp(g):
            return g * bv, (g * av).sum(axis=-1, keepdims=True)
    else:
        raise ShapeError("mul", a.shape, b.shape)
    return _result("mul", av * bv, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", a.values * c, (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.values
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _result("gelu", out, (a,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    k = x.shape[-1]
    if gain.shape != (k,) or bias.shape != (k,):
        raise ShapeError("layernorm", x.shape, gain.shape, bias.shape)
    xv = x.values
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gain.values
    out = xhat * gv + bias.values

    def vjp(g):
        dxhat = g * gv
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, k)
        return dx, (g2 * xhat.reshape(-1, k)).sum(axis=0), g2.sum(axis=0)

    return _result("layernorm", out, (x, gain, bias), vjp)


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax(a.values)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (a,), vjp)


def embed_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2 or idx.ndim != 1:
        raise ShapeError("embed_lookup", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embed_lookup", table.shape, idx.shape, detail="index out of range")
    out = table.values[idx]

    def vjp(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result("embed_lookup", out, (table,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat", detail="no operands")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        s = t.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, s)
    out = np.concatenate([t.values for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result("concat", out, tensors, vjp)


def narrow(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if not 0 <= start <= stop <= n:
        raise ShapeError("narrow", a.shape, detail=f"range {start}:{stop} on axis {ax}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(a.values[index])

    def vjp(g):
        ga = np.zeros_like(a.values)
        ga[index] = g
        return (ga,)

    return _result("narrow", out, (a,), vjp)


def reduce_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.values.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", out, (a,), vjp)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.values.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    shape = a.shape
    count = a.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _result("mean", out, (a,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` under ``logits``.

    ``logits`` is ``(n, C)``; a single row ``(C,)`` with a scalar label is
    also accepted.
    """
    lab = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    lv = logits.values
    if lv.ndim == 1:
        lv = lv[None, :]
    if lv.ndim != 2 or lab.shape != (lv.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, lab.shape)
    n, c = lv.shape
    if n == 0:
        raise ShapeError("cross_entropy", logits.shape, lab.shape, detail="empty batch")
    if lab.min() < 0 or lab.max() >= c:
        raise ShapeError("cross_entropy", logits.shape, lab.shape, detail="label out of range")
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, lab]
    out = np.asarray(nll.mean())
    shape = logits.shape

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, lab] -= 1.0
        return ((p * (float(g) / n)).reshape(shape),)

    return _result("cross_entropy", out, (logits,), vjp)


# --------------------------------------------------------------------------
# verification


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Compare the taped gradient of scalar ``f`` at ``x`` to central differences.

    Returns ``max |a - c| / (|a| + |c| + 1e-12)`` over the checked flat
    coordinates (all of them unless ``indices`` is given). ``x.values`` is
    perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        loss = f(x)
    if loss.size != 1:
        raise BackwardError(f"finite_difference_check: f must return a scalar, got {loss.shape}")
    backward(tape, loss)
    analytic = x.grad.reshape(-1).copy()

    flat = x.values.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval_scalar(f, x)
        flat[i] = orig - h
        fm = _eval_scalar(f, x)
        flat[i] = orig
        central = (fp - fm) / (2.0 * h)
        a = analytic[i]
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst


def _eval_scalar(f, x) -> float:
    val = f(x).item()
    if not math.isfinite(val):
        raise NonFiniteError("finite_difference_check: non-finite evaluation")
    return val
