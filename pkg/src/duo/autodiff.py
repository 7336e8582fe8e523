"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed inside an active :class:`Tape` are appended to it in
execution order; :meth:`Tape.backward` replays the tape in reverse.  Outside
a tape nothing is recorded, so the same model code doubles as a plain
numpy forward pass (sampling, evaluation).

Gradients accumulate additively into leaf ``.grad`` arrays across backward
calls until :func:`zero_grad` (or ``Tensor.zero_grad``) resets them.

Broadcasting is deliberately restricted to exact shape matches and
scalar-vs-tensor; the one structured broadcast needed by dense layers is
the explicit :func:`add_rowvec`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GraphError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "neg",
    "matmul",
    "transpose",
    "add_rowvec",
    "concat",
    "take",
    "tile_rows",
    "reshape",
    "silu",
    "sigmoid",
    "log_sigmoid",
    "exp",
    "log",
    "logsumexp",
    "sum",
    "mean",
    "sq_l2",
    "row_sq_l2",
    "zero_grad",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Backward was requested on something the tape cannot differentiate."""


_ids = itertools.count()
_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``requires_grad`` marks a leaf whose gradient should be accumulated.
    Non-leaf tensors produced on a tape carry ``node_id`` into that tape.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "tape", "uid")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id: int | None = None
        self.tape: Tape | None = None
        self.uid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def backward(self) -> None:
        if self.tape is None:
            raise GraphError("tensor was not produced on a tape; nothing to differentiate")
        self.tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

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

    @property
    def T(self):
        return transpose(self)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Flat computation record.  Use as a context manager around a forward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, inputs, out: Tensor, backward) -> None:
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append(Node(op, tuple(inputs), out.node_id, backward))

    def backward(self, output: Tensor) -> None:
        if output.values.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
        if output.tape is not self or output.node_id is None:
            raise GraphError("output is not connected to this tape")
        grads: dict[int, np.ndarray] = {output.node_id: np.ones_like(output.values)}
        for node in reversed(self.nodes[: output.node_id + 1]):
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if inp.node_id is not None and inp.tape is self:
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = gi if prev is None else prev + gi
                elif inp.requires_grad:
                    inp.grad = inp.grad + gi


@contextmanager
def no_record():
    """Temporarily suspend recording on the current thread."""
    stack = getattr(_local, "stack", None)
    saved = list(stack) if stack else []
    _local.stack = []
    try:
        yield
    finally:
        _local.stack = saved


def _make(values: np.ndarray, op: str, inputs: Iterable[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = False
    out.grad = None
    out.node_id = None
    out.tape = None
    out.uid = next(_ids)
    inputs = tuple(inputs)
    tape = _active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcast is allowed, so reducing means summing everything
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, "add", (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, "sub", (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    """Element-wise product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)))


def scalar_mul(s: float, x) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    return _make(s * x.values, "scalar_mul", (x,), lambda g: (s * g,))


def neg(x) -> Tensor:
    return scalar_mul(-1.0, x)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {x.shape}")
    return _make(x.values.T, "transpose", (x,), lambda g: (g.T,))


def add_rowvec(x, b) -> Tensor:
    """``x[i, :] + b`` for every row ``i``: the bias add of a dense layer."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.values.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_rowvec: row vector {b.shape} does not fit {x.shape}")
    return _make(x.values + b.values, "add_rowvec", (x, b), lambda g: (g, g.sum(axis=0)))


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        vals = np.concatenate([x.values for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in xs]} along axis {axis}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return _make(vals, "concat", xs, back)


def take(x, idx) -> Tensor:
    """Select entries (or rows) of ``x`` along axis 0; gradient scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.values[idx], "take", (x,), back)


def tile_rows(x, n: int) -> Tensor:
    """Stack ``n`` copies of a 1-D tensor into an ``(n, d)`` matrix."""
    x = _as_tensor(x)
    if x.values.ndim != 1:
        raise ShapeError(f"tile_rows needs a vector, got shape {x.shape}")
    return _make(np.tile(x.values, (n, 1)), "tile_rows", (x,), lambda g: (g.sum(axis=0),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        vals = x.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}") from exc
    return _make(vals, "reshape", (x,), lambda g: (g.reshape(old),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.values)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    s_neg = _sigmoid(-v)
    return _make(out, "log_sigmoid", (x,), lambda g: (g * s_neg,))


def silu(x) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    s = _sigmoid(v)
    return _make(v * s, "silu", (x,), lambda g: (g * (s + v * s * (1.0 - s)),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.values)
    return _make(e, "exp", (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    v = x.values
    if np.any(v <= 0):
        raise FloatingPointError("log of a non-positive entry")
    return _make(np.log(v), "log", (x,), lambda g: (g / v,))


def logsumexp(x) -> Tensor:
    """Scalar log-sum-exp over all entries."""
    x = _as_tensor(x)
    v = x.values
    m = v.max()
    w = np.exp(v - m)
    z = w.sum()
    return _make(np.asarray(m + np.log(z)), "logsumexp", (x,), lambda g: (g * w / z,))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.values.sum()), "sum", (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.size
    return _make(np.asarray(x.values.mean()), "mean", (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sq_l2(x) -> Tensor:
    """Sum of squares over all entries."""
    x = _as_tensor(x)
    v = x.values
    return _make(np.asarray(np.dot(v.ravel(), v.ravel())), "sq_l2", (x,), lambda g: (2.0 * g * v,))


def row_sq_l2(x) -> Tensor:
    """Per-row squared norm of a matrix: ``(n, d) -> (n,)``."""
    x = _as_tensor(x)
    v = x.values
    if v.ndim != 2:
        raise ShapeError(f"row_sq_l2 needs a matrix, got shape {x.shape}")
    return _make((v * v).sum(axis=1), "row_sq_l2", (x,), lambda g: (2.0 * g[:, None] * v,))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               normwise: bool = False) -> float:
    """Relative error between tape gradients and central differences.

    ``f`` is re-evaluated from scratch for every perturbation, so it must be
    deterministic (freeze any random draws before calling).  With
    ``max_coords`` a random subset of coordinates is checked per parameter.

    The default is the worst per-coordinate error.  ``normwise`` instead
    returns ``||g - g_fd|| / ||g_fd||`` over the checked coordinates, which
    stays meaningful when some components sit at the finite-difference
    roundoff level (a saturated sigmoid, say).
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"finite-difference step {h} outside [1e-7, 1e-4]")
    params = list(params)
    saved = [None if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = np.zeros_like(p.values)
    with Tape() as tape:
        out = f()
    if out.tape is tape:
        tape.backward(out)
    analytic = [p.grad.copy() for p in params]
    for p, s in zip(params, saved):
        p.grad = s if s is not None else (np.zeros_like(p.values) if p.requires_grad else None)

    worst = 0.0
    an_all, num_all = [], []
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            an = ga.reshape(-1)[i]
            an_all.append(an)
            num_all.append(num)
            worst = max(worst, abs(an - num) / (abs(an) + abs(num) + 1e-12))
    if normwise:
        an_all, num_all = np.array(an_all), np.array(num_all)
        return float(np.linalg.norm(an_all - num_all) / (np.linalg.norm(num_all) + 1e-12))
    return worst
