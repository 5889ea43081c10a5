"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Forward values are computed eagerly when an op is recorded; ``backward``
replays the tape in reverse, accumulating gradients for every variable that
requires them.  The primitive set is deliberately small: it covers what the
coordinate networks in :mod:`transfield.fields` need and nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class AutodiffError(Exception):
    """Base class for tape errors."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnknownPrimitiveError(AutodiffError, KeyError):
    def __str__(self):
        return f"unknown primitive {self.args[0]!r}"


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message)


class NonDifferentiableError(AutodiffError):
    """Raised by :func:`grad_check` when one-sided differences disagree."""

    def __init__(self, message: str, index: int):
        self.index = index
        super().__init__(message)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict[str, Any]
    saved: tuple[np.ndarray, ...]
    out_value: np.ndarray


class Variable:
    __slots__ = ("tape", "id", "value", "requires_grad")

    def __init__(self, tape: "Tape", vid: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.id = vid
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Variable(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"

    def _lift(self, other) -> "Variable":
        if isinstance(other, Variable):
            return other
        return self.tape.const(np.asarray(other, dtype=self.value.dtype))

    def __add__(self, other):
        return self.tape.record("add", (self, self._lift(other)))

    def __radd__(self, other):
        return self.tape.record("add", (self._lift(other), self))

    def __sub__(self, other):
        return self.tape.record("sub", (self, self._lift(other)))

    def __rsub__(self, other):
        return self.tape.record("sub", (self._lift(other), self))

    def __mul__(self, other):
        return self.tape.record("mul", (self, self._lift(other)))

    def __rmul__(self, other):
        return self.tape.record("mul", (self._lift(other), self))

    def __neg__(self):
        return self.tape.record("mul", (self, self._lift(-1.0)))

    def __matmul__(self, other):
        return self.tape.record("matmul", (self, self._lift(other)))


# -- primitives ---------------------------------------------------------------
# Each primitive is (forward(values, attrs) -> out,
#                    backward(g, values, out, attrs, needs) -> grads per input).


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, (a.shape, b.shape), "not broadcastable") from None


def _add_fwd(vals, attrs):
    _check_broadcast("add", *vals)
    return vals[0] + vals[1]


def _add_bwd(g, vals, out, attrs, needs):
    return [_unbroadcast(g, v.shape) if n else None for v, n in zip(vals, needs)]


def _sub_fwd(vals, attrs):
    _check_broadcast("sub", *vals)
    return vals[0] - vals[1]


def _sub_bwd(g, vals, out, attrs, needs):
    a, b = vals
    return [
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(-g, b.shape) if needs[1] else None,
    ]


def _mul_fwd(vals, attrs):
    _check_broadcast("mul", *vals)
    return vals[0] * vals[1]


def _mul_bwd(g, vals, out, attrs, needs):
    a, b = vals
    return [
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    ]


def _matmul_fwd(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", (a.shape, b.shape), "expected (n,k) @ (k,m)")
    return a @ b


def _matmul_bwd(g, vals, out, attrs, needs):
    a, b = vals
    ga = gb = None
    if b.ndim == 1:
        if needs[0]:
            ga = np.outer(g, b)
        if needs[1]:
            gb = a.T @ g
    else:
        if needs[0]:
            ga = g @ b.T
        if needs[1]:
            gb = a.T @ g
    return [ga, gb]


def _sin_bwd(g, vals, out, attrs, needs):
    return [g * np.cos(vals[0])]


def _exp_bwd(g, vals, out, attrs, needs):
    return [g * out]


def _abs_bwd(g, vals, out, attrs, needs):
    return [g * np.sign(vals[0])]


def _relu_bwd(g, vals, out, attrs, needs):
    return [g * (vals[0] > 0)]


def _sum_fwd(vals, attrs):
    return np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _sum_bwd(g, vals, out, attrs, needs):
    x = vals[0]
    return [np.array(_expand_reduced(g, x.shape, attrs.get("axis"), attrs.get("keepdims", False)))]


def _mean_fwd(vals, attrs):
    return np.mean(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _mean_bwd(g, vals, out, attrs, needs):
    x = vals[0]
    axis = attrs.get("axis")
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    g = _expand_reduced(g, x.shape, axis, attrs.get("keepdims", False))
    return [g / x.dtype.type(count)]


def _concat_fwd(vals, attrs):
    axis = attrs.get("axis", -1)
    try:
        return np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat", [v.shape for v in vals]) from None


def _concat_bwd(g, vals, out, attrs, needs):
    axis = attrs.get("axis", -1)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return list(np.split(g, bounds, axis=axis))


def _gather_fwd(vals, attrs):
    table = vals[0]
    idx = attrs["index"]
    if table.ndim != 2:
        raise ShapeError("gather", (table.shape,), "table must be (rows, features)")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather", (table.shape, idx.shape), "index out of range")
    return table[idx]


def _gather_bwd(g, vals, out, attrs, needs):
    # Scatter-add; colliding indices accumulate.
    table = vals[0]
    idx = attrs["index"].ravel()
    gf = g.reshape(-1, table.shape[1])
    grad = np.empty_like(table)
    for f in range(table.shape[1]):
        grad[:, f] = np.bincount(idx, weights=gf[:, f], minlength=table.shape[0])
    return [grad]


def _corner_bits(d: int) -> np.ndarray:
    # bits[c, k] == 1 when corner c takes the upper vertex along axis k
    c = np.arange(2**d)[:, None]
    return (c >> np.arange(d)[None, :]) & 1


def _blend_weights(frac: np.ndarray) -> np.ndarray:
    d = frac.shape[1]
    bits = _corner_bits(d)
    per_axis = np.where(bits[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    return np.prod(per_axis, axis=2)


def _blend_fwd(vals, attrs):
    values, frac = vals
    n, d = frac.shape
    if values.ndim != 3 or values.shape[0] != n or values.shape[1] != 2**d:
        raise ShapeError("blend", (values.shape, frac.shape), "values must be (n, 2**d, features)")
    w = _blend_weights(frac)
    return np.einsum("nk,nkf->nf", w, values)


def _blend_bwd(g, vals, out, attrs, needs):
    values, frac = vals
    d = frac.shape[1]
    gv = gf = None
    if needs[0] or needs[1]:
        w = _blend_weights(frac)
    if needs[0]:
        gv = w[:, :, None] * g[:, None, :]
    if needs[1]:
        bits = _corner_bits(d)
        proj = np.einsum("nkf,nf->nk", values, g)
        per_axis = np.where(bits[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
        gf = np.empty_like(frac)
        for k in range(d):
            others = np.prod(np.delete(per_axis, k, axis=2), axis=2)
            sign = np.where(bits[:, k] == 1, 1.0, -1.0).astype(frac.dtype)
            gf[:, k] = np.sum(proj * others * sign[None, :], axis=1)
    return [gv, gf]


def _select_fwd(vals, attrs):
    x = vals[0]
    return np.take(x, attrs["index"], axis=attrs.get("axis", -1))


def _select_bwd(g, vals, out, attrs, needs):
    x = vals[0]
    axis = attrs.get("axis", -1) % x.ndim
    grad = np.zeros_like(x)
    index = np.atleast_1d(attrs["index"])
    gg = g if np.ndim(attrs["index"]) else np.expand_dims(g, axis)
    sl = [slice(None)] * x.ndim
    for pos, i in enumerate(index):
        sl[axis] = i
        src = [slice(None)] * gg.ndim
        src[axis] = pos
        grad[tuple(sl)] += gg[tuple(src)]
    return [grad]


def _reshape_fwd(vals, attrs):
    try:
        return vals[0].reshape(attrs["shape"])
    except ValueError:
        raise ShapeError("reshape", (vals[0].shape, attrs["shape"])) from None


def _reshape_bwd(g, vals, out, attrs, needs):
    return [g.reshape(vals[0].shape)]


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "sin": (lambda v, a: np.sin(v[0]), _sin_bwd),
    "exp": (lambda v, a: np.exp(v[0]), _exp_bwd),
    "abs": (lambda v, a: np.abs(v[0]), _abs_bwd),
    "relu": (lambda v, a: np.maximum(v[0], 0), _relu_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "gather": (_gather_fwd, _gather_bwd),
    "blend": (_blend_fwd, _blend_bwd),
    "select": (_select_fwd, _select_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
}


class Tape:
    """Records primitive ops in execution order.

    With ``enabled=False`` ops are evaluated but nothing is kept, which is
    what full-grid evaluation wants.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._next_id = 0
        self._requires: set[int] = set()

    def _new_id(self) -> int:
        vid = self._next_id
        self._next_id += 1
        return vid

    def leaf(self, value, requires_grad: bool = True) -> Variable:
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        return Variable(self, self._new_id(), value, requires_grad and self.enabled)

    def const(self, value) -> Variable:
        return self.leaf(value, requires_grad=False)

    def record(self, op: str, inputs, **attrs) -> Variable:
        try:
            fwd, _ = PRIMITIVES[op]
        except KeyError:
            raise UnknownPrimitiveError(op) from None
        inputs = tuple(inputs)
        for v in inputs:
            if v.tape is not self:
                raise AutodiffError(f"{op}: variable {v.id} belongs to a different tape")
        vals = tuple(v.value for v in inputs)
        out = np.asarray(fwd(vals, attrs))
        needs_grad = self.enabled and any(v.requires_grad for v in inputs)
        var = Variable(self, self._new_id(), out, needs_grad)
        if needs_grad:
            self.nodes.append(
                Node(op, tuple(v.id for v in inputs), var.id, attrs, vals, out)
            )
            self._requires.update(v.id for v in inputs if v.requires_grad)
        return var

    def backward(self, loss: Variable) -> dict[int, np.ndarray]:
        if loss.tape is not self:
            raise AutodiffError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError("backward", (loss.shape,), "loss must be scalar")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        requires = self._requires
        for node in reversed(self.nodes):
            g = grads.get(node.output)
            if g is None:
                continue
            _, bwd = PRIMITIVES[node.op]
            needs = [i in requires for i in node.inputs]
            in_grads = bwd(g, node.saved, node.out_value, node.attrs, needs)
            for vid, need, ig in zip(node.inputs, needs, in_grads):
                if not need or ig is None:
                    continue
                if vid in grads:
                    grads[vid] = grads[vid] + ig
                else:
                    grads[vid] = ig
        self.gradients = grads
        return grads

    def grad(self, var: Variable) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. ``var`` (zeros if unreached)."""
        g = self.gradients.get(var.id)
        return np.zeros_like(var.value) if g is None else g


def record(tape: Tape, op: str, inputs, attrs: dict | None = None) -> Variable:
    return tape.record(op, inputs, **(attrs or {}))


def backward(tape: Tape, loss: Variable) -> dict[int, np.ndarray]:
    return tape.backward(loss)


# thin functional wrappers
def matmul(a, b):
    return a.tape.record("matmul", (a, b))


def sin(x):
    return x.tape.record("sin", (x,))


def exp(x):
    return x.tape.record("exp", (x,))


def absolute(x):
    return x.tape.record("abs", (x,))


def relu(x):
    return x.tape.record("relu", (x,))


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return x.tape.record("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return x.tape.record("mean", (x,), axis=axis, keepdims=keepdims)


def concat(xs, axis=-1):
    xs = list(xs)
    return xs[0].tape.record("concat", xs, axis=axis)


def gather(table, index):
    return table.tape.record("gather", (table,), index=np.asarray(index, dtype=np.int64))


def blend(values, frac):
    return values.tape.record("blend", (values, frac))


def select(x, index, axis=-1):
    return x.tape.record("select", (x,), index=index, axis=axis)


def reshape(x, shape):
    return x.tape.record("reshape", (x,), shape=tuple(shape))


@dataclass
class GradCheck:
    max_rel_error: float
    autograd: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def grad_check(
    f: Callable[[Variable], Variable],
    point,
    h: float = 1e-6,
    kink_tol: float = 1e-3,
    indices=None,
) -> float:
    """Max relative error between autograd and central differences of ``f``.

    ``f`` receives a Variable holding ``point`` (float64) and must return a
    scalar Variable.  Coordinates where the forward and backward one-sided
    differences disagree are reported as non-differentiable instead of being
    compared.  ``indices`` restricts the check to a subset of flat coordinates.
    """
    return grad_check_full(f, point, h, kink_tol, indices).max_rel_error


def grad_check_full(f, point, h=1e-6, kink_tol=1e-3, indices=None) -> GradCheck:
    if h <= 0:
        raise ValueError("step h must be positive")
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    y = f(x)
    y0 = float(np.asarray(y.value).reshape(()))
    if not np.isfinite(y0):
        raise NonFiniteError("f is non-finite at the base point")
    tape.backward(y)
    auto = np.asarray(tape.grad(x), dtype=np.float64).ravel()

    def evaluate(p):
        t = Tape(enabled=False)
        return float(np.asarray(f(t.leaf(p)).value).reshape(()))

    flat = point.ravel()
    idx = range(flat.size) if indices is None else indices
    idx = np.asarray(list(idx), dtype=np.int64)
    numeric = np.empty(idx.size)
    for n, i in enumerate(idx):
        p = flat.copy()
        p[i] += h
        fp = evaluate(p.reshape(point.shape))
        p[i] -= 2 * h
        fm = evaluate(p.reshape(point.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite value when perturbing coordinate {i}", index=int(i))
        fwd = (fp - y0) / h
        bwd = (y0 - fm) / h
        if abs(fwd - bwd) > kink_tol * (abs(fwd) + abs(bwd) + 1.0):
            raise NonDifferentiableError(
                f"one-sided differences disagree at coordinate {i}: {bwd:g} vs {fwd:g}", index=int(i)
            )
        numeric[n] = (fp - fm) / (2 * h)
    a = auto[idx]
    rel = np.abs(a - numeric) / (np.abs(numeric) + 1e-12)
    return GradCheck(float(rel.max()) if rel.size else 0.0, a, numeric)
