"""Reverse-mode automatic differentiation on a flat tape.

Primal values are computed eagerly with numpy; every operation appends a
record (kind, input node ids, static params, cached value) to the tape of its
Variable inputs.  ``Tape.backward`` performs a single reverse sweep.

Every public operation also accepts plain numpy arrays / floats.  When no
argument is a :class:`Variable` the operation runs untaped and returns a numpy
array, which lets the sensor models and agents run without any bookkeeping
during evaluation.

Broadcasting follows numpy rules; adjoints are summed back to the input shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

__all__ = [
    "AutodiffError",
    "DomainError",
    "ShapeError",
    "Tape",
    "Variable",
    "value_of",
    "is_variable",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "cos",
    "sin",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "square",
    "sqrt",
    "abs",
    "minimum",
    "maximum",
    "clamp",
    "matvec",
    "sum",
    "mean",
    "logsumexp",
    "stop_gradient",
    "getitem",
    "reshape",
]


class AutodiffError(Exception):
    """Base class for tape errors."""


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    params: dict[str, Any]
    value: np.ndarray
    requires_grad: bool


@dataclass(frozen=True)
class _OpRule:
    forward: Callable[..., np.ndarray]
    # vjp(g, out, *input_values, **params) -> tuple of adjoints (None = no flow)
    vjp: Callable[..., tuple]
    check: Callable[..., None] | None = None


_RULES: dict[str, _OpRule] = {}


def _rule(kind: str, forward, vjp, check=None) -> None:
    _RULES[kind] = _OpRule(forward, vjp, check)


class Tape:
    """Append-only record of operations.  Single use: one ``backward`` call."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._swept = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = False) -> Variable:
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("leaf values must be finite")
        return self._push("leaf", (), {}, arr, requires_grad)

    def constant(self, value) -> Variable:
        # Internal constants may carry -inf (e.g. log-weights of dead particles).
        arr = np.asarray(value, dtype=np.float64)
        return self._push("const", (), {}, arr, False)

    def _push(self, kind, inputs, params, value, requires_grad) -> Variable:
        self.nodes.append(_Node(kind, inputs, params, value, requires_grad))
        return Variable(self, len(self.nodes) - 1)

    def backward(self, loss: Variable) -> dict[int, np.ndarray]:
        """Adjoints of ``loss`` for every ``requires_grad`` leaf, keyed by node id."""
        if loss.tape is not self:
            raise AutodiffError("loss belongs to a different tape")
        if loss.value.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._swept:
            raise AutodiffError("backward already called on this tape")
        self._swept = True

        adj: dict[int, np.ndarray] = {loss.id: np.ones(())}
        nodes = self.nodes
        for i in range(loss.id, -1, -1):
            node = nodes[i]
            if not node.inputs:
                continue
            g = adj.pop(i, None)
            if g is None or not node.requires_grad:
                continue
            ins = [nodes[j].value for j in node.inputs]
            grads = _RULES[node.kind].vjp(g, node.value, *ins, **node.params)
            for j, gj in zip(node.inputs, grads):
                if gj is None or not nodes[j].requires_grad:
                    continue
                gj = _unbroadcast(np.asarray(gj, dtype=np.float64), nodes[j].value.shape)
                adj[j] = adj[j] + gj if j in adj else gj

        return {
            i: np.array(adj[i]) if i in adj else np.zeros_like(node.value)
            for i, node in enumerate(nodes)
            if node.kind == "leaf" and node.requires_grad
        }

    def replay(self) -> list[np.ndarray]:
        """Recompute every primal from the leaves using the recorded op sequence."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if not node.inputs:
                values.append(node.value)
                continue
            ins = [values[j] for j in node.inputs]
            values.append(_RULES[node.kind].forward(*ins, **node.params))
        return values


class Variable:
    """Handle to one tape node.  Shape is fixed at creation."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, node_id: int) -> None:
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.id].requires_grad

    def __repr__(self) -> str:
        return f"Variable(id={self.id}, shape={self.shape}, value={self.value!r})"

    def __float__(self) -> float:
        return float(self.value)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def is_variable(x) -> bool:
    return isinstance(x, Variable)


def value_of(x) -> np.ndarray:
    """Primal value of a Variable, or the array itself."""
    if isinstance(x, Variable):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _apply(kind: str, *args, **params):
    rule = _RULES[kind]
    tape = None
    for a in args:
        if isinstance(a, Variable):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise AutodiffError("operands live on different tapes")
    vals = [value_of(a) for a in args]
    if rule.check is not None:
        rule.check(*vals, **params)
    with np.errstate(divide="ignore", over="ignore", under="ignore", invalid="ignore"):
        out = np.asarray(rule.forward(*vals, **params), dtype=np.float64)
    if tape is None:
        return out
    ids = []
    req = False
    for a in args:
        if isinstance(a, Variable):
            ids.append(a.id)
            req = req or a.requires_grad
        else:
            ids.append(tape.constant(a).id)
    if kind == "stop_gradient":
        req = False
    return tape._push(kind, tuple(ids), params, out, req)


# ---------------------------------------------------------------- checks


def _check_broadcast(*vals, **_):
    try:
        np.broadcast_shapes(*(v.shape for v in vals))
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {[v.shape for v in vals]}") from exc


def _check_div(a, b):
    _check_broadcast(a, b)
    if np.any(b == 0.0):
        raise DomainError("division by zero")


def _check_log(x):
    if np.any(x < 0.0) or np.any(np.isnan(x)):
        raise DomainError("log of negative value")


def _check_sqrt(x):
    if np.any(x < 0.0) or np.any(np.isnan(x)):
        raise DomainError("sqrt of negative value")


def _check_matvec(m, v):
    if m.ndim != 2 or v.ndim < 1:
        raise ShapeError(f"matvec needs matrix and vector, got {m.shape} and {v.shape}")
    if m.shape[1] != v.shape[-1]:
        raise ShapeError(f"matvec inner dimension mismatch: {m.shape} vs {v.shape}")


def _check_reduce(v, axis=None):
    if v.size == 0:
        raise ShapeError("reduction over empty input")


# ---------------------------------------------------------------- rules

_rule("add", lambda a, b: a + b, lambda g, o, a, b: (g, g), _check_broadcast)
_rule("sub", lambda a, b: a - b, lambda g, o, a, b: (g, -g), _check_broadcast)
_rule("mul", lambda a, b: a * b, lambda g, o, a, b: (g * b, g * a), _check_broadcast)
_rule("div", lambda a, b: a / b, lambda g, o, a, b: (g / b, -g * o / b), _check_div)
_rule("neg", lambda a: -a, lambda g, o, a: (-g,))
_rule("cos", np.cos, lambda g, o, a: (-g * np.sin(a),))
_rule("sin", np.sin, lambda g, o, a: (g * np.cos(a),))
_rule("exp", np.exp, lambda g, o, a: (g * o,))
_rule("log", np.log, lambda g, o, a: (g / a,), _check_log)
_rule("tanh", np.tanh, lambda g, o, a: (g * (1.0 - o * o),))
_rule("sigmoid", lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)), lambda g, o, a: (g * o * (1.0 - o),))
_rule("square", np.square, lambda g, o, a: (2.0 * g * a,))
_rule("sqrt", np.sqrt, lambda g, o, a: (0.5 * g / o,), _check_sqrt)
_rule("abs", np.abs, lambda g, o, a: (g * np.sign(a),))
_rule(
    "minimum",
    np.minimum,
    lambda g, o, a, b: (g * (a <= b), g * (a > b)),
    _check_broadcast,
)
_rule(
    "maximum",
    np.maximum,
    lambda g, o, a, b: (g * (a >= b), g * (a < b)),
    _check_broadcast,
)
_rule(
    "clamp",
    lambda a, lo, hi: np.clip(a, lo, hi),
    lambda g, o, a, lo, hi: (g * ((a >= lo) & (a <= hi)),),
)
_rule(
    "matvec",
    # elementwise product + last-axis sum keeps each batch row independent of
    # the batch size (BLAS kernels may block rows differently)
    lambda m, v: (m * v[..., None, :]).sum(axis=-1),
    lambda g, o, m, v: (
        (g[..., :, None] * v[..., None, :]).reshape(-1, *m.shape).sum(axis=0),
        (m * g[..., :, None]).sum(axis=-2),
    ),
    _check_matvec,
)


def _sum_vjp(g, o, v, axis=None):
    if axis is None:
        return (np.broadcast_to(g, v.shape),)
    return (np.broadcast_to(np.expand_dims(g, axis), v.shape),)


def _mean_vjp(g, o, v, axis=None):
    n = v.size if axis is None else v.shape[axis]
    return (_sum_vjp(g, o, v, axis)[0] / n,)


def _lse(v, axis=None):
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    return s.reshape(()) if axis is None else np.squeeze(s, axis=axis)


def _lse_vjp(g, o, v, axis=None):
    if axis is None:
        return (g * np.exp(v - o),)
    return (np.expand_dims(g, axis) * np.exp(v - np.expand_dims(o, axis)),)


_rule("sum", lambda v, axis=None: np.sum(v, axis=axis), _sum_vjp, _check_reduce)
_rule("mean", lambda v, axis=None: np.mean(v, axis=axis), _mean_vjp, _check_reduce)
_rule("logsumexp", _lse, _lse_vjp, _check_reduce)
_rule("stop_gradient", lambda a: np.array(a, copy=True), lambda g, o, a: (None,))


def _getitem_vjp(g, o, a, index):
    out = np.zeros_like(a)
    np.add.at(out, index, g)
    return (out,)


_rule("getitem", lambda a, index: a[index], _getitem_vjp)
_rule("reshape", lambda a, shape: a.reshape(shape), lambda g, o, a, shape: (g.reshape(a.shape),))


# ---------------------------------------------------------------- public ops


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


def neg(a):
    return _apply("neg", a)


def cos(a):
    return _apply("cos", a)


def sin(a):
    return _apply("sin", a)


def exp(a):
    return _apply("exp", a)


def log(a):
    return _apply("log", a)


def tanh(a):
    return _apply("tanh", a)


def sigmoid(a):
    return _apply("sigmoid", a)


def square(a):
    return _apply("square", a)


def sqrt(a):
    return _apply("sqrt", a)


def abs(a):  # noqa: A001 - mirrors numpy naming
    return _apply("abs", a)


def minimum(a, b):
    return _apply("minimum", a, b)


def maximum(a, b):
    return _apply("maximum", a, b)


def clamp(a, lo: float, hi: float):
    """Clip to ``[lo, hi]``; unit gradient inside (bounds included), zero outside."""
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: {lo} > {hi}")
    return _apply("clamp", a, lo=float(lo), hi=float(hi))


def matvec(m, v):
    """Matrix (r, c) times vector (..., c) -> (..., r)."""
    return _apply("matvec", m, v)


def sum(v, axis: int | None = None):  # noqa: A001
    return _apply("sum", v, axis=axis)


def mean(v, axis: int | None = None):
    return _apply("mean", v, axis=axis)


def logsumexp(v, axis: int | None = None):
    return _apply("logsumexp", v, axis=axis)


def stop_gradient(v):
    """Identity on values; no adjoint flows back through this edge."""
    return _apply("stop_gradient", v)


def getitem(v, index):
    return _apply("getitem", v, index=index)


def reshape(v, shape):
    return _apply("reshape", v, shape=tuple(shape))
