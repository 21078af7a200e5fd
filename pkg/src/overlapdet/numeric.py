"""Reverse-mode differentiation on a recording tape, and a central-difference oracle.

Nodes hold numpy arrays (0-d for scalars, small 1-d/2-d blocks for the decoder's
dense maps).  Every operation is recorded on the tape that owns its operands,
together with a vector-Jacobian product; :meth:`Tape.backward` walks the records
in reverse.  Operations whose operands are all constants are folded eagerly and
never recorded.

The module-level functions (:func:`sigmoid`, :func:`minimum`, ...) accept either
:class:`Value` nodes or plain numbers/arrays, so one formula can be evaluated on
the tape and, unchanged, inside :func:`finite_difference`.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Value",
    "Gradients",
    "TapeMismatchError",
    "detach",
    "sigmoid",
    "logit",
    "tanh",
    "exp",
    "log",
    "softplus",
    "absolute",
    "minimum",
    "maximum",
    "clamp_min",
    "clamp_max",
    "matmul",
    "dot",
    "concat",
    "total",
    "primitive",
    "finite_difference",
    "tape_gradient",
    "gradients_agree",
    "check_gradient",
    "value_of",
]


class TapeMismatchError(ValueError):
    """Raised when values recorded on different tapes are combined."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# Plain-array kernels.  The tape ops call these too, so tape values are
# bit-identical to ordinary evaluation.

def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _logit(x):
    return np.log(x / (1.0 - x))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class Value:
    """A node on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        kind = "var" if self.requires_grad else "const"
        return f"Value({kind} #{self.index}, {self.value!r})"

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return self.tape._apply(_ADD, (self, other))

    def __radd__(self, other):
        return self.tape._apply(_ADD, (other, self))

    def __sub__(self, other):
        return self.tape._apply(_SUB, (self, other))

    def __rsub__(self, other):
        return self.tape._apply(_SUB, (other, self))

    def __mul__(self, other):
        return self.tape._apply(_MUL, (self, other))

    def __rmul__(self, other):
        return self.tape._apply(_MUL, (other, self))

    def __truediv__(self, other):
        return self.tape._apply(_DIV, (self, other))

    def __rtruediv__(self, other):
        return self.tape._apply(_DIV, (other, self))

    def __neg__(self):
        return self.tape._apply(_NEG, (self,))

    def __matmul__(self, other):
        return self.tape._apply(_MATMUL, (self, other))

    def __rmatmul__(self, other):
        return self.tape._apply(_MATMUL, (other, self))

    def __getitem__(self, index):
        return self.tape._apply(_GETITEM, (self,), index)

    def sum(self):
        return self.tape._apply(_SUM, (self,))


class _Op:
    """Forward rule plus vector-Jacobian product.

    ``vjp(g, out, *inputs, extra)`` returns one gradient per input, already
    reduced to that input's shape.
    """

    __slots__ = ("name", "forward", "vjp")

    def __init__(self, name: str, forward: Callable, vjp: Callable):
        self.name = name
        self.forward = forward
        self.vjp = vjp


def _div_forward(a, b, extra):
    if np.any(b == 0.0):
        raise ZeroDivisionError("division by zero on tape")
    return a / b


def _getitem_vjp(g, out, a, index):
    full = np.zeros_like(a)
    np.add.at(full, index, g)
    return (full,)


def _concat_forward(*args):
    *parts, axis = args
    return np.concatenate(parts, axis=axis)


def _concat_vjp(g, out, *args):
    *parts, axis = args
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _matmul_vjp(g, out, a, b, extra):
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _clamp_vjp_min(g, out, a, bound):
    return (g * (a >= bound),)


def _clamp_vjp_max(g, out, a, bound):
    return (g * (a <= bound),)


_ADD = _Op("add", lambda a, b, e: a + b,
           lambda g, o, a, b, e: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_SUB = _Op("sub", lambda a, b, e: a - b,
           lambda g, o, a, b, e: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_MUL = _Op("mul", lambda a, b, e: a * b,
           lambda g, o, a, b, e: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))
_DIV = _Op("div", _div_forward,
           lambda g, o, a, b, e: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * o / b, b.shape)))
_NEG = _Op("neg", lambda a, e: -a, lambda g, o, a, e: (-g,))
_SIGMOID = _Op("sigmoid", lambda a, e: _sigmoid(a), lambda g, o, a, e: (g * o * (1.0 - o),))
_LOGIT = _Op("logit", lambda a, e: _logit(a), lambda g, o, a, e: (g / (a * (1.0 - a)),))
_TANH = _Op("tanh", lambda a, e: np.tanh(a), lambda g, o, a, e: (g * (1.0 - o * o),))
_EXP = _Op("exp", lambda a, e: np.exp(a), lambda g, o, a, e: (g * o,))
_LOG = _Op("log", lambda a, e: np.log(a), lambda g, o, a, e: (g / a,))
_SOFTPLUS = _Op("softplus", lambda a, e: _softplus(a), lambda g, o, a, e: (g * _sigmoid(a),))
_ABS = _Op("abs", lambda a, e: np.abs(a), lambda g, o, a, e: (g * np.sign(a),))
# Ties send the whole gradient to the first operand.
_MINIMUM = _Op("minimum", lambda a, b, e: np.minimum(a, b),
               lambda g, o, a, b, e: (_unbroadcast(g * (a <= b), a.shape),
                                      _unbroadcast(g * (a > b), b.shape)))
_MAXIMUM = _Op("maximum", lambda a, b, e: np.maximum(a, b),
               lambda g, o, a, b, e: (_unbroadcast(g * (a >= b), a.shape),
                                      _unbroadcast(g * (a < b), b.shape)))
_CLAMP_MIN = _Op("clamp_min", lambda a, e: np.maximum(a, e), _clamp_vjp_min)
_CLAMP_MAX = _Op("clamp_max", lambda a, e: np.minimum(a, e), _clamp_vjp_max)
_MATMUL = _Op("matmul", lambda a, b, e: a @ b, _matmul_vjp)
_GETITEM = _Op("getitem", lambda a, e: a[e], _getitem_vjp)
_SUM = _Op("sum", lambda a, e: np.sum(a), lambda g, o, a, e: (np.broadcast_to(g, a.shape).copy(),))
_CONCAT = _Op("concat", _concat_forward, _concat_vjp)


class Gradients(Mapping):
    """Gradient map returned by :meth:`Tape.backward`.

    Indexing with a node the loss does not reach gives zeros of its shape.
    """

    def __init__(self, tape: "Tape", grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, node: Value) -> np.ndarray:
        if node.tape is not self._tape:
            raise TapeMismatchError("node belongs to a different tape")
        g = self._grads.get(node.index)
        if g is None:
            return np.zeros_like(node.value)
        return g

    def __iter__(self):
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Ordered record of operations; one per thread of execution.

    >>> tape = Tape()
    >>> x = tape.variable(3.0)
    >>> y = tape.variable(4.0)
    >>> grads = tape.backward(x * y)
    >>> float(grads[x])
    4.0
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._leaf: list[bool] = []
        # (op, parent indices, output index, extra)
        self._records: list[tuple] = []

    def __len__(self) -> int:
        return len(self._values)

    @property
    def records(self) -> list[tuple]:
        return list(self._records)

    def _new(self, value: np.ndarray, requires_grad: bool, leaf: bool) -> Value:
        index = len(self._values)
        self._values.append(value)
        self._leaf.append(leaf and requires_grad)
        return Value(value, self, index, requires_grad)

    def variable(self, value) -> Value:
        """A differentiable leaf."""
        arr = _as_array(value).copy()
        if not np.all(np.isfinite(arr)):
            raise ValueError("tape values must be finite")
        return self._new(arr, True, True)

    def constant(self, value) -> Value:
        arr = _as_array(value)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tape values must be finite")
        return self._new(arr, False, False)

    def _lift(self, x) -> Value:
        if isinstance(x, Value):
            if x.tape is not self:
                raise TapeMismatchError("cannot combine values from different tapes")
            return x
        return self._new(_as_array(x), False, False)

    def _apply(self, op: _Op, args: tuple, extra=None) -> Value:
        nodes = [self._lift(a) for a in args]
        value = op.forward(*(n.value for n in nodes), extra)
        if not any(n.requires_grad for n in nodes):
            return self._new(np.asarray(value, dtype=np.float64), False, False)
        out = self._new(np.asarray(value, dtype=np.float64), True, False)
        self._records.append((op, tuple(n.index for n in nodes), out.index, extra))
        return out

    def detach(self, v: Value) -> Value:
        """Same value, recorded as a constant: no gradient flows through it."""
        if v.tape is not self:
            raise TapeMismatchError("node belongs to a different tape")
        return self._new(v.value, False, False)

    def backward(self, loss: Value, values: Sequence[np.ndarray] | None = None) -> Gradients:
        """Reverse accumulation from a scalar ``loss``.

        ``values`` optionally replaces the recorded node values (see :meth:`replay`).
        """
        if loss.tape is not self:
            raise TapeMismatchError("loss belongs to a different tape")
        vals = self._values if values is None else values
        if np.size(vals[loss.index]) != 1:
            raise ValueError("backward needs a scalar loss")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(vals[loss.index])}
        for op, parents, out, extra in reversed(self._records):
            if out > loss.index:
                continue
            g = grads.get(out)
            if g is None:
                continue
            parts = op.vjp(g, vals[out], *(vals[p] for p in parents), extra)
            for p, gp in zip(parents, parts):
                if p in grads:
                    grads[p] = grads[p] + gp
                else:
                    grads[p] = gp
        return Gradients(self, grads)

    def replay(self, updates: Mapping[Value, object]) -> list[np.ndarray]:
        """Re-run every record with some leaf values replaced.

        Returns the full value table; recorded node values are left untouched.
        """
        vals = list(self._values)
        for node, new in updates.items():
            if node.tape is not self:
                raise TapeMismatchError("node belongs to a different tape")
            if not self._leaf[node.index]:
                raise ValueError("only variables can be replaced")
            vals[node.index] = _as_array(new)
        for op, parents, out, extra in self._records:
            vals[out] = np.asarray(op.forward(*(vals[p] for p in parents), extra),
                                   dtype=np.float64)
        return vals


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Value):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeMismatchError("cannot combine values from different tapes")
    return tape


def _unary(op: _Op, plain: Callable):
    def fn(x):
        if isinstance(x, Value):
            return x.tape._apply(op, (x,))
        return plain(_as_array(x))
    fn.__name__ = op.name
    return fn


sigmoid = _unary(_SIGMOID, _sigmoid)
sigmoid.__doc__ = "Logistic function 1/(1+e^-x)."
logit = _unary(_LOGIT, _logit)
logit.__doc__ = "Inverse sigmoid ln(x/(1-x)); no clamping."
tanh = _unary(_TANH, np.tanh)
exp = _unary(_EXP, np.exp)
log = _unary(_LOG, np.log)
softplus = _unary(_SOFTPLUS, _softplus)
softplus.__doc__ = "Numerically stable log(1+e^x)."
absolute = _unary(_ABS, np.abs)


def minimum(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.minimum(_as_array(a), _as_array(b))
    return tape._apply(_MINIMUM, (a, b))


def maximum(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.maximum(_as_array(a), _as_array(b))
    return tape._apply(_MAXIMUM, (a, b))


def clamp_min(x, bound: float):
    if isinstance(x, Value):
        return x.tape._apply(_CLAMP_MIN, (x,), float(bound))
    return np.maximum(_as_array(x), bound)


def clamp_max(x, bound: float):
    if isinstance(x, Value):
        return x.tape._apply(_CLAMP_MAX, (x,), float(bound))
    return np.minimum(_as_array(x), bound)


def matmul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return _as_array(a) @ _as_array(b)
    return tape._apply(_MATMUL, (a, b))


def dot(a, b):
    return matmul(a, b)


def concat(parts: Sequence, axis: int = -1):
    tape = _tape_of(*parts)
    if tape is None:
        return np.concatenate([_as_array(p) for p in parts], axis=axis)
    return tape._apply(_CONCAT, tuple(parts), axis)


def primitive(name: str, forward: Callable, vjp: Callable) -> Callable:
    """Wrap a fused numpy kernel as one tape operation.

    ``forward(*arrays)`` returns the output; ``vjp(g, out, *arrays)`` returns
    one gradient per input at the broadcast shape (reduced here).  The result
    accepts tape values or plain arrays, like the built-in functions.
    """
    def fwd(*args):
        *arrays, _ = args
        return forward(*arrays)

    def back(g, out, *args):
        *arrays, _ = args
        return tuple(_unbroadcast(np.asarray(gi, dtype=np.float64), a.shape)
                     for gi, a in zip(vjp(g, out, *arrays), arrays))

    op = _Op(name, fwd, back)

    def fn(*args):
        tape = _tape_of(*args)
        if tape is None:
            return np.asarray(forward(*(_as_array(a) for a in args)), dtype=np.float64)
        return tape._apply(op, args)
    fn.__name__ = name
    return fn


def total(x):
    """Sum of all entries."""
    if isinstance(x, Value):
        return x.sum()
    return np.sum(_as_array(x))


def detach(v):
    """Block gradient flow through ``v`` while keeping its value."""
    if isinstance(v, Value):
        return v.tape.detach(v)
    return _as_array(v).copy()


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Value) else _as_array(x)


def finite_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient ``(f(x+h e_i) - f(x-h e_i)) / 2h`` of a scalar function."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = _as_array(x)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = h
        step = step.reshape(x.shape)
        fp = float(f(x + step))
        fm = float(f(x - step))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ArithmeticError(f"non-finite evaluation at coordinate {i}")
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def tape_gradient(f: Callable, x) -> np.ndarray:
    """Gradient of ``f`` at ``x`` by a single backward pass on a fresh tape."""
    tape = Tape()
    xv = tape.variable(x)
    out = f(xv)
    if not isinstance(out, Value):
        return np.zeros_like(xv.value)
    return tape.backward(out)[xv]


def gradients_agree(a, b, atol: float = 1e-6, rtol: float = 1e-4) -> bool:
    """Per-entry ``|a-b| <= max(atol, rtol*max(|a|,|b|))``."""
    a = _as_array(a)
    b = _as_array(b)
    bound = np.maximum(atol, rtol * np.maximum(np.abs(a), np.abs(b)))
    return bool(np.all(np.abs(a - b) <= bound))


def check_gradient(f: Callable, x, h: float = 1e-5, atol: float = 1e-6,
                   rtol: float = 1e-4) -> tuple[bool, np.ndarray, np.ndarray]:
    """Compare tape and finite-difference gradients of one polymorphic ``f``."""
    analytic = tape_gradient(f, x)
    numeric = finite_difference(lambda z: value_of(f(z)), x, h)
    return gradients_agree(analytic, numeric, atol, rtol), analytic, numeric

