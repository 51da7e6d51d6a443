"""Tensor autodiff with reverse-mode gradients and taped forward-mode tangents.

Every operation records a node on the active :class:`Tape` (if any).  When an
input carries a forward-mode tangent, the output tangent is built from the
same taped primitives, so a directional derivative is itself a differentiable
expression.  That is what lets a loss defined on the input-Jacobian of a
network be minimized with respect to the network parameters
(forward-over-reverse).

Only one level of tangents is supported: the tangent of a tangent is never
formed.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "as_var",
    "custom",
    "backward",
    "seed",
    "jvp",
    "jacobian",
    "value_and_jacobian",
    "exp",
    "log",
    "sin",
    "cos",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "square",
    "clip",
    "matmul",
    "vsum",
    "mean",
    "reshape",
    "swapaxes",
    "concat",
    "stack",
]

_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Append-only record of operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded.  Outside any tape, operations only compute values.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def variable(self, value) -> "Var":
        """Register a leaf (e.g. a parameter tensor)."""
        value = np.asarray(value, dtype=np.float64)
        var = Var(value, self, len(self.nodes))
        self.nodes.append(((), None))
        return var

    def checkpoint(self) -> int:
        return len(self.nodes)

    def rewind(self, mark: int) -> None:
        """Drop every node recorded after ``mark``."""
        if not 0 <= mark <= len(self.nodes):
            raise ValueError(f"invalid checkpoint {mark}")
        del self.nodes[mark:]


class Var:
    """A float64 tensor tracked by a tape, with an optional taped tangent."""

    __slots__ = ("value", "tangent", "tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, tape=None, index=None, tangent=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.tangent = tangent

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var({self.value!r}, tangent={'yes' if self.tangent is not None else 'no'})"

    def primal(self) -> "Var":
        """Same tape node, tangent stripped."""
        if self.tangent is None:
            return self
        return Var(self.value, self.tape, self.index)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def _record(value, inputs, vjp) -> Var:
    """Create the output Var; record a node if any input lives on the active tape."""
    tape = _active_tape()
    if tape is None:
        return Var(value)
    slots = []
    for pos, v in enumerate(inputs):
        if v.tape is tape and v.index is not None:
            slots.append((pos, v.index))
    if not slots:
        return Var(value)
    out = Var(value, tape, len(tape.nodes))
    tape.nodes.append((tuple(slots), vjp))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


def _set_tangent(out: Var, tangent):
    if tangent is not None:
        if tangent.shape != out.shape:
            # an input broadcast by the op: its tangent must cover the output too
            tangent = add(tangent, np.zeros(out.shape))
        out.tangent = tangent
    return out


def custom(value, inputs, vjp) -> Var:
    """Record an op with a hand-written vector-Jacobian product.

    ``vjp(g)`` returns one gradient per input.  Custom ops carry no
    forward-mode tangent.
    """
    inputs = tuple(as_var(v) for v in inputs)
    return _record(np.asarray(value, dtype=np.float64), inputs, vjp)


# --- arithmetic -------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    out = _record(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    return _set_tangent(out, _tadd(a.tangent, b.tangent))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    out = _record(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    tb = None if b.tangent is None else neg(b.tangent)
    return _set_tangent(out, _tadd(a.tangent, tb))


def neg(a) -> Var:
    a = as_var(a)
    out = _record(-a.value, (a,), lambda g: (-g,))
    return _set_tangent(out, None if a.tangent is None else neg(a.tangent))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = _record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))
    t = None
    if a.tangent is not None:
        t = mul(a.tangent, b.primal())
    if b.tangent is not None:
        t = _tadd(t, mul(a.primal(), b.tangent))
    return _set_tangent(out, t)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    q = av / bv
    out = _record(q, (a, b),
                  lambda g: (_unbroadcast(g / bv, av.shape),
                             _unbroadcast(-g * q / bv, bv.shape)))
    t = None
    if a.tangent is not None:
        t = div(a.tangent, b.primal())
    if b.tangent is not None:
        t = _tadd(t, neg(div(mul(out.primal(), b.tangent), b.primal())))
    return _set_tangent(out, t)


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    out = _record(av * av, (a,), lambda g: (2.0 * g * av,))
    if a.tangent is not None:
        out.tangent = mul(mul(2.0, a.primal()), a.tangent)
    return out


# --- elementwise functions ----------------------------------------------------


def exp(a) -> Var:
    a = as_var(a)
    e = np.exp(a.value)
    out = _record(e, (a,), lambda g: (g * e,))
    if a.tangent is not None:
        out.tangent = mul(out.primal(), a.tangent)
    return out


def log(a) -> Var:
    a = as_var(a)
    av = a.value
    out = _record(np.log(av), (a,), lambda g: (g / av,))
    if a.tangent is not None:
        out.tangent = div(a.tangent, a.primal())
    return out


def sin(a) -> Var:
    a = as_var(a)
    av = a.value
    out = _record(np.sin(av), (a,), lambda g: (g * np.cos(av),))
    if a.tangent is not None:
        out.tangent = mul(cos(a.primal()), a.tangent)
    return out


def cos(a) -> Var:
    a = as_var(a)
    av = a.value
    out = _record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))
    if a.tangent is not None:
        out.tangent = neg(mul(sin(a.primal()), a.tangent))
    return out


def tanh(a) -> Var:
    a = as_var(a)
    th = np.tanh(a.value)
    out = _record(th, (a,), lambda g: (g * (1.0 - th * th),))
    if a.tangent is not None:
        out.tangent = mul(sub(1.0, square(out.primal())), a.tangent)
    return out


def _np_sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    a = as_var(a)
    sg = _np_sigmoid(np.atleast_1d(a.value)).reshape(a.value.shape)
    out = _record(sg, (a,), lambda g: (g * sg * (1.0 - sg),))
    if a.tangent is not None:
        p = out.primal()
        out.tangent = mul(mul(p, sub(1.0, p)), a.tangent)
    return out


def softplus(a) -> Var:
    a = as_var(a)
    av = a.value
    sg = _np_sigmoid(np.atleast_1d(av)).reshape(av.shape)
    out = _record(np.logaddexp(0.0, av), (a,), lambda g: (g * sg,))
    if a.tangent is not None:
        out.tangent = mul(sigmoid(a.primal()), a.tangent)
    return out


def relu(a) -> Var:
    """max(0, x); the subgradient at 0 is 0."""
    a = as_var(a)
    mask = (a.value > 0).astype(np.float64)
    out = _record(a.value * mask, (a,), lambda g: (g * mask,))
    if a.tangent is not None:
        out.tangent = mul(mask, a.tangent)
    return out


def clip(a, lo: float, hi: float) -> Var:
    a = as_var(a)
    mask = ((a.value > lo) & (a.value < hi)).astype(np.float64)
    out = _record(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))
    if a.tangent is not None:
        out.tangent = mul(mask, a.tangent)
    return out


# --- linear algebra and reductions -------------------------------------------


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul operands must be at least 1-D")
    # vectors are promoted as in numpy and the added axis is dropped afterwards
    if a.ndim == 1:
        out = matmul(reshape(a, (1,) + a.shape), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, b.shape + (1,)))
        return reshape(out, out.shape[:-1])
    av, bv = a.value, b.value

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    out = _record(av @ bv, (a, b), vjp)
    t = None
    if a.tangent is not None:
        t = matmul(a.tangent, b.primal())
    if b.tangent is not None:
        t = _tadd(t, matmul(a.primal(), b.tangent))
    return _set_tangent(out, t)


def vsum(a, axis=None) -> Var:
    a = as_var(a)
    shape = a.value.shape
    if axis is None:
        axes = tuple(range(len(shape)))
    elif isinstance(axis, int):
        axes = (axis % len(shape),)
    else:
        axes = tuple(ax % len(shape) for ax in axis)
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, keep), shape).copy(),)

    out = _record(a.value.sum(axis=axes), (a,), vjp)
    if a.tangent is not None:
        out.tangent = vsum(a.tangent, axes)
    return out


def mean(a, axis=None) -> Var:
    a = as_var(a)
    total = vsum(a, axis)
    count = a.value.size // max(total.value.size, 1)
    return mul(total, 1.0 / count)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.value.shape
    out = _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))
    if a.tangent is not None:
        out.tangent = reshape(a.tangent, shape)
    return out


def swapaxes(a, ax1: int, ax2: int) -> Var:
    a = as_var(a)
    out = _record(np.swapaxes(a.value, ax1, ax2), (a,),
                  lambda g: (np.swapaxes(g, ax1, ax2),))
    if a.tangent is not None:
        out.tangent = swapaxes(a.tangent, ax1, ax2)
    return out


def getitem(a, key) -> Var:
    a = as_var(a)
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    out = _record(a.value[key], (a,), vjp)
    if a.tangent is not None:
        out.tangent = getitem(a.tangent, key)
    return out


def concat(items, axis: int = -1) -> Var:
    items = [as_var(v) for v in items]
    sizes = [v.value.shape[axis] for v in items]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    out = _record(np.concatenate([v.value for v in items], axis=axis), tuple(items), vjp)
    if any(v.tangent is not None for v in items):
        out.tangent = concat(
            [v.tangent if v.tangent is not None else Var(np.zeros_like(v.value)) for v in items],
            axis=axis)
    return out


def stack(items, axis: int = 0) -> Var:
    items = [as_var(v) for v in items]
    n = len(items)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    out = _record(np.stack([v.value for v in items], axis=axis), tuple(items), vjp)
    if any(v.tangent is not None for v in items):
        out.tangent = stack(
            [v.tangent if v.tangent is not None else Var(np.zeros_like(v.value)) for v in items],
            axis=axis)
    return out


# --- differentiation drivers ---------------------------------------------------


def backward(tape: Tape, output: Var, wrt) -> list:
    """Gradients of a scalar ``output`` with respect to each Var in ``wrt``.

    The tape is not modified, so repeated calls give identical results.
    """
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
    if not np.isfinite(output.value).all():
        raise FloatingPointError("non-finite output")
    wrt = list(wrt)
    if output.tape is not tape or output.index is None:
        return [np.zeros_like(w.value) for w in wrt]
    adj = [None] * (output.index + 1)
    adj[output.index] = np.ones_like(output.value)
    nodes = tape.nodes
    for i in range(output.index, -1, -1):
        g = adj[i]
        if g is None:
            continue
        slots, vjp = nodes[i]
        if vjp is None:
            continue
        grads = vjp(g)
        for pos, pidx in slots:
            pg = grads[pos]
            if adj[pidx] is None:
                adj[pidx] = pg
            else:
                adj[pidx] = adj[pidx] + pg
    result = []
    for w in wrt:
        if w.tape is not tape or w.index is None or w.index > output.index or adj[w.index] is None:
            result.append(np.zeros_like(w.value))
            continue
        g = np.asarray(adj[w.index], dtype=np.float64).reshape(w.value.shape)
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient")
        result.append(g)
    return result


def seed(s, v) -> Var:
    """Identity on ``s`` that attaches forward-mode tangent ``v``."""
    s = as_var(s)
    v = as_var(v)
    if s.tangent is not None:
        raise ValueError("nested tangents are not supported")
    if v.value.shape != s.value.shape:
        raise ValueError(f"direction shape {v.value.shape} != state shape {s.value.shape}")
    out = _record(s.value, (s,), lambda g: (g,))
    out.tangent = v.primal()
    return out


def jvp(f, s, v) -> Var:
    """(df/ds) v from one forward pass; the result stays on the tape."""
    y = f(seed(s, v))
    if y.tangent is None:
        return Var(np.zeros_like(y.value))
    return y.tangent


def value_and_jacobian(f, s):
    """f(s) and its Jacobian, with a leading batch shape allowed on ``s``.

    Column ``i`` is exactly ``jvp(f, s, e_i)``; the Jacobian has shape
    ``s.shape + (n,)`` and index ``[..., row, col]``.
    """
    s = as_var(s)
    n = s.value.shape[-1]
    cols = []
    value = None
    for i in range(n):
        e = np.zeros(s.value.shape)
        e[..., i] = 1.0
        y = f(seed(s, e))
        if y.value.shape[-1] != n:
            raise ValueError(f"jacobian needs a square map, got {n} -> {y.value.shape[-1]}")
        if value is None:
            value = Var(y.value, y.tape, y.index)
        cols.append(y.tangent if y.tangent is not None else Var(np.zeros_like(y.value)))
    return value, stack(cols, axis=-1)


def jacobian(f, s) -> Var:
    return value_and_jacobian(f, s)[1]
