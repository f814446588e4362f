"""Reverse-mode automatic differentiation on an append-only tape.

Every node is a scalar function of its parents applied elementwise, so a
node may carry a numpy array holding one value per batch element; a plain
0-d value is the scalar case. A handful of structural operations (sum,
matmul, indexing, concatenation, cumsum, gather) are included so that
batched flows can be taped without Python-level loops over samples.

All functions here accept plain numbers/arrays as well as :class:`Var`;
with no ``Var`` among the arguments they reduce to the numpy call, which
lets the same model code run taped (training) or untaped (evaluation).
"""

from __future__ import annotations

import numbers
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class DomainError(ValueError):
    """Raised when a primitive is applied outside its domain."""


class Tape:
    """Append-only record of taped operations.

    Node ``i`` stores its kind, parent indices, a forward function used by
    :meth:`replay` and a vector-Jacobian product used by :func:`backward`.
    Parents always precede children.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self._fns: list[Callable | None] = []
        self._vjps: list[Callable | None] = []

    def __len__(self):
        return len(self.values)

    def var(self, value) -> "Var":
        """Register a leaf (an independent variable)."""
        value = np.array(value, dtype=float)
        return self._push("leaf", value, (), None, None)

    def _push(self, kind, value, parents, fn, vjp) -> "Var":
        index = len(self.values)
        self.kinds.append(kind)
        self.parents.append(parents)
        self.values.append(value)
        self._fns.append(fn)
        self._vjps.append(vjp)
        return Var(value, self, index)

    def is_leaf(self, index: int) -> bool:
        return self.kinds[index] == "leaf"

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns the new values."""
        out: list[np.ndarray] = []
        for kind, parents, fn, value in zip(self.kinds, self.parents, self._fns, self.values):
            if kind == "leaf":
                out.append(value)
            else:
                out.append(fn(*(out[p] for p in parents)))
        return out


class Var:
    """A value living on a tape (or a constant when ``tape`` is None)."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # numpy must defer to the reflected operators

    def __init__(self, value, tape: Tape | None = None, index: int | None = None):
        self.value = value
        self.tape = tape
        self.index = index

    @classmethod
    def constant(cls, value) -> "Var":
        return cls(np.asarray(value, dtype=float))

    @property
    def is_constant(self) -> bool:
        return self.tape is None

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def size(self):
        return np.size(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        where = "const" if self.tape is None else f"node {self.index}"
        return f"Var({self.value!r}, {where})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return pow_const(self, c)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def is_var(x) -> bool:
    return isinstance(x, Var) and x.tape is not None


def value(x):
    """The numeric value of ``x`` whether or not it is taped."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if is_var(x):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _first_offender(mask, xv):
    bad = np.asarray(xv)[np.asarray(mask)] if np.ndim(xv) else xv
    return np.ravel(bad)[0] if np.ndim(bad) else bad


# --------------------------------------------------------------------------
# elementwise primitives


def _unary(kind, x, fn, dfn):
    if not is_var(x):
        return fn(value(x))
    xv = x.value
    out = fn(xv)

    def vjp(g, out, xv):
        return (dfn(g, out, xv),)

    return x.tape._push(kind, out, (x.index,), fn, vjp)


def _binary(kind, a, b, fn, da, db):
    """Record ``fn(a, b)``; ``da``/``db`` map (g, out, av, bv) to partial grads."""
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    if tape is None:
        return fn(av, bv)
    out = fn(av, bv)
    if is_var(a) and is_var(b):
        sa, sb = np.shape(av), np.shape(bv)

        def vjp(g, out, av, bv):
            return (_unbroadcast(da(g, out, av, bv), sa), _unbroadcast(db(g, out, av, bv), sb))

        return tape._push(kind, out, (a.index, b.index), fn, vjp)
    if is_var(a):
        sa = np.shape(av)

        def fa(x):
            return fn(x, bv)

        def vjp(g, out, x):
            return (_unbroadcast(da(g, out, x, bv), sa),)

        return tape._push(kind, out, (a.index,), fa, vjp)
    sb = np.shape(bv)

    def fb(y):
        return fn(av, y)

    def vjpb(g, out, y):
        return (_unbroadcast(db(g, out, av, y), sb),)

    return tape._push(kind, out, (b.index,), fb, vjpb)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, o, x, y: g, lambda g, o, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, o, x, y: g, lambda g, o, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda g, o, x, y: g * y, lambda g, o, x, y: g * x)


def div(a, b):
    if is_var(a) or is_var(b):
        bv = value(b)
        if np.any(np.asarray(bv) == 0):
            raise DomainError(f"div: zero denominator ({_first_offender(np.asarray(bv) == 0, bv)})")
    return _binary(
        "div", a, b, np.divide,
        lambda g, o, x, y: g / y,
        lambda g, o, x, y: -g * o / y,
    )


def neg(x):
    return _unary("neg", x, np.negative, lambda g, o, x: -g)


def sin(x):
    return _unary("sin", x, np.sin, lambda g, o, x: g * np.cos(x))


def cos(x):
    return _unary("cos", x, np.cos, lambda g, o, x: -g * np.sin(x))


def tan(x):
    return _unary("tan", x, np.tan, lambda g, o, x: g * (1.0 + o * o))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, o, x: g * (1.0 - o * o))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, o, x: g * o)


def log(x):
    if is_var(x):
        bad = ~(np.asarray(x.value) > 0)
        if np.any(bad):
            raise DomainError(f"log: argument must be > 0, got {_first_offender(bad, x.value)}")
    return _unary("log", x, np.log, lambda g, o, x: g / x)


def log1p(x):
    if is_var(x):
        bad = ~(np.asarray(x.value) > -1)
        if np.any(bad):
            raise DomainError(f"log1p: argument must be > -1, got {_first_offender(bad, x.value)}")
    return _unary("log1p", x, np.log1p, lambda g, o, x: g / (1.0 + x))


def sqrt(x):
    if is_var(x):
        bad = ~(np.asarray(x.value) > 0)
        if np.any(bad):
            raise DomainError(f"sqrt: argument must be > 0, got {_first_offender(bad, x.value)}")
    return _unary("sqrt", x, np.sqrt, lambda g, o, x: g * 0.5 / o)


def abs_(x):
    # subgradient 0 at 0 (np.sign(0) == 0)
    return _unary("abs", x, np.abs, lambda g, o, x: g * np.sign(x))


def pow_const(x, c):
    """``x ** c`` for a constant exponent ``c``."""
    if is_var(c):
        raise TypeError("pow_const: exponent must be a constant")
    c = float(value(c))
    if is_var(x) and not c.is_integer():
        bad = np.asarray(x.value) < 0
        if np.any(bad):
            raise DomainError(f"pow_const: negative base {_first_offender(bad, x.value)} "
                              f"with non-integer exponent {c}")

    def fn(v):
        return np.power(v, c)

    return _unary("pow_const", x, fn, lambda g, o, x: g * c * np.power(x, c - 1.0))


def atan2(y, x):
    def dy(g, o, yv, xv):
        return g * xv / (xv * xv + yv * yv)

    def dx(g, o, yv, xv):
        return -g * yv / (xv * xv + yv * yv)

    return _binary("atan2", y, x, np.arctan2, dy, dx)


def minimum(a, b):
    # ties route the gradient to the first argument
    return _binary(
        "min", a, b, np.minimum,
        lambda g, o, x, y: g * (x <= y),
        lambda g, o, x, y: g * (x > y),
    )


def maximum(a, b):
    return _binary(
        "max", a, b, np.maximum,
        lambda g, o, x, y: g * (x >= y),
        lambda g, o, x, y: g * (x < y),
    )


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def where(cond, a, b):
    """Select ``a`` where the constant mask ``cond`` holds, else ``b``."""
    cond = np.asarray(value(cond), dtype=bool)
    return _binary(
        "where", a, b, lambda x, y: np.where(cond, x, y),
        lambda g, o, x, y: np.where(cond, g, 0.0),
        lambda g, o, x, y: np.where(cond, 0.0, g),
    )


def stop_gradient(x):
    return value(x)


# --------------------------------------------------------------------------
# structural primitives


def sum_(x, axis=None, keepdims=False):
    if not is_var(x):
        return np.sum(value(x), axis=axis, keepdims=keepdims)
    shape = x.shape

    def fn(v):
        return np.sum(v, axis=axis, keepdims=keepdims)

    def vjp(g, o, xv):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return x.tape._push("sum", fn(x.value), (x.index,), fn, vjp)


def mean(x, axis=None, keepdims=False):
    n = np.size(value(x)) if axis is None else np.shape(value(x))[axis]
    return sum_(x, axis=axis, keepdims=keepdims) / n


def matmul(a, b):
    def da(g, o, x, y):
        if np.ndim(x) == 1 and np.ndim(y) == 1:
            return g * y
        if np.ndim(y) == 1:
            return np.asarray(g)[..., None] * y
        if np.ndim(x) == 1:
            return (y @ np.asarray(g)[..., None])[..., 0]
        return g @ np.swapaxes(y, -1, -2)

    def db(g, o, x, y):
        if np.ndim(x) == 1 and np.ndim(y) == 1:
            return g * x
        if np.ndim(x) == 1:
            return x[:, None] * np.asarray(g)[..., None, :]
        if np.ndim(y) == 1:
            return (np.swapaxes(x, -1, -2) @ np.asarray(g)[..., None])[..., 0]
        return np.swapaxes(x, -1, -2) @ g

    return _binary("matmul", a, b, np.matmul, da, db)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, numbers.Integral, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx):
    if not is_var(x):
        return value(x)[idx]
    shape = x.shape
    basic = _is_basic_index(idx)

    def fn(v):
        return v[idx]

    def vjp(g, o, xv):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return x.tape._push("getitem", x.value[idx], (x.index,), fn, vjp)


def reshape(x, shape):
    if not is_var(x):
        return np.reshape(value(x), shape)
    old = x.shape

    def fn(v):
        return np.reshape(v, shape)

    return x.tape._push("reshape", fn(x.value), (x.index,), fn,
                        lambda g, o, xv: (np.reshape(g, old),))


def swapaxes(x, a1, a2):
    def fn(v):
        return np.swapaxes(v, a1, a2)

    return _unary("swapaxes", x, fn, lambda g, o, x: np.swapaxes(g, a1, a2))


def expand_dims(x, axis):
    shape = np.shape(value(x))
    return reshape(x, np.expand_dims(np.empty(shape, dtype=bool), axis).shape)


def concatenate(xs: Sequence, axis=0):
    tape = _tape_of(*xs)
    vals = [value(x) for x in xs]
    if tape is None:
        return np.concatenate(vals, axis=axis)
    var_pos = [i for i, x in enumerate(xs) if is_var(x)]
    sizes = [np.shape(v)[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    consts = {i: vals[i] for i in range(len(xs)) if i not in var_pos}

    def fn(*vs):
        it = iter(vs)
        full = [next(it) if i in var_pos else consts[i] for i in range(len(xs))]
        return np.concatenate(full, axis=axis)

    def vjp(g, o, *vs):
        grads = []
        for i in var_pos:
            sl = [slice(None)] * np.ndim(g)
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return tape._push("concatenate", np.concatenate(vals, axis=axis),
                      tuple(xs[i].index for i in var_pos), fn, vjp)


def stack(xs: Sequence, axis=0):
    return concatenate([expand_dims(x, axis) for x in xs], axis=axis)


def cumsum(x, axis=-1):
    def fn(v):
        return np.cumsum(v, axis=axis)

    def vjp_fn(g, o, xv):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _unary("cumsum", x, fn, vjp_fn)


def take_along_axis(x, indices, axis=-1):
    """Gather with a constant integer index array (as ``np.take_along_axis``)."""
    indices = np.asarray(value(indices))
    if not is_var(x):
        return np.take_along_axis(value(x), indices, axis=axis)
    shape = x.shape

    def fn(v):
        return np.take_along_axis(v, indices, axis=axis)

    def vjp(g, o, xv):
        full = np.zeros(shape)
        # put_along_axis does not accumulate duplicates; scatter explicitly
        ax = axis % len(shape)
        idx = list(np.indices(indices.shape, sparse=True))
        idx[ax] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)

    return x.tape._push("take_along_axis", fn(x.value), (x.index,), fn, vjp)


def logdet_spd(a):
    """log det of a batch of symmetric positive-definite matrices (last two axes)."""

    def fn(v):
        sign, ld = np.linalg.slogdet(v)
        if np.any(sign <= 0):
            raise DomainError("logdet_spd: matrix is not positive definite")
        return ld

    def dfn(g, o, v):
        return np.asarray(g)[..., None, None] * np.swapaxes(np.linalg.inv(v), -1, -2)

    return _unary("logdet_spd", a, fn, dfn)


# --------------------------------------------------------------------------
# composites


def softplus(x):
    """``log(1 + exp(x))``, evaluated stably for large ``|x|``."""
    return _unary("softplus", x, lambda v: np.logaddexp(0.0, v), lambda g, o, x: g * expit(x))


def softmax(x, axis=-1):
    def fn(v):
        e = np.exp(v - np.max(v, axis=axis, keepdims=True))
        return e / np.sum(e, axis=axis, keepdims=True)

    def dfn(g, o, v):
        return o * (g - np.sum(g * o, axis=axis, keepdims=True))

    return _unary("softmax", x, fn, dfn)


def logsumexp(x, axis=-1):
    def fn(v):
        shift = np.max(v, axis=axis, keepdims=True)
        return np.log(np.sum(np.exp(v - shift), axis=axis)) + np.squeeze(shift, axis=axis)

    def dfn(g, o, v):
        return np.expand_dims(g, axis) * np.exp(v - np.expand_dims(o, axis))

    return _unary("logsumexp", x, fn, dfn)


def custom(kind: str, fn: Callable, vjp: Callable, *args):
    """Record a fused operation ``fn(*values)`` with a hand-written ``vjp``.

    ``vjp(g, out, *values)`` returns one gradient per argument (``None`` is
    allowed for arguments that never need one). Constant arguments are
    folded into the node, so only taped arguments become parents.
    """
    tape = _tape_of(*args)
    vals = [value(a) for a in args]
    out = fn(*vals)
    if tape is None:
        return out
    pos = [i for i, a in enumerate(args) if is_var(a)]
    shapes = [np.shape(vals[i]) for i in pos]

    def node_fn(*pv):
        full = list(vals)
        for i, v in zip(pos, pv):
            full[i] = v
        return fn(*full)

    def node_vjp(g, o, *pv):
        full = list(vals)
        for i, v in zip(pos, pv):
            full[i] = v
        grads = vjp(g, o, *full)
        return tuple(np.zeros(sh) if grads[i] is None else _unbroadcast(grads[i], sh)
                     for i, sh in zip(pos, shapes))

    return tape._push(kind, out, tuple(args[i].index for i in pos), node_fn, node_vjp)


def _squeeze_index(ndim, axis):
    axis = axis % ndim
    return tuple(0 if i == axis else slice(None) for i in range(ndim))


# --------------------------------------------------------------------------
# differentiation


def backward(tape: Tape, output: Var, seed=None) -> dict[int, np.ndarray]:
    """Accumulate d(output)/d(leaf) for every leaf on ``tape``.

    ``output`` must be a scalar unless ``seed`` (the output cotangent) is
    given. Leaves that ``output`` does not depend on map to zeros.
    """
    if not isinstance(output, Var) or output.tape is None:
        if isinstance(output, Var) or np.ndim(output) == 0:
            # a constant output: all gradients vanish
            return {i: np.zeros_like(v) for i, v in enumerate(tape.values) if tape.is_leaf(i)}
        raise ValueError("output is not on the tape")
    if output.tape is not tape or output.index >= len(tape):
        raise ValueError("output is not on the tape")
    if seed is None:
        if np.size(output.value) != 1:
            raise ValueError("backward of a non-scalar output needs an explicit seed")
        seed = np.ones_like(output.value)
    grads: list = [None] * (output.index + 1)
    grads[output.index] = np.asarray(seed, dtype=float)
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None or tape.kinds[i] == "leaf":
            continue
        parents = tape.parents[i]
        contribs = tape._vjps[i](g, tape.values[i], *(tape.values[p] for p in parents))
        for p, c in zip(parents, contribs):
            grads[p] = c if grads[p] is None else grads[p] + c
    out = {}
    for i in range(len(tape)):
        if tape.is_leaf(i):
            g = grads[i] if i < len(grads) else None
            out[i] = np.zeros_like(tape.values[i]) if g is None else np.asarray(g, dtype=float)
    return out


def gradients(output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to the leaves ``wrt``."""
    tape = wrt[0].tape
    g = backward(tape, output)
    return [g[v.index] for v in wrt]


def grad_check(f: Callable, point, h: float = 1e-5) -> float:
    """Relative error between taped and central-difference gradients.

    ``f`` maps a 1-d array (taped or plain) to a scalar. The error is
    ``max|analytic - fd| / max|fd|``, so exact zeros in the gradient do not
    turn finite-difference round-off into a huge relative error.
    """
    point = np.asarray(point, dtype=float)
    tape = Tape()
    x = tape.var(point)
    out = f(x)
    if not np.all(np.isfinite(value(out))):
        raise ValueError(f"grad_check: non-finite value {value(out)} at {point}")
    analytic = backward(tape, out)[x.index] if is_var(out) else np.zeros_like(point)
    fd = np.empty_like(point)
    for i in range(point.size):
        e = np.zeros_like(point)
        e.flat[i] = h
        hi = float(value(f(point + e)))
        lo = float(value(f(point - e)))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"grad_check: non-finite value near coordinate {i}")
        fd.flat[i] = (hi - lo) / (2 * h)
    if not np.all(np.isfinite(analytic)):
        raise ValueError("grad_check: non-finite analytic gradient")
    return float(np.max(np.abs(analytic - fd)) / max(float(np.max(np.abs(fd))), 1e-12))
