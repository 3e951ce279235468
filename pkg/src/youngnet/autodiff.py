"""Forward-mode jets over a reverse-mode tape.

Input derivatives of the potential (first partials along up to two tracked
input axes plus their mixed second partial) are carried by :class:`Jet2`.
The jet components may themselves be tape variables, so a scalar loss built
from derivatives of the network can be differentiated once more with respect
to the network parameters (reverse-over-forward).

The tape is vectorized: every node holds a numpy array, so one primitive
covers a whole batch of samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "UsageError",
    "Tape",
    "Var",
    "Jet2",
    "gelu",
    "gelu_d1",
    "gelu_d2",
    "gelu_d3",
    "gelu_jet",
    "exp",
    "seed_inputs",
    "jet_of",
    "grad_params",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class UsageError(RuntimeError):
    """Raised when the tape is used out of order (e.g. backward before finalize)."""


# ---------------------------------------------------------------------------
# GELU and its derivatives (exact Gaussian-CDF form)
# ---------------------------------------------------------------------------

def _pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _gelu_np(x):
    return x * ndtr(x)


def _gelu_d1_np(x):
    return ndtr(x) + x * _pdf(x)


def _gelu_d2_np(x):
    return _pdf(x) * (2.0 - x * x)


def _gelu_d3_np(x):
    return x * _pdf(x) * (x * x - 4.0)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("op", "inputs", "value", "ctx", "requires_grad", "name")

    def __init__(self, op, inputs, value, ctx, requires_grad, name=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name


class Tape:
    """Records primitive operations on numpy arrays for a reverse sweep.

    ``Tape(record=False)`` evaluates eagerly without storing anything, which
    is what analysis code uses for large forward-only evaluations.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[_Node] = []
        self.params: dict[str, Var] = {}
        self.output: Var | None = None
        self.visit_log: list[int] = []

    # -- leaves -------------------------------------------------------------
    def leaf(self, value, requires_grad: bool = False, name: str | None = None) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        if not self.record:
            return Var(self, -1, value)
        self.nodes.append(_Node(None, (), value, None, requires_grad, name))
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str, value) -> "Var":
        """Register a trainable leaf under ``name`` (the parameter-slot registry)."""
        if name in self.params:
            raise UsageError(f"parameter slot {name!r} already registered")
        var = self.leaf(np.array(value, dtype=np.float64), requires_grad=self.record, name=name)
        self.params[name] = var
        return var

    def finalize(self, output: "Var") -> "Var":
        if output.tape is not self:
            raise UsageError("output belongs to a different tape")
        if np.ndim(output.value) != 0:
            raise UsageError("tape output must be a scalar")
        self.output = output
        return output

    def release(self):
        """Drop recorded values so large intermediates are freed immediately
        (tapes and their variables form reference cycles)."""
        self.nodes = []
        self.params = {}
        self.output = None
        self.visit_log = []

    # -- recording ----------------------------------------------------------
    def apply(self, op: "_Op", *args) -> "Var":
        vars_ = []
        for a in args:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise UsageError("cannot mix variables from different tapes")
                vars_.append(a)
            else:
                vars_.append(self.leaf(a))
        values = [v.value for v in vars_]
        value, ctx = op.forward(*values)
        if not self.record:
            return Var(self, -1, value)
        requires = any(self.nodes[v.index].requires_grad for v in vars_)
        self.nodes.append(_Node(op, tuple(v.index for v in vars_), value,
                                ctx if requires else None, requires))
        return Var(self, len(self.nodes) - 1)

    # -- sweeps -------------------------------------------------------------
    def backward(self, seed=1.0) -> list:
        """Reverse sweep from the finalized output; returns per-node adjoints."""
        if self.output is None:
            raise UsageError("tape not finalized: call finalize(loss) first")
        nodes = self.nodes
        grads: list[Any] = [None] * len(nodes)
        out = self.output.index
        grads[out] = np.asarray(seed, dtype=np.float64) * np.ones_like(nodes[out].value)
        self.visit_log = []
        for i in range(out, -1, -1):
            g = grads[i]
            node = nodes[i]
            if g is None or node.op is None or not node.requires_grad:
                continue
            self.visit_log.append(i)
            values = [nodes[j].value for j in node.inputs]
            needs = [nodes[j].requires_grad for j in node.inputs]
            parts = node.op.backward(g, node.ctx, values, needs)
            for j, need, gj in zip(node.inputs, needs, parts):
                if not need or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
            # adjoints of interior nodes are no longer needed
            grads[i] = None
        return grads

    def replay(self, params: dict[str, np.ndarray] | None = None):
        """Recompute every node forward, optionally with new parameter values."""
        params = params or {}
        for name, var in self.params.items():
            if name in params:
                self.nodes[var.index].value = np.array(params[name], dtype=np.float64)
        for node in self.nodes:
            if node.op is None:
                continue
            value, ctx = node.op.forward(*[self.nodes[j].value for j in node.inputs])
            node.value = value
            node.ctx = ctx if node.requires_grad else None
        return None if self.output is None else self.output.value


def grad_params(tape: Tape, seed: float = 1.0) -> np.ndarray:
    """Gradient of the finalized scalar output with respect to every registered
    parameter slot, concatenated in registration order."""
    grads = tape.backward(seed)
    parts = []
    for var in tape.params.values():
        g = grads[var.index]
        parts.append(np.zeros(var.value.size) if g is None else np.ravel(g))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


class Var:
    """Handle to a tape node. Supports the arithmetic used by the losses."""

    __slots__ = ("tape", "index", "_value")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape: Tape, index: int, value=None):
        self.tape = tape
        self.index = index
        self._value = value

    @property
    def value(self) -> np.ndarray:
        if self.index < 0:
            return self._value
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, o):
        return self.tape.apply(_ADD, self, o)

    def __radd__(self, o):
        return self.tape.apply(_ADD, o, self)

    def __sub__(self, o):
        return self.tape.apply(_SUB, self, o)

    def __rsub__(self, o):
        return self.tape.apply(_SUB, o, self)

    def __mul__(self, o):
        return self.tape.apply(_MUL, self, o)

    def __rmul__(self, o):
        return self.tape.apply(_MUL, o, self)

    def __truediv__(self, o):
        return self.tape.apply(_DIV, self, o)

    def __rtruediv__(self, o):
        return self.tape.apply(_DIV, o, self)

    def __neg__(self):
        return self.tape.apply(_NEG, self)

    def __pow__(self, k):
        if not isinstance(k, (int, np.integer)):
            raise TypeError("only integer powers are supported")
        return self.tape.apply(_IntPow(int(k)), self)

    def __matmul__(self, o):
        return self.tape.apply(_MATMUL, self, o)

    def __rmatmul__(self, o):
        return self.tape.apply(_MATMUL, o, self)

    def __getitem__(self, key):
        return self.tape.apply(_Index(key), self)

    def sum(self, axis=None):
        return self.tape.apply(_Sum(axis), self)

    def mean(self, axis=None):
        return self.tape.apply(_Mean(axis), self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply(_Reshape(tuple(shape)), self)

    def cumsum(self, axis=0):
        return self.tape.apply(_CumSum(axis), self)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class _Op:
    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, g, ctx, xs, needs):
        raise NotImplementedError


class _Add(_Op):
    def forward(self, a, b):
        return a + b, None

    def backward(self, g, ctx, xs, needs):
        a, b = xs
        return (_unbroadcast(g, np.shape(a)) if needs[0] else None,
                _unbroadcast(g, np.shape(b)) if needs[1] else None)


class _Sub(_Op):
    def forward(self, a, b):
        return a - b, None

    def backward(self, g, ctx, xs, needs):
        a, b = xs
        return (_unbroadcast(g, np.shape(a)) if needs[0] else None,
                _unbroadcast(-g, np.shape(b)) if needs[1] else None)


class _Mul(_Op):
    def forward(self, a, b):
        return a * b, None

    def backward(self, g, ctx, xs, needs):
        a, b = xs
        return (_unbroadcast(g * b, np.shape(a)) if needs[0] else None,
                _unbroadcast(g * a, np.shape(b)) if needs[1] else None)


class _Div(_Op):
    def forward(self, a, b):
        return a / b, None

    def backward(self, g, ctx, xs, needs):
        a, b = xs
        return (_unbroadcast(g / b, np.shape(a)) if needs[0] else None,
                _unbroadcast(-g * a / (b * b), np.shape(b)) if needs[1] else None)


class _Neg(_Op):
    def forward(self, a):
        return -a, None

    def backward(self, g, ctx, xs, needs):
        return (-g,)


class _IntPow(_Op):
    def __init__(self, k):
        self.k = k

    def forward(self, a):
        return a ** self.k, None

    def backward(self, g, ctx, xs, needs):
        (a,) = xs
        k = self.k
        if k == 0:
            return (np.zeros_like(a),)
        return (g * k * a ** (k - 1),)


class _MatMul(_Op):
    def forward(self, a, b):
        return a @ b, None

    def backward(self, g, ctx, xs, needs):
        a, b = xs
        a2, b2, g2 = np.atleast_2d(a), np.atleast_2d(b), np.asarray(g)
        ga = gb = None
        if np.ndim(a) == 2 and np.ndim(b) == 2:
            ga = g2 @ b2.T if needs[0] else None
            gb = a2.T @ g2 if needs[1] else None
        elif np.ndim(a) == 2 and np.ndim(b) == 1:
            ga = np.outer(g2, b) if needs[0] else None
            gb = a2.T @ g2 if needs[1] else None
        elif np.ndim(a) == 1 and np.ndim(b) == 2:
            ga = b2 @ g2 if needs[0] else None
            gb = np.outer(a, g2) if needs[1] else None
        else:
            ga = g * b if needs[0] else None
            gb = g * a if needs[1] else None
        return ga, gb


class _Index(_Op):
    def __init__(self, key):
        self.key = key

    def forward(self, a):
        return np.array(a[self.key], dtype=np.float64), None

    def backward(self, g, ctx, xs, needs):
        (a,) = xs
        out = np.zeros_like(a)
        if _is_fancy(self.key):
            np.add.at(out, self.key, g)
        else:
            out[self.key] = g
        return (out,)


def _is_fancy(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


class _Sum(_Op):
    def __init__(self, axis):
        self.axis = axis

    def forward(self, a):
        return np.sum(a, axis=self.axis), None

    def backward(self, g, ctx, xs, needs):
        (a,) = xs
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, np.shape(a)).copy(),)


class _Mean(_Op):
    def __init__(self, axis):
        self.axis = axis

    def forward(self, a):
        return np.mean(a, axis=self.axis), None

    def backward(self, g, ctx, xs, needs):
        (a,) = xs
        shape = np.shape(a)
        if self.axis is None:
            count = int(np.prod(shape))
        else:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            count = int(np.prod([shape[ax] for ax in axes]))
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / count, shape).copy(),)


class _Reshape(_Op):
    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        return np.reshape(a, self.shape), None

    def backward(self, g, ctx, xs, needs):
        return (np.reshape(g, np.shape(xs[0])),)


class _CumSum(_Op):
    def __init__(self, axis):
        self.axis = axis

    def forward(self, a):
        return np.cumsum(a, axis=self.axis), None

    def backward(self, g, ctx, xs, needs):
        ax = self.axis
        return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),)


class _Elementwise(_Op):
    def __init__(self, fn, dfn):
        self.fn = fn
        self.dfn = dfn

    def forward(self, a):
        return self.fn(a), None

    def backward(self, g, ctx, xs, needs):
        return (g * self.dfn(xs[0]),)


class _View(_Op):
    """Slice of a flat parameter vector, reshaped (backward scatters)."""

    def __init__(self, start, shape):
        self.start = start
        self.shape = tuple(shape)
        self.size = int(np.prod(shape)) if shape else 1

    def forward(self, flat):
        return flat[self.start:self.start + self.size].reshape(self.shape), None

    def backward(self, g, ctx, xs, needs):
        out = np.zeros_like(xs[0])
        out[self.start:self.start + self.size] = np.ravel(g)
        return (out,)


class _JetLinear(_Op):
    """Affine map applied to a stacked jet ``Z[c, p, :]``.

    Channel 0 carries values and receives the bias; derivative channels are
    mapped linearly. Each channel is multiplied separately so the value
    channel is bit-identical to a plain ``x @ W.T + b``.
    """

    def forward(self, z, w, b):
        out = np.empty(z.shape[:-1] + (w.shape[0],))
        wt = w.T
        out[0] = z[0] @ wt + b
        for c in range(1, z.shape[0]):
            out[c] = z[c] @ wt
        return out, None

    def backward(self, g, ctx, xs, needs):
        z, w, b = xs
        gz = g @ w if needs[0] else None
        gw = None
        if needs[1]:
            flat_g = g.reshape(-1, g.shape[-1])
            flat_z = z.reshape(-1, z.shape[-1])
            gw = flat_g.T @ flat_z
        gb = g[0].sum(axis=0) if needs[2] else None
        return gz, gw, gb


class _JetGelu(_Op):
    """GELU applied to a stacked jet.

    Channel layout: 0 value, 1..k first partials (k = 1 or 2), and when
    ``mixed`` a final channel holding the mixed second partial of dirs 1, 2.
    """

    def __init__(self, mixed: bool):
        self.mixed = mixed

    def forward(self, z):
        v = z[0]
        cdf = ndtr(v)
        pdf = _pdf(v)
        s1 = cdf + v * pdf
        s2 = pdf * (2.0 - v * v)
        out = np.empty_like(z)
        out[0] = v * cdf
        nfirst = 2 if self.mixed else z.shape[0] - 1
        for c in range(1, nfirst + 1):
            out[c] = s1 * z[c]
        s3 = None
        if self.mixed:
            out[3] = s2 * z[1] * z[2] + s1 * z[3]
            s3 = v * pdf * (v * v - 4.0)
        return out, (s1, s2, s3)

    def backward(self, g, ctx, xs, needs):
        (z,) = xs
        s1, s2, s3 = ctx
        gz = np.empty_like(z)
        nfirst = 2 if self.mixed else z.shape[0] - 1
        gv = g[0] * s1
        for c in range(1, nfirst + 1):
            gv += g[c] * s2 * z[c]
            gz[c] = g[c] * s1
        if self.mixed:
            gm = g[3]
            gv += gm * (s3 * z[1] * z[2] + s2 * z[3])
            gz[1] += gm * s2 * z[2]
            gz[2] += gm * s2 * z[1]
            gz[3] = gm * s1
        gz[0] = gv
        return (gz,)


_ADD, _SUB, _MUL, _DIV, _NEG, _MATMUL = _Add(), _Sub(), _Mul(), _Div(), _Neg(), _MatMul()
_EXP = _Elementwise(np.exp, np.exp)
_GELU = _Elementwise(_gelu_np, _gelu_d1_np)
_GELU_D1 = _Elementwise(_gelu_d1_np, _gelu_d2_np)
_GELU_D2 = _Elementwise(_gelu_d2_np, _gelu_d3_np)


def _dispatch(op, fn):
    def apply(x):
        if isinstance(x, Var):
            return x.tape.apply(op, x)
        return fn(np.asarray(x, dtype=np.float64)) if not isinstance(x, float) else float(fn(x))
    return apply


exp = _dispatch(_EXP, np.exp)
gelu = _dispatch(_GELU, _gelu_np)
gelu_d1 = _dispatch(_GELU_D1, _gelu_d1_np)
gelu_d2 = _dispatch(_GELU_D2, _gelu_d2_np)


def gelu_d3(x):
    """Third derivative of GELU (numpy only; needed by reverse sweeps)."""
    return _gelu_d3_np(np.asarray(x, dtype=np.float64))


def view(flat: Var, start: int, shape: Sequence[int]) -> Var:
    return flat.tape.apply(_View(start, shape), flat)


def jet_linear(z, w, b):
    tape = _tape_of(z, w, b)
    return tape.apply(_JetLinear(), z, w, b)


def jet_gelu(z, mixed: bool):
    return _tape_of(z).apply(_JetGelu(mixed), z)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise UsageError("stacked jet ops need at least one tape variable")


# ---------------------------------------------------------------------------
# Jet2
# ---------------------------------------------------------------------------

@dataclass
class Jet2:
    """Value with first partials along two tracked input axes and their mixed
    second partial.

    ``dirs`` names the tracked axes; when both entries are the same axis,
    ``dab`` is the pure second partial along it. Components may be floats,
    numpy arrays or tape variables.
    """

    value: Any
    da: Any = 0.0
    db: Any = 0.0
    dab: Any = 0.0
    dirs: tuple = (0, 1)

    @property
    def d1(self) -> dict:
        if self.dirs[0] == self.dirs[1]:
            return {self.dirs[0]: self.da}
        return {self.dirs[0]: self.da, self.dirs[1]: self.db}

    @property
    def d12(self):
        return self.dab

    def _coerce(self, other) -> "Jet2":
        if isinstance(other, Jet2):
            if other.dirs != self.dirs:
                raise ValueError(f"jets track different directions: {self.dirs} vs {other.dirs}")
            return other
        return Jet2(other, 0.0, 0.0, 0.0, self.dirs)

    def __add__(self, other):
        o = self._coerce(other)
        return Jet2(self.value + o.value, self.da + o.da, self.db + o.db, self.dab + o.dab, self.dirs)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.value, -self.da, -self.db, -self.dab, self.dirs)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, Jet2):
            return Jet2(self.value * other, self.da * other, self.db * other, self.dab * other, self.dirs)
        o = self._coerce(other)
        return Jet2(
            self.value * o.value,
            self.da * o.value + self.value * o.da,
            self.db * o.value + self.value * o.db,
            self.dab * o.value + self.da * o.db + self.db * o.da + self.value * o.dab,
            self.dirs,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet2):
            return self * other.apply(lambda v: 1.0 / v, lambda v: -1.0 / (v * v),
                                      lambda v: 2.0 / (v * v * v))
        return self * (1.0 / other)

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise TypeError("Jet2 supports non-negative integer powers only")
        out = Jet2(1.0, 0.0, 0.0, 0.0, self.dirs)
        for _ in range(k):
            out = out * self
        return out

    def apply(self, f0: Callable, f1: Callable, f2: Callable) -> "Jet2":
        """Chain rule for a scalar function given its value and first two derivatives."""
        v = self.value
        s1 = f1(v)
        return Jet2(f0(v), s1 * self.da, s1 * self.db,
                    f2(v) * self.da * self.db + s1 * self.dab, self.dirs)


def gelu_jet(x: Jet2) -> Jet2:
    return x.apply(gelu, gelu_d1, gelu_d2)


def seed_inputs(point, dirs: tuple) -> list[Jet2]:
    """One jet per input coordinate, seeded along the tracked axes."""
    a, b = dirs
    return [Jet2(value, float(i == a), float(i == b), 0.0, (a, b)) for i, value in enumerate(point)]


def jet_of(fn: Callable[..., Jet2], point, dirs: tuple) -> Jet2:
    """Evaluate ``fn(*coords)`` on seeded input jets."""
    return fn(*seed_inputs(point, dirs))
