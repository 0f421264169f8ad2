"""Dense float64 arithmetic with a minimal reverse-mode tape.

Matrices are plain ``numpy.ndarray`` values of dtype float64. A :class:`Var`
wraps one matrix and, when created through a :class:`Tape`, records the
operation that produced it so :meth:`Tape.backward` can replay the chain rule
in reverse order.

Randomness comes from numpy's PCG64 bit generator (``numpy.random.Generator``
seeded through ``SeedSequence``), which is specified to produce the same
stream on every platform for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
SUM_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


def make_rng(*seed: int) -> np.random.Generator:
    """PCG64 generator; several integers may be given to derive substreams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed))))


def as_matrix(x) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.size == 0:
        raise ShapeError(f"expected a non-empty 2-d matrix, got shape {a.shape}")
    return a


class Var:
    """A matrix value on (or off) a tape."""

    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.tape is None:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.shape})"


@dataclass
class Tape:
    """Records operations in order; replays them backwards.

    Parameters are registered by name. Every backward pass starts from zeroed
    accumulators, so a tape may be reused for several backward calls on the
    same graph.
    """

    ops: list[tuple[Var, Sequence[Var], Callable[[np.ndarray], None]]] = field(default_factory=list)
    params: dict[str, Var] = field(default_factory=dict)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        v = Var(np.array(value, dtype=np.float64), self, name)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return Var(value, None)

    def record(self, out: Var, inputs: Sequence[Var], backward: Callable[[np.ndarray], None]) -> None:
        self.ops.append((out, inputs, backward))

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)
        for out, _, _ in self.ops:
            out.grad = None
        loss.grad = np.ones_like(loss.value)
        for out, _, fn in reversed(self.ops):
            if out.grad is not None:
                fn(out.grad)
        return self.gradients()

    def gradients(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in self.params.items()}


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _tape_of(*xs: Var) -> Tape | None:
    for x in xs:
        if x.tape is not None:
            return x.tape
    return None


def _emit(value: np.ndarray, inputs: Sequence[Var], backward: Callable[[np.ndarray], None]) -> Var:
    if not np.all(np.isfinite(value)):
        raise EvaluationError("operation produced non-finite values")
    tape = _tape_of(*inputs)
    out = Var(value, tape)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_val = a.value @ b.value

    def backward(g):
        a._accum(g @ b.value.T)
        b._accum(a.value.T @ g)

    return _emit(out_val, (a, b), backward)


def propagate(s, x) -> Var:
    """``s @ x`` with each output entry summed in sorted term order.

    The result depends only on the multiset of products per entry, so
    relabelling graph nodes permutes the output exactly.
    """
    s, x = _lift(s), _lift(x)
    if s.shape[1] != x.shape[0]:
        raise ShapeError(f"propagate shape mismatch: {s.shape} x {x.shape}")
    terms = s.value[:, :, None] * x.value[None, :, :]
    out_val = np.sort(terms, axis=1).sum(axis=1)

    def backward(g):
        s._accum(g @ x.value.T)
        x._accum(s.value.T @ g)

    return _emit(out_val, (s, x), backward)


def transpose(a) -> Var:
    a = _lift(a)

    def backward(g):
        a._accum(g.T)

    return _emit(a.value.T.copy(), (a,), backward)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out_val = a.value + b.value

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _emit(out_val, (a, b), backward)


def sub(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out_val = a.value - b.value

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(-_unbroadcast(g, b.shape))

    return _emit(out_val, (a, b), backward)


def mul(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out_val = a.value * b.value

    def backward(g):
        a._accum(_unbroadcast(g * b.value, a.shape))
        b._accum(_unbroadcast(g * a.value, b.shape))

    return _emit(out_val, (a, b), backward)


def div(a, b) -> Var:
    a, b = _lift(a), _lift(b)
    out_val = a.value / b.value

    def backward(g):
        a._accum(_unbroadcast(g / b.value, a.shape))
        b._accum(_unbroadcast(-g * a.value / b.value**2, b.shape))

    return _emit(out_val, (a, b), backward)


def scale(a, c: float) -> Var:
    a = _lift(a)

    def backward(g):
        a._accum(g * c)

    return _emit(a.value * c, (a,), backward)


def sigmoid(x) -> Var:
    x = _lift(x)
    # split by sign so exp never overflows
    v = x.value
    e = np.exp(-np.abs(v))
    out_val = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        x._accum(g * out_val * (1.0 - out_val))

    return _emit(out_val, (x,), backward)


def relu(x) -> Var:
    x = _lift(x)
    mask = x.value > 0

    def backward(g):
        x._accum(g * mask)

    return _emit(np.where(mask, x.value, 0.0), (x,), backward)


def identity(x) -> Var:
    return _lift(x)


def exp(x) -> Var:
    x = _lift(x)
    out_val = np.exp(x.value)

    def backward(g):
        x._accum(g * out_val)

    return _emit(out_val, (x,), backward)


def sqrt(x) -> Var:
    x = _lift(x)
    out_val = np.sqrt(x.value)

    def backward(g):
        x._accum(g * 0.5 / out_val)

    return _emit(out_val, (x,), backward)


def absolute(x) -> Var:
    x = _lift(x)

    def backward(g):
        x._accum(g * np.sign(x.value))

    return _emit(np.abs(x.value), (x,), backward)


def safe_log(x) -> Var:
    """log(max(x, 1e-12)); zero gradient where the floor is active."""
    x = _lift(x)
    live = x.value > LOG_FLOOR
    clipped = np.where(live, x.value, LOG_FLOOR)

    def backward(g):
        x._accum(np.where(live, g / clipped, 0.0))

    return _emit(np.log(clipped), (x,), backward)


def clamp_min(x, floor: float) -> Var:
    x = _lift(x)
    live = x.value > floor

    def backward(g):
        x._accum(g * live)

    return _emit(np.where(live, x.value, floor), (x,), backward)


# -- reductions and row operations -----------------------------------------

def total(x) -> Var:
    x = _lift(x)

    def backward(g):
        x._accum(np.broadcast_to(g, x.shape).copy())

    return _emit(np.array([[x.value.sum()]]), (x,), backward)


def sorted_mean(x) -> Var:
    """Mean of all entries, summed in sorted order (order-independent)."""
    x = _lift(x)
    n = x.value.size

    def backward(g):
        x._accum(np.full(x.shape, g.item() / n))

    return _emit(np.array([[np.sort(x.value, axis=None).sum() / n]]), (x,), backward)


def row_sum(x) -> Var:
    x = _lift(x)

    def backward(g):
        x._accum(np.broadcast_to(g, x.shape).copy())

    return _emit(x.value.sum(axis=1, keepdims=True), (x,), backward)


def row_softmax(x) -> Var:
    x = _lift(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_val = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        x._accum(out_val * (g - (g * out_val).sum(axis=1, keepdims=True)))

    return _emit(out_val, (x,), backward)


def renorm_rows(x) -> Var:
    """Clamp negatives to zero, then divide each row by its sum (guarded).

    A row with no positive mass left becomes uniform so every output row is a
    distribution.
    """
    c = relu(x)
    out = div(c, clamp_min(row_sum(c), SUM_FLOOR))
    dead = c.value.sum(axis=1) <= SUM_FLOOR
    if dead.any():
        out = set_rows(out, dead, np.full(out.shape, 1.0 / out.shape[1]))
    return out


def shift_rows_nonnegative(x, eps: float = 1e-12) -> Var:
    """Row-wise ``x - min(0, min(row)) + eps``."""
    x = _lift(x)
    v = x.value
    idx = np.argmin(v, axis=1)
    mins = v[np.arange(v.shape[0]), idx]
    active = mins < 0
    out_val = v - np.where(active, mins, 0.0)[:, None] + eps

    def backward(g):
        gx = g.copy()
        rows = np.nonzero(active)[0]
        gx[rows, idx[rows]] -= g[rows].sum(axis=1)
        x._accum(gx)

    return _emit(out_val, (x,), backward)


def take(x, rows=None, cols=None) -> Var:
    """Gather rows and/or columns by index (scatter-add on the way back)."""
    x = _lift(x)
    r = np.arange(x.shape[0]) if rows is None else np.asarray(rows, dtype=int)
    c = np.arange(x.shape[1]) if cols is None else np.asarray(cols, dtype=int)
    out_val = x.value[np.ix_(r, c)]

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, np.ix_(r, c), g)
        x._accum(gx)

    return _emit(out_val, (x,), backward)


def pick(x, rows, cols) -> Var:
    """Elementwise gather ``x[rows[i], cols[i]]`` returned as a column."""
    x = _lift(x)
    r = np.asarray(rows, dtype=int)
    c = np.asarray(cols, dtype=int)
    out_val = x.value[r, c].reshape(-1, 1)

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (r, c), g.ravel())
        x._accum(gx)

    return _emit(out_val, (x,), backward)


def reshape(x, shape: tuple[int, int]) -> Var:
    x = _lift(x)

    def backward(g):
        x._accum(g.reshape(x.shape))

    return _emit(x.value.reshape(shape).copy(), (x,), backward)


def concat(parts: Iterable, axis: int = 1) -> Var:
    parts = [_lift(p) for p in parts]
    out_val = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            p._accum(g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _emit(out_val, parts, backward)


def set_rows(x, mask, values) -> Var:
    """Replace the rows where ``mask`` is true with the given constant rows."""
    x = _lift(x)
    mask = np.asarray(mask, dtype=bool)
    out_val = x.value.copy()
    out_val[mask] = np.asarray(values, dtype=np.float64)[mask]

    def backward(g):
        x._accum(np.where(mask[:, None], 0.0, g))

    return _emit(out_val, (x,), backward)


def pairwise_absdiff(f) -> Var:
    """Rows ``|f_m - f_n|`` for all ordered pairs, shape (M*M, d)."""
    f = _lift(f)
    m, d = f.shape
    diff = f.value[:, None, :] - f.value[None, :, :]
    sgn = np.sign(diff)

    def backward(g):
        g3 = g.reshape(m, m, d) * sgn
        f._accum(g3.sum(axis=1) - g3.sum(axis=0))

    return _emit(np.abs(diff).reshape(m * m, d), (f,), backward)


def shot_mean(v, groups: int, per_group: int) -> Var:
    """Mean over consecutive row blocks, summed in sorted order per column.

    Rows must be grouped block-major (``per_group`` rows per group). Sorting
    makes the result exactly invariant to row order inside each block.
    """
    v = _lift(v)
    if v.shape[0] != groups * per_group:
        raise ShapeError(f"expected {groups}x{per_group} rows, got {v.shape[0]}")
    blocks = v.value.reshape(groups, per_group, -1)
    out_val = np.sort(blocks, axis=1).sum(axis=1) / per_group

    def backward(g):
        v._accum(np.repeat(g / per_group, per_group, axis=0))

    return _emit(out_val, (v,), backward)


ACTIVATIONS: dict[str, Callable[[Var], Var]] = {
    "sigmoid": sigmoid,
    "identity": identity,
    "relu": relu,
}


# -- gradient verification -------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def gradient_check(
    f: Callable[[Tape], Var],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central finite differences.

    ``f`` receives a fresh tape, must register the parameters it uses with
    ``tape.param(name, value)`` taking values from ``params`` (which this
    function perturbs in place and restores), and return a scalar Var.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def evaluate() -> float:
        tape = Tape()
        try:
            out = f(tape)
        except EvaluationError as exc:
            raise EvaluationError(f"non-finite objective at probe point: {exc}") from exc
        val = float(out.value.item())
        if not np.isfinite(val):
            raise EvaluationError("non-finite objective at probe point")
        return val

    tape = Tape()
    loss = f(tape)
    analytic = tape.backward(loss)
    errors = {}
    for name, arr in params.items():
        num = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + step
            fp = evaluate()
            arr[i] = orig - step
            fm = evaluate()
            arr[i] = orig
            num[i] = (fp - fm) / (2 * step)
        a = analytic.get(name, np.zeros_like(arr))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        errors[name] = float(np.max(np.abs(a - num) / denom))
    return GradCheckReport(errors, tolerance)
