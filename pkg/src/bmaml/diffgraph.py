"""Reverse-mode differentiation over numpy arrays with differentiable gradients.

Every primitive records a vector-Jacobian product written in terms of other
primitives. When gradients are requested with ``create_graph=True`` the
backward pass is itself recorded, so the resulting gradients can be
differentiated again (gradients of gradients, Hessian-vector products, meta
gradients through unrolled inner loops).

All values are float64 arrays. Broadcasting follows numpy; the backward pass
reduces gradients back to each input's shape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Var",
    "NumericOverflowError",
    "as_var",
    "constant",
    "variable",
    "stop_gradient",
    "no_grad",
    "enable_grad",
    "is_recording",
    "gradients",
    "grad",
    "value_and_grad",
    "hvp",
    "finite_diff_grad",
    "exp",
    "log",
    "tanh",
    "relu",
    "square",
    "power",
    "matmul",
    "concatenate",
    "broadcast_to",
    "sum_to",
    "logsumexp",
    "log_softmax",
]


class NumericOverflowError(ArithmeticError):
    """Raised when an operation produces a non-finite value."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"non-finite value produced by operation '{op}'")


_local = threading.local()


def is_recording() -> bool:
    return getattr(_local, "recording", True)


@contextlib.contextmanager
def _set_recording(flag: bool):
    prev = is_recording()
    _local.recording = flag
    try:
        yield
    finally:
        _local.recording = prev


def no_grad():
    """Context in which operations compute values only."""
    return _set_recording(False)


def enable_grad():
    return _set_recording(True)


class Var:
    """A node in the computation graph.

    ``parents`` holds ``(input, vjp)`` pairs for inputs that need gradients;
    ``vjp`` maps the upstream gradient (a Var) to this input's contribution.
    """

    __slots__ = ("value", "parents", "op", "needs_grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), op: str = "const", needs_grad: bool = False):
        self.value = value
        self.parents = parents
        self.op = op
        self.needs_grad = needs_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, needs_grad={self.needs_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: subtract(a, b)
    __rsub__ = lambda a, b: subtract(b, a)
    __mul__ = lambda a, b: multiply(a, b)
    __rmul__ = lambda a, b: multiply(b, a)
    __truediv__ = lambda a, b: divide(a, b)
    __rtruediv__ = lambda a, b: divide(b, a)
    __neg__ = lambda a: negative(a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        return vsum(self, axis, keepdims)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Var":
        return swapaxes(self, a, b)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64))


def constant(x) -> Var:
    """A graph leaf that never receives gradients."""
    return Var(np.array(x.value if isinstance(x, Var) else x, dtype=np.float64))


def variable(x) -> Var:
    """A graph leaf that gradients are taken with respect to."""
    value = x.value if isinstance(x, Var) else x
    return Var(np.array(value, dtype=np.float64), needs_grad=True)


def stop_gradient(x) -> Var:
    """Identity in value, zero in derivative."""
    return Var(as_var(x).value)


def _check(op: str, value) -> None:
    if not np.isfinite(value).all():
        raise NumericOverflowError(op)


def _make(op: str, value, *pairs, check: bool = True) -> Var:
    if check:
        _check(op, value)
    if not is_recording():
        return Var(value)
    live = tuple((p, f) for p, f in pairs if p.needs_grad)
    if not live:
        return Var(value)
    return Var(value, live, op, True)


def _reuse(value, fn: Callable, *args) -> Var:
    # Backward passes without create_graph only need the cached forward value.
    return fn(*args) if is_recording() else Var(value)


# ---------------------------------------------------------------- structure


def sum_to(x, shape: tuple[int, ...]) -> Var:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = as_var(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    value = x.value.sum(axis=axes, keepdims=True)
    if lead:
        value = value.reshape(shape)
    return _make("sum_to", value, (x, lambda g: broadcast_to(g, x.shape)), check=False)


def broadcast_to(x, shape: tuple[int, ...]) -> Var:
    x = as_var(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    value = np.broadcast_to(x.value, shape)
    return _make("broadcast_to", value, (x, lambda g: sum_to(g, x.shape)), check=False)


def reshape(x, shape: tuple[int, ...]) -> Var:
    x = as_var(x)
    value = x.value.reshape(shape)
    return _make("reshape", value, (x, lambda g: reshape(g, x.shape)), check=False)


def swapaxes(x, a: int, b: int) -> Var:
    x = as_var(x)
    value = np.swapaxes(x.value, a, b)
    return _make("swapaxes", value, (x, lambda g: swapaxes(g, a, b)), check=False)


def getitem(x, index) -> Var:
    x = as_var(x)
    value = x.value[index]
    return _make("getitem", value, (x, lambda g: _scatter(g, index, x.shape)), check=False)


def _scatter(g, index, shape) -> Var:
    g = as_var(g)
    value = np.zeros(shape)
    value[index] = g.value
    return _make("scatter", value, (g, lambda u: getitem(u, index)), check=False)


def concatenate(xs: Sequence, axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    value = np.concatenate([x.value for x in xs], axis=axis)
    ax = axis % value.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])
    pairs = []
    for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
        index = (slice(None),) * ax + (slice(int(lo), int(hi)),)
        pairs.append((x, lambda g, index=index: getitem(g, index)))
    return _make("concatenate", value, *pairs, check=False)


def vsum(x, axis=None, keepdims: bool = False) -> Var:
    x = as_var(x)
    value = np.sum(x.value, axis=axis, keepdims=keepdims)
    kept = np.sum(x.value, axis=axis, keepdims=True).shape

    def vjp(g):
        return broadcast_to(reshape(g, kept), x.shape)

    return _make("sum", np.asarray(value), (x, vjp))


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(
        "add",
        a.value + b.value,
        (a, lambda g: sum_to(g, a.shape)),
        (b, lambda g: sum_to(g, b.shape)),
    )


def subtract(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(
        "subtract",
        a.value - b.value,
        (a, lambda g: sum_to(g, a.shape)),
        (b, lambda g: sum_to(negative(g), b.shape)),
    )


def negative(a) -> Var:
    a = as_var(a)
    return _make("negative", -a.value, (a, lambda g: negative(g)), check=False)


def multiply(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    with np.errstate(over="ignore", invalid="ignore"):
        value = a.value * b.value
    return _make(
        "multiply",
        value,
        (a, lambda g: sum_to(multiply(g, b), a.shape)),
        (b, lambda g: sum_to(multiply(g, a), b.shape)),
    )


def divide(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    with np.errstate(all="ignore"):
        value = a.value / b.value
    return _make(
        "divide",
        value,
        (a, lambda g: sum_to(divide(g, b), a.shape)),
        (b, lambda g: sum_to(negative(divide(multiply(g, a), multiply(b, b))), b.shape)),
    )


def power(a, p: float) -> Var:
    """``a ** p`` for a constant exponent."""
    a = as_var(a)
    p = float(p)
    with np.errstate(all="ignore"):
        value = a.value**p
    if p == 2.0:
        return _make("power", value, (a, lambda g: multiply(g, multiply(a, 2.0))))
    return _make("power", value, (a, lambda g: multiply(g, multiply(power(a, p - 1.0), p))))


def square(a) -> Var:
    return power(a, 2.0)


def exp(a) -> Var:
    a = as_var(a)
    with np.errstate(all="ignore"):
        value = np.exp(a.value)
    return _make("exp", value, (a, lambda g: multiply(g, _reuse(value, exp, a))))


def log(a) -> Var:
    a = as_var(a)
    with np.errstate(all="ignore"):
        value = np.log(a.value)
    return _make("log", value, (a, lambda g: divide(g, a)))


def tanh(a) -> Var:
    a = as_var(a)
    value = np.tanh(a.value)

    def vjp(g):
        t = _reuse(value, tanh, a)
        return multiply(g, subtract(1.0, multiply(t, t)))

    return _make("tanh", value, (a, vjp))


def relu(a) -> Var:
    """max(a, 0); the derivative at 0 is taken to be 0."""
    a = as_var(a)
    mask = (a.value > 0).astype(np.float64)
    return _make("relu", a.value * mask, (a, lambda g: multiply(g, mask)))


def matmul(a, b) -> Var:
    """Batched matrix product of arrays with ``ndim >= 2``."""
    a, b = as_var(a), as_var(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        value = a.value @ b.value
    return _make(
        "matmul",
        value,
        (a, lambda g: sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape)),
        (b, lambda g: sum_to(matmul(swapaxes(a, -1, -2), g), b.shape)),
    )


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Var:
    a = as_var(a)
    shift = stop_gradient(np.max(a.value, axis=axis, keepdims=True))
    out = log(vsum(exp(a - shift), axis=axis, keepdims=True)) + shift
    if not keepdims:
        out = reshape(out, np.sum(a.value, axis=axis).shape)
    return out


def log_softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    return a - logsumexp(a, axis=axis, keepdims=True)


# ---------------------------------------------------------------- gradients


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradients(y: Var, xs: Iterable[Var], create_graph: bool = False) -> list[Var]:
    """Gradients of the scalar ``y`` with respect to each node in ``xs``.

    With ``create_graph`` the backward computation is recorded so the results
    can be differentiated again. Nodes of ``xs`` that ``y`` does not depend on
    get zero gradients.
    """
    xs = list(xs)
    if y.value.size != 1:
        raise ValueError(f"gradients needs a scalar output, got shape {y.shape}")
    targets = {id(x) for x in xs}
    if not y.needs_grad:
        return [Var(np.zeros_like(x.value)) for x in xs]

    order = _toposort(y)
    reaches: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in reaches for p, _ in node.parents):
            reaches.add(id(node))

    grads: dict[int, Var] = {id(y): Var(np.ones_like(y.value))}
    found: dict[int, Var] = {}
    with _set_recording(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in targets:
                found[id(node)] = g
            for parent, vjp in node.parents:
                if id(parent) not in reaches:
                    continue
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    return [found.get(id(x), Var(np.zeros_like(x.value))) for x in xs]


def value_and_grad(f: Callable[[Var], Var], x):
    """Evaluate ``f`` and its gradient at ``x``.

    When ``x`` is a Var that already takes part in a recorded graph, the
    gradient is returned as a Var connected to that graph. Otherwise ``x`` is
    treated as a fresh leaf and plain arrays are returned.
    """
    if isinstance(x, Var) and x.needs_grad and is_recording():
        y = f(x)
        (g,) = gradients(y, [x], create_graph=True)
        return y, g
    leaf = variable(x)
    with enable_grad():
        y = f(leaf)
    (g,) = gradients(y, [leaf])
    return y.value, g.value


def grad(f: Callable[[Var], Var], x):
    """``df/dx`` for scalar-valued ``f``; see :func:`value_and_grad`."""
    return value_and_grad(f, x)[1]


def hvp(f: Callable[[Var], Var], x, v) -> np.ndarray:
    """Hessian-vector product, the gradient of ``<grad f(x), v>``."""
    x_value = x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x_value.shape:
        raise ValueError(f"hvp: vector shape {v.shape} does not match point shape {x_value.shape}")
    return grad(lambda z: vsum(grad(f, z) * v), x_value)


def finite_diff_grad(f: Callable[[Var], Var], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    x = np.array(x.value if isinstance(x, Var) else x, dtype=np.float64)
    out = np.zeros_like(x)
    with no_grad():
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            out[i] = (as_var(f(Var(xp))).value - as_var(f(Var(xm))).value) / (2 * h)
    return out
