"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  Outside a tape every kernel is a plain
numpy call wrapped in a :class:`Tensor`, which is what decoding and finite
difference probes use.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> backward(tape, y)
    >>> float(x.grad)
    6.0
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for a kernel."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{kind}: shape mismatch {joined}")


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached a place that requires finite values."""

    def __init__(self, message: str, where=None):
        self.where = where
        super().__init__(message)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_local = threading.local()


def _active() -> "Tape | None":
    try:
        return _local.stack[-1]
    except (AttributeError, IndexError):
        return None


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.  A tape is single-writer.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(None)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()


def _wrap(data: np.ndarray, requires_grad: bool = False) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    t.name = None
    return t


def _record(kind: str, out_data, inputs: tuple, rule) -> Tensor:
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data, dtype=DTYPE)
    tape = _active()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out = _wrap(out_data, True)
                tape.nodes.append(Node(kind, inputs, out, rule))
                return out
    return _wrap(out_data)


class unchecked:
    """Skip per-kernel finiteness checks (callers validate the final result)."""

    def __enter__(self):
        _local.unchecked = getattr(_local, "unchecked", 0) + 1
        return self

    def __exit__(self, *exc):
        _local.unchecked -= 1


def _check_finite(kind: str, *arrays: np.ndarray) -> None:
    if getattr(_local, "unchecked", 0):
        return
    for a in arrays:
        # one reduction instead of an elementwise mask; inf/nan propagate into the sum
        if not math.isfinite(_reduce_add(a, axis=None)) and not np.isfinite(a).all():
            raise NonFiniteError(f"{kind}: non-finite input")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


_reduce_add = np.add.reduce


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("add", a.data, b.data)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_finite("elementwise-mul", a.data, b.data)
    ad, bd = a.data, b.data
    try:
        out = ad * bd
    except ValueError:
        raise ShapeError("elementwise-mul", a.shape, b.shape) from None

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("elementwise-mul", out, (a, b), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy ``@`` semantics, including batched leading axes and 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    _check_finite("matmul", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bd.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", out, (a, b), rule)


def sigmoid(a: Tensor) -> Tensor:
    _check_finite("sigmoid", a.data)
    # tanh form avoids overflow in exp for large negative inputs
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    _check_finite("tanh", a.data)
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a.data)
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    _check_finite("exp", a.data)
    y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    _check_finite("log", a.data)
    x = a.data
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _check_finite("softmax", a.data)
    y = _softmax(a.data)

    def rule(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _record("softmax", y, (a,), rule)


def log_softmax(a: Tensor) -> Tensor:
    _check_finite("log-softmax", a.data)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record("log-softmax", y, (a,), rule)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def row_max(a: Tensor, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient flows to the first maximiser."""
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("row-max", a.shape)
    _check_finite("row-max", a.data)
    x = a.data
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis)

    def rule(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record("row-max", np.squeeze(out, axis=axis), (a,), rule)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_finite("sum", a.data)
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join along ``axis`` (the last axis by default)."""
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat")
    ref = tensors[0].shape
    ax = axis % len(ref) if ref else 0
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    if len(tensors) == 1:
        return tensors[0]
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape)

    def rule(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", np.stack([t.data for t in tensors], axis=axis), tensors, rule)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic(index)

    def rule(g):
        gx = np.zeros(shape, dtype=DTYPE)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _record("getitem", a.data[index], (a,), rule)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take-rows: id out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def rule(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, ids, g)
        return (gx,)

    return _record("take-rows", table.data[ids], (table,), rule)


def pick(a: Tensor, ids) -> Tensor:
    """Select one entry per row along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError("pick", a.shape, ids.shape)
    idx = ids[..., None]

    def rule(g):
        gx = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _record("pick", np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), rule)


_KERNELS = {
    "matmul": matmul,
    "add": add,
    "concat-rows": concat,
    "elementwise-mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax-over-last-axis": softmax,
    "row-max": row_max,
    "sum": sum,
    "mean": mean,
}


def tensor_kernels(inputs: Sequence[Tensor], kind: str) -> Tensor:
    """Dispatch one of the named primitive kernels."""
    try:
        fn = _KERNELS[kind]
    except KeyError:
        raise ValueError(f"unknown kernel kind {kind!r}") from None
    if kind == "concat-rows":
        return fn(inputs)
    return fn(*inputs)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf reachable on ``tape``.

    Leaves on the tape that the loss does not depend on, and any tensors in
    ``params``, end with an all-zero gradient if they had none.
    """
    if not tape.nodes:
        raise ValueError("backward on an empty tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves.setdefault(key, t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        if g is not None:
            t.grad = t.grad + g
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def finite_difference_check(f: Callable[[], Tensor], point, h: float = 1e-5) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` is a zero-argument closure over ``point`` (one tensor or a sequence
    of tensors) that returns a scalar loss.  The error for one coordinate is
    ``|g_tape - g_fd| / max(1, |g_tape|, |g_fd|)``.  ``f`` must be smooth near
    ``point``; kinks (``abs`` at 0, ties in a max) give meaningless results.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    tensors = [point] if isinstance(point, Tensor) else list(point)
    saved = [t.grad for t in tensors]
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
    backward(tape, loss, tensors)
    analytic = [t.grad.copy() for t in tensors]
    for t, g in zip(tensors, saved):
        t.grad = g

    worst = 0.0
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        ga = analytic[ti].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            with unchecked():
                flat[j] = orig + h
                up = float(f().data)
                flat[j] = orig - h
                down = float(f().data)
                flat[j] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"non-finite loss perturbing tensor {ti} coordinate {j}", (ti, j))
            fd = (up - down) / (2.0 * h)
            err = abs(ga[j] - fd) / max(1.0, abs(ga[j]), abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Randomness, initialisation, regularisation, optimisation
# ---------------------------------------------------------------------------


class Rng:
    """Seeded generator; same seed and call sequence give the same stream."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, shape=None) -> np.ndarray:
        return self.gen.random(shape)

    def uniform(self, lo: float, hi: float, shape=None) -> np.ndarray:
        return self.gen.uniform(lo, hi, shape)

    def normal(self, scale: float = 1.0, shape=None) -> np.ndarray:
        return self.gen.normal(0.0, scale, shape)

    def integers(self, lo: int, hi: int | None = None, shape=None) -> np.ndarray:
        return self.gen.integers(lo, hi, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream keyed by integers, e.g. a scene index."""
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child.gen = np.random.Generator(np.random.PCG64([self.seed, *(int(k) for k in keys)]))
        return child

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


def init_uniform(shape, rng: Rng, lo: float = -0.1, hi: float = 0.1, name: str | None = None) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    if not shape or any(n <= 0 for n in shape):
        raise ValueError(f"init_uniform needs a non-empty shape, got {shape}")
    if not lo < hi:
        raise ValueError("init_uniform needs lo < hi")
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, name=name)


def dropout(h: Tensor, p: float, training: bool, rng: Rng) -> Tensor:
    """Inverted dropout; identity (and no rng draw) when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return h
    keep = (rng.random(h.shape) >= p) / (1.0 - p)
    return mul(h, keep)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: dict, grads: dict | None, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``grads`` maps parameter names to arrays; ``None`` means use each
    tensor's ``.grad``.  All gradients are validated before anything moves.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam:{name}", p.shape, g.shape)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}", name)

    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = v / c2
        np.sqrt(denom, out=denom)
        denom += state.epsilon
        step = m / c1
        step /= denom
        step *= lr
        p.data -= step
    return state


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(float(np.sum([np.sum(p.grad * p.grad) for p in params]))) if params else 0.0
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total
