"""Minimal float64 reverse-mode autodiff over numpy arrays.

Ops are plain functions taking and returning :class:`Tensor`. While a
:class:`Tape` is active, every op with at least one gradient-requiring input
appends a node to it; :func:`backward` replays the tape in reverse.
Outside a tape nothing is recorded, which doubles as ``no_grad``.
"""

from __future__ import annotations

import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "no_grad", "ShapeError", "NonFiniteError", "RandomSource",
    "tensor", "parameter", "backward", "finite_difference_check",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "sigmoid", "relu",
    "exp", "log", "softmax", "log_softmax", "logsumexp", "sum", "mean",
    "concat", "reshape", "transpose", "take", "layer_norm", "embedding",
    "l2_normalize", "dropout", "maximum", "detach",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the named op."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {joined}")


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        return self.data.ravel().tolist()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __getitem__ = lambda self, idx: take(self, idx)  # noqa: E731


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered op record. Thread-local, so parallel runs never share one."""

    def __init__(self):
        self.nodes: list[_Node] = []

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


class no_grad:
    """Suspend recording inside an enclosing tape."""

    def __enter__(self) -> None:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(None)

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _finish(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reached leaf.

    Each listed param that the loss does not reach gets a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if tape is not None:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
    elif loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _finish("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.data / b.data
    return _finish("div", value, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / b.data**2, b.shape)))


def neg(x: Tensor) -> Tensor:
    return _finish("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", x.data * c, (x,), lambda g: (g * c,))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _finish("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _finish("relu", np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _finish("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _finish("log", y, (x,), lambda g: (g / x.data,))


def _nonempty_last(op: str, x: Tensor) -> None:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(op, x.shape)


def softmax(x: Tensor) -> Tensor:
    _nonempty_last("softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", y, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    _nonempty_last("log_softmax", x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _finish("log_softmax", y, (x,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis (reduced, not kept)."""
    _nonempty_last("logsumexp", x)
    m = x.data.max(axis=-1, keepdims=True)
    s = np.exp(x.data - m).sum(axis=-1, keepdims=True)
    y = (m + np.log(s))
    p = np.exp(x.data - y)
    return _finish("logsumexp", y[..., 0], (x,), lambda g: (g[..., None] * p,))


# ---------------------------------------------------------------------------
# reductions and structure


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _finish("sum", y, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if x.data.size == 0:
        raise ShapeError("mean", x.shape)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("matmul", y, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish("concat", y, tensors, back)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(np.atleast_1d(shape))) from None
    return _finish("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    y = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _finish("transpose", y, (x,), lambda g: (np.transpose(g, inv),))


def take(x: Tensor, index) -> Tensor:
    """Basic or fancy indexing; gradient is scattered back with ``np.add.at``."""
    try:
        y = x.data[index]
    except IndexError:
        raise ShapeError("take", x.shape) from None

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _finish("take", np.array(y, dtype=np.float64), (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _finish("layer_norm", y, (x, gamma, beta), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise ShapeError("embedding", table.shape, ids.shape)
    y = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _finish("embedding", y, (table,), back)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rows divided by their Euclidean norm. Zero rows map to zero (with a warning)."""
    _nonempty_last("l2_normalize", x)
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    zero = norm <= eps
    if zero.any():
        warnings.warn("l2_normalize: zero vector left as zero", RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x.data / safe)

    def back(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(zero, 0.0, gx),)

    return _finish("l2_normalize", y, (x,), back)


def dropout(x: Tensor, keep_prob: float, rng: "RandomSource | None", training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropout: keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    keep = rng.bernoulli(keep_prob, x.shape) / keep_prob
    return _finish("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def maximum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise max across same-shaped tensors; ties route gradient to the first."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("maximum")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("maximum", shape, t.shape)
    stacked = np.stack([t.data for t in tensors])
    winner = stacked.argmax(axis=0)

    def back(g):
        return tuple(np.where(winner == k, g, 0.0) for k in range(len(tensors)))

    return _finish("maximum", stacked.max(axis=0), tensors, back)


# ---------------------------------------------------------------------------
# randomness


class RandomSource:
    """Seeded stream for every draw in a run (init, dropout, shuffling)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *labels: int) -> "RandomSource":
        """Independent child stream keyed by ``(seed, *labels)``."""
        ss = np.random.SeedSequence([self.seed, *[int(v) for v in labels]])
        child = RandomSource.__new__(RandomSource)
        child.seed = int(ss.generate_state(1)[0])
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, std: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        return (self._gen.random(size=shape) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)


# ---------------------------------------------------------------------------
# verification


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = parameter(base)
    with Tape():
        out = f(probe)
        backward(out, [probe])
    analytic = probe.grad

    def value(v: np.ndarray) -> float:
        y = f(Tensor(v)).item()
        if not np.isfinite(y):
            raise NonFiniteError("finite_difference_check: f non-finite at probe point")
        return y

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for k in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[k] += step
        minus[k] -= step
        numeric.reshape(-1)[k] = (value(plus.reshape(base.shape))
                                  - value(minus.reshape(base.shape))) / (2 * step)
    if analytic.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
