"""Minimal define-by-run reverse-mode autodiff over dense float64 arrays.

Operations record themselves on the innermost active :class:`Tape`.  With no
tape active nothing is recorded, which is how inference runs.  Only
scalar-with-tensor broadcasting is implicit; row-wise bias addition and
similar patterns go through explicit ops (``add_bias``, ``einsum``).
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

CKPT_HEADER = "beamstop-ckpt v1"


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None  # set when produced by a recorded op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; backward replays it in reverse."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss was not produced on an active tape")
    loss._tape.backward(loss)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, fn)
        return out
    return Tensor(data)


# ---------------------------------------------------------------- elementwise


def _broadcast_pair(a: Tensor, b: Tensor, what: str):
    if a.shape == b.shape:
        return None
    if b.data.size == 1:
        return "b"
    if a.data.size == 1:
        return "a"
    raise DimensionError(f"{what}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.full(shape, g.sum())


def add(a: Tensor, b: Tensor) -> Tensor:
    side = _broadcast_pair(a, b, "add")

    def bw(g):
        ga = _reduce_to(g, a.shape) if side == "a" else g
        gb = _reduce_to(g, b.shape) if side == "b" else g
        return ga, gb

    out = a.data + b.data
    if side == "a":
        out = out.reshape(b.shape)
    elif side == "b":
        out = out.reshape(a.shape)
    return _emit(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    side = _broadcast_pair(a, b, "sub")

    def bw(g):
        ga = _reduce_to(g, a.shape) if side == "a" else g
        gb = _reduce_to(-g, b.shape) if side == "b" else -g
        return ga, gb

    out = a.data - b.data
    out = out.reshape(b.shape if side == "a" else a.shape)
    return _emit(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    side = _broadcast_pair(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g * bd
        gb = g * ad
        if side == "a":
            ga = _reduce_to(ga, a.shape)
        elif side == "b":
            gb = _reduce_to(gb, b.shape)
        return ga, gb

    out = ad * bd
    out = out.reshape(b.shape if side == "a" else a.shape)
    return _emit(out, (a, b), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(1 / (1 + exp(-x))), stable for large |x|."""
    z = x.data
    y = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _emit(y, (x,), lambda g: (g * _sigmoid(-z),))


def relu_plus(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0.0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu-plus": relu_plus,
}


def elementwise(op: str, *args: Tensor) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., n] + bias[n], the one row-broadcast the models need."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {bias.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every index of an operand must appear in the output
    or in the other operand."""
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    ad, bd = a.data, b.data
    try:
        out = np.einsum(spec, ad, bd)
    except ValueError as exc:
        raise DimensionError(f"einsum {spec}: shapes {a.shape} and {b.shape}: {exc}") from None

    def bw(g):
        return (np.einsum(f"{out_idx},{ib}->{ia}", g, bd), np.einsum(f"{ia},{out_idx}->{ib}", ad, g))

    return _emit(out, (a, b), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit(y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))


# ------------------------------------------------------------ restructuring


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in xs]
    out = np.concatenate(datas, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(out, tuple(xs), bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in xs], axis=axis)
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit(out, tuple(xs), bw)


def slice_(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit(x.data[idx], (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup, beam row selection)."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (full,)

    return _emit(np.take(x.data, idx, axis=axis), (x,), bw)


def pick(x: Tensor, cols) -> Tensor:
    """Row-wise gather: out[i] = x[i, cols[i]] for a 2-D ``x``."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _emit(x.data[rows, cols], (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    ax = axis % len(shape)
    return _emit(x.data.sum(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


# ----------------------------------------------------------------- optimizer


class Adagrad:
    """p <- p - lr * g / sqrt(G + eps), G the running sum of squared grads."""

    def __init__(self, params: Iterable[Tensor], lr: float, eps: float = 1e-10):
        self.params = list(params)
        self.lr = lr
        self.eps = eps
        self.accum = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, acc in zip(self.params, self.accum):
            if p.grad is None:
                continue
            g = p.grad
            acc += g * g
            p.data -= self.lr * g / np.sqrt(acc + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adagrad_step(opt: Adagrad) -> None:
    opt.step()


# --------------------------------------------------------------- checkpoint


def save_params(path, params: dict[str, Tensor]) -> None:
    lines = [CKPT_HEADER]
    for name, t in params.items():
        shape = "x".join(str(d) for d in t.shape) or "1"
        values = " ".join("%.17g" % v for v in t.data.reshape(-1))
        lines.append(f"{name} {shape} {values}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CKPT_HEADER:
            raise ValueError(f"{path}: not a checkpoint (header {header!r})")
        out: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            name, shape, *values = line.split()
            dims = tuple(int(d) for d in shape.split("x"))
            arr = np.array([float(v) for v in values], dtype=np.float64)
            if arr.size != int(np.prod(dims)):
                raise ValueError(f"{path}:{lineno}: {name} has {arr.size} values for shape {dims}")
            out[name] = arr.reshape(dims)
    return out
