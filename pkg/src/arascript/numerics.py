"""Dense float64 tensors with tape-based reverse-mode differentiation.

Small enough to audit, exact enough to verify: every operation records a
backward closure on the active tape, and :func:`grad_check` compares any
analytic gradient against central finite differences. All math is 64-bit
and single-threaded per tape, so identical inputs give bit-identical
results.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_local = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Ordered record of backward closures for one forward pass."""

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise NumericError("nested tapes are not supported")
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = None


class Tensor:
    """A float64 array, optionally gradient-tracked."""

    __slots__ = ("values", "requires_grad", "grad", "tape")

    def __init__(self, values, requires_grad: bool = False) -> None:
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _record(out: Tensor, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.records.append((out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    out = Tensor(values)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    out = Tensor(values)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _record(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.values * s)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * s)

    return _record(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim < 2 or b.values.ndim < 2 \
            or a.values.ndim != b.values.ndim \
            or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(a.values @ b.values)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g @ b.values.swapaxes(-1, -2))
        _accumulate(b, a.values.swapaxes(-1, -2) @ g)

    return _record(out, (a, b), backward)


def row_softmax(a: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def backward(g: np.ndarray) -> None:
        dot = (g * s).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - dot) * s)

    return _record(out, (a,), backward)


_LOG_FLOOR = 1e-300


def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.values, _LOG_FLOOR)
    out = Tensor(np.log(clamped))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g / clamped)

    return _record(out, (a,), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out = Tensor(np.maximum(a.values, floor))
    passthrough = a.values >= floor

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * passthrough)

    return _record(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-form GeLU; odd at zero, smooth everywhere."""
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
        _accumulate(a, g * deriv)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if gain.shape != a.shape[-1:] or bias.shape != a.shape[-1:]:
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    x = a.values
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gain.values * xhat + bias.values)

    def backward(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        dxhat = g * gain.values
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv ** 3
        dmu = (-dxhat * inv).sum(axis=-1, keepdims=True) \
            + dvar * (-2.0 * xc).mean(axis=-1, keepdims=True)
        _accumulate(a, dxhat * inv + dvar * 2.0 * xc / d + dmu / d)

    return _record(out, (a, gain, bias), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1 or table.values.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding_lookup", table.shape, (int(idx.max()),))
    out = Tensor(table.values[idx])

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.values)
            np.add.at(table.grad, idx, g)

    return _record(out, (table,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    out = Tensor(values)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(sl)])
            offset += size

    return _record(out, tuple(tensors), backward)


def mean_over_axis(a: Tensor, axis: int = 0) -> Tensor:
    out = Tensor(a.values.mean(axis=axis))
    size = a.shape[axis]

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.expand_dims(g, axis).repeat(size, axis) / size)

    return _record(out, (a,), backward)


def masked_select(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows along axis 0; backward scatters back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("masked_select", a.shape, (int(idx.max()),))
    out = Tensor(a.values[idx])

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.values)
            np.add.at(a.grad, idx, g)

    return _record(out, (a,), backward)


def gather_cols(a: Tensor, cols: Sequence[int]) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-D input."""
    idx = np.asarray(cols, dtype=np.intp)
    if a.values.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("gather_cols", a.shape, idx.shape)
    rows = np.arange(a.shape[0])
    out = Tensor(a.values[rows, idx])

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.values)
            np.add.at(a.grad, (rows, idx), g)

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    out = Tensor(np.transpose(a.values, axes))
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.transpose(g, inverse))

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        values = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    out = Tensor(values)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _record(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum())

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.full(a.shape, float(g)))

    return _record(out, (a,), backward)


def backward(loss: Tensor) -> None:
    """Populate gradients of every tracked ancestor of a scalar loss."""
    if loss.values.size != 1:
        raise NumericError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise NumericError("loss was not produced under an active tape")
    loss.grad = np.ones_like(loss.values)
    for out, fn in reversed(loss.tape.records):
        if out.grad is None:
            continue
        fn(out.grad)


def check_finite(t: Tensor, context: str) -> Tensor:
    if not np.all(np.isfinite(t.values)):
        raise NumericError(f"non-finite values in {context}")
    return t


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5, samples: int = 200,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic closure over ``params`` returning a
    scalar. A seeded subset of coordinates is probed; each relative error
    is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError(f"grad_check eps {eps} outside [1e-7, 1e-3]")
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        if not np.isfinite(loss.values).all():
            raise NumericError("grad_check: loss is not finite")
        backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.values)
                for p in params]

    coords = [(pi, i) for pi, p in enumerate(params)
              for i in range(p.values.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > samples:
        chosen = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[int(c)] for c in chosen]

    worst = 0.0
    for pi, i in coords:
        flat = params[pi].values.reshape(-1)
        saved = flat[i]
        flat[i] = saved + eps
        up = f().item()
        flat[i] = saved - eps
        down = f().item()
        flat[i] = saved
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError("grad_check: non-finite probe value")
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[pi].reshape(-1)[i])
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, rel)
    return worst
