"""Differentiable primitives. Each records its forward value and adjoint."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tape import Buffer, ShapeError, Tape


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Buffer):
            return x.tape
    raise ValueError("at least one argument must be a Buffer")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Buffer, b: Buffer) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Buffer:
    t = _tape_of(a, b)
    a, b = t.lift(a), t.lift(b)
    _check_broadcast("add", a, b)
    return t.record("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Buffer:
    t = _tape_of(a, b)
    a, b = t.lift(a), t.lift(b)
    _check_broadcast("subtract", a, b)
    return t.record("subtract", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> Buffer:
    t = _tape_of(a, b)
    a, b = t.lift(a), t.lift(b)
    _check_broadcast("multiply", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return t.record("multiply", a.data * b.data, (a, b), bw)


def divide_eps(a, d, eps: float = 1e-8) -> Buffer:
    """a / max(d, eps); the gradient goes through the clamped denominator."""
    if not eps > 0:
        raise ValueError("divide_eps requires eps > 0")
    t = _tape_of(a, d)
    a, d = t.lift(a), t.lift(d)
    _check_broadcast("divide_eps", a, d)
    den = np.maximum(d.data, eps)
    out = a.data / den

    def bw(g):
        ga = _unbroadcast(g / den, a.shape) if a.requires_grad else None
        gd = None
        if d.requires_grad:
            gd = _unbroadcast(-g * out / den * (d.data >= eps), d.shape)
        return ga, gd

    return t.record("divide_eps", out, (a, d), bw)


def scale(a: Buffer, s: float) -> Buffer:
    s = float(s)
    return a.tape.record("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a: Buffer) -> Buffer:
    mask = a.data > 0
    return a.tape.record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Buffer) -> Buffer:
    y = np.tanh(a.data)
    return a.tape.record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Buffer) -> Buffer:
    y = _sigmoid(a.data)
    return a.tape.record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a: Buffer, axis: int = -1) -> Buffer:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return a.tape.record("softmax", y, (a,), bw)


def dense(x: Buffer, w: Buffer, b: Buffer | None = None) -> Buffer:
    """x (N, in) @ w (in, out) + b (out,)."""
    t = _tape_of(x, w)
    x, w = t.lift(x), t.lift(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: cannot apply weight {w.shape} to input {x.shape}")
    out = x.data @ w.data
    inputs: tuple[Buffer, ...] = (x, w)
    if b is not None:
        b = t.lift(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias shape {b.shape} does not match output {w.shape[1]}")
        out = out + b.data
        inputs = (x, w, b)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return t.record("dense", out, inputs, bw)


def sum(a: Buffer, axis=None, keepdims: bool = False) -> Buffer:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return a.tape.record("sum", out, (a,), bw)


def mean(a: Buffer, axis=None, keepdims: bool = False) -> Buffer:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def l2_norm(a: Buffer, axis=None, keepdims: bool = False) -> Buffer:
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def bw(g):
        nk = n if (axis is None or keepdims) else np.expand_dims(n, axis)
        gk = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        safe = np.where(nk > 0, nk, 1.0)
        return (np.where(nk > 0, gk * a.data / safe, 0.0),)

    return a.tape.record("l2_norm", n, (a,), bw)


def l1_loss(a, b) -> Buffer:
    """Mean absolute difference."""
    t = _tape_of(a, b)
    a, b = t.lift(a), t.lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    sgn = np.sign(diff) / n
    return t.record("l1_loss", np.abs(diff).sum() / n, (a, b), lambda g: (g * sgn, -g * sgn))


def bce_with_logits(logits: Buffer, targets) -> Buffer:
    """Mean binary cross-entropy, computed stably from logits."""
    t = logits.tape
    y = np.asarray(targets.data if isinstance(targets, Buffer) else targets, dtype=t.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    p = _sigmoid(x)
    return t.record("bce_with_logits", per.sum() / n, (logits,), lambda g: (g * (p - y) / n,))


def concat(bufs: Sequence[Buffer], axis: int = -1) -> Buffer:
    t = _tape_of(*bufs)
    bufs = [t.lift(b) for b in bufs]
    try:
        out = np.concatenate([b.data for b in bufs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[b.shape for b in bufs]}") from None
    sizes = np.cumsum([b.shape[axis] for b in bufs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return t.record("concat", out, bufs, bw)


def stop_gradient(a: Buffer) -> Buffer:
    a.tape.stop_gradient_count += 1
    return Buffer(a.data, a.tape, False, "value")


# structural helpers ---------------------------------------------------------

def reshape(a: Buffer, shape) -> Buffer:
    return a.tape.record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Buffer, key) -> Buffer:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return a.tape.record("getitem", a.data[key], (a,), bw)


def columns(a: Buffer, start: int, stop: int) -> Buffer:
    """a[:, start:stop] with a cheap slice adjoint."""
    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return a.tape.record("columns", a.data[:, start:stop], (a,), bw)


def take_rows(a: Buffer, idx: np.ndarray) -> Buffer:
    """a[idx] along axis 0; adjoint scatters rows back."""
    idx = np.asarray(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return a.tape.record("take_rows", a.data[idx], (a,), bw)


def broadcast_to(a: Buffer, shape) -> Buffer:
    return a.tape.record("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,),
                         lambda g: (_unbroadcast(g, a.shape),))


def square(a: Buffer) -> Buffer:
    return a.tape.record("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def weighted_sum(parts: Sequence[tuple[float, Buffer]]) -> Buffer:
    """Σ w_i · x_i for scalar weights."""
    out = None
    for w, x in parts:
        term = scale(x, w)
        out = term if out is None else add(out, term)
    return out


def _select(a: Buffer, axis: int, pick, op: str) -> Buffer:
    idx = np.expand_dims(pick(a.data, axis=axis), axis)  # first extremum wins ties
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return a.tape.record(op, out, (a,), bw)


def max_along(a: Buffer, axis: int = -1) -> Buffer:
    """Maximum along an axis; the gradient goes to the (first) argmax."""
    return _select(a, axis, np.argmax, "max_along")


def min_along(a: Buffer, axis: int = -1) -> Buffer:
    return _select(a, axis, np.argmin, "min_along")


def scatter_rows(a: Buffer, idx: np.ndarray, n: int) -> Buffer:
    """Place the rows of a at positions idx of a zero (n, ...) array."""
    idx = np.asarray(idx)
    out = np.zeros((n,) + a.shape[1:], dtype=a.data.dtype)
    out[idx] = a.data
    return a.tape.record("scatter_rows", out, (a,), lambda g: (g[idx],))
