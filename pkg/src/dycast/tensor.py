"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Only the primitives the network needs are provided. Each primitive computes its
forward value with numpy and, when a :class:`GradTape` is active and any input
requires a gradient, records a vector-Jacobian product closure on the tape.
Outside a tape the same functions are plain (fast) numerical kernels.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DegenerateMaskError",
    "TapeReuseError",
    "Tensor",
    "GradTape",
    "apply_op",
    "backward",
    "as_tensor",
    "add",
    "scale",
    "mul_along",
    "transpose",
    "take",
    "relu",
    "softmax",
    "conv1d_depthwise_causal",
    "layernorm",
    "rmsnorm",
    "readout",
    "mse",
    "l1_norm",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the operation."""


class DegenerateMaskError(ValueError):
    """A softmax row has every entry masked out."""


class TapeReuseError(RuntimeError):
    """``backward`` was called twice on the same tape."""


class Tensor:
    """A float64 array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "dycast_active_tape", default=None
)

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GradTape:
    """Ordered record of primitive ops executed while the tape is active.

    Use as a context manager::

        with GradTape() as tape:
            loss = ...
        grads = backward(tape, loss, params)
    """

    def __init__(self) -> None:
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Vjp]] = []
        self._consumed = False
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "GradTape":
        if self._consumed:
            raise TapeReuseError("cannot record on a tape that was already consumed")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Vjp) -> None:
        self._ops.append((out, inputs, vjp))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(out_data: np.ndarray, inputs: Iterable[Tensor], vjp: Vjp) -> Tensor:
    """Wrap a primitive's forward value and register its VJP if needed.

    ``vjp`` receives the output cotangent and returns one cotangent per input
    (``None`` where the input does not need one).
    """
    inputs = tuple(inputs)
    if not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(out, inputs, vjp)
    return out


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to each tensor in ``params``.

    Parameters the loss does not depend on get a zero gradient. A tape can be
    replayed only once.
    """
    if tape.consumed:
        raise TapeReuseError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    tape._consumed = True

    cot: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape._ops):
        g = cot.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in cot:
                cot[key] = cot[key] + gi
            else:
                cot[key] = gi
    tape._ops.clear()
    return [
        np.asarray(cot[id(p)], dtype=np.float64).reshape(p.shape)
        if id(p) in cot
        else np.zeros_like(p.data)
        for p in params
    ]


# -- elementwise and structural ops ------------------------------------------


def add(*xs) -> Tensor:
    ts = [as_tensor(x) for x in xs]
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"add: shapes {shape} and {t.shape} differ")
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data
    return apply_op(out, ts, lambda g: [g] * len(ts))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return apply_op(x.data * c, (x,), lambda g: (g * c,))


def mul_along(x, v, axis: int) -> Tensor:
    """Multiply a 2-D tensor by vector ``v`` broadcast along ``axis``.

    ``axis=0`` scales rows (``v`` has one entry per row), ``axis=1`` scales
    columns.
    """
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ShapeError(f"mul_along: cannot scale {x.shape} by {v.shape} on axis {axis}")
    vb = v.data[:, None] if axis == 0 else v.data[None, :]
    other = 1 - axis

    def vjp(g):
        return g * vb, (g * x.data).sum(axis=other)

    return apply_op(x.data * vb, (x, v), vjp)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return apply_op(x.data.T.copy(), (x,), lambda g: (g.T,))


def take(x, key) -> Tensor:
    """Basic (slice) indexing."""
    x = as_tensor(x)
    out = x.data[key].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return apply_op(out, (x,), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return apply_op(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


# -- softmax -----------------------------------------------------------------


def _softmax_rows(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateMaskError("softmax over an all -inf (fully masked) row")
    e = np.exp(v - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(v) -> Tensor:
    """Softmax over the last axis; ``-inf`` entries map to exactly zero."""
    v = as_tensor(v)
    if v.data.size == 0:
        raise ShapeError("softmax of an empty vector")
    p = _softmax_rows(v.data)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return apply_op(p, (v,), vjp)


# -- convolution ---------------------------------------------------------------


def _shift_right(x: np.ndarray, s: int) -> np.ndarray:
    """x[:, t - s] with zeros for t < s."""
    if s == 0:
        return x
    out = np.zeros_like(x)
    if s < x.shape[1]:
        out[:, s:] = x[:, : x.shape[1] - s]
    return out


def _shift_left(x: np.ndarray, s: int) -> np.ndarray:
    """x[:, t + s] with zeros past the end (adjoint of ``_shift_right``)."""
    if s == 0:
        return x
    out = np.zeros_like(x)
    if s < x.shape[1]:
        out[:, : x.shape[1] - s] = x[:, s:]
    return out


def conv1d_depthwise_causal(x, kernels, dilation: int) -> Tensor:
    """Per-channel dilated causal convolution on a ``channels x T`` input.

    ``out[c, t] = sum_j kernels[c, j] * x[c, t - (k-1-j)*dilation]`` with
    ``x[c, tau] = 0`` for ``tau < 0``: tap ``k-1`` is the current step and tap
    ``j`` looks ``(k-1-j)*dilation`` steps back.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 2 or kernels.data.ndim != 2:
        raise ShapeError("conv1d_depthwise_causal expects 2-D input and kernels")
    n, _ = x.shape
    if kernels.shape[0] != n:
        raise ShapeError(
            f"kernel channel count {kernels.shape[0]} != input channel count {n}"
        )
    k = kernels.shape[1]
    if k < 1 or dilation < 1:
        raise ShapeError(f"need k >= 1 and dilation >= 1, got k={k}, dilation={dilation}")
    w = kernels.data
    lags = [(k - 1 - j) * dilation for j in range(k)]
    shifted = [_shift_right(x.data, s) for s in lags]
    out = np.zeros_like(x.data)
    for j in range(k):
        out += w[:, j : j + 1] * shifted[j]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gw = np.empty_like(w)
        for j, s in enumerate(lags):
            gx += w[:, j : j + 1] * _shift_left(g, s)
            gw[:, j] = (g * shifted[j]).sum(axis=1)
        return gx, gw

    return apply_op(out, (x, kernels), vjp)


# -- normalisation (features on the last axis) -----------------------------------


def _as_rows(t: Tensor) -> tuple[np.ndarray, bool]:
    if t.data.ndim == 1:
        return t.data[None, :], True
    if t.data.ndim == 2:
        return t.data, False
    raise ShapeError(f"expected a vector or matrix, got shape {t.shape}")


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """``gain * (x - mean) / sqrt(var + eps) + bias`` over the last axis.

    Uses the population variance. Accepts one feature vector or a matrix of
    positions x features.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd, was_vec = _as_rows(x)
    f = xd.shape[1]
    if gain.shape != (f,) or bias.shape != (f,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({f},)")
    xc = xd - xd.mean(axis=1, keepdims=True)
    var = (xc * xc).mean(axis=1, keepdims=True)
    denom = np.sqrt(var + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        xhat = np.where(denom > 0, xc / np.where(denom > 0, denom, 1.0), 0.0)
    out = gain.data * xhat + bias.data

    def vjp(g):
        g2 = g[None, :] if was_vec else g
        dxhat = g2 * gain.data
        with np.errstate(invalid="ignore", divide="ignore"):
            inv = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        dgain = (g2 * xhat).sum(axis=0)
        dbias = g2.sum(axis=0)
        return (dx[0] if was_vec else dx), dgain, dbias

    return apply_op(out[0] if was_vec else out, (x, gain, bias), vjp)


def rmsnorm(x, gain, eps: float = 1e-5) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    xd, was_vec = _as_rows(x)
    f = xd.shape[1]
    if gain.shape != (f,):
        raise ShapeError(f"rmsnorm: gain must have shape ({f},)")
    r = np.sqrt((xd * xd).mean(axis=1, keepdims=True) + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        xhat = np.where(r > 0, xd / np.where(r > 0, r, 1.0), 0.0)
    out = gain.data * xhat

    def vjp(g):
        g2 = g[None, :] if was_vec else g
        dxhat = g2 * gain.data
        with np.errstate(invalid="ignore", divide="ignore"):
            inv = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
        dx = inv * (dxhat - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        dgain = (g2 * xhat).sum(axis=0)
        return (dx[0] if was_vec else dx), dgain

    return apply_op(out[0] if was_vec else out, (x, gain), vjp)


# -- read-out and losses ---------------------------------------------------------


def readout(h, weights, bias) -> Tensor:
    """Linear read-out across channels: ``weights @ h + bias`` (one value per column)."""
    h, weights, bias = as_tensor(h), as_tensor(weights), as_tensor(bias)
    if h.data.ndim != 2 or weights.shape != (h.shape[0],) or bias.data.size != 1:
        raise ShapeError(f"readout: bad shapes h={h.shape} w={weights.shape} b={bias.shape}")
    out = weights.data @ h.data + bias.data.reshape(())

    def vjp(g):
        return (
            np.outer(weights.data, g),
            h.data @ g,
            np.full(bias.shape, g.sum()),
        )

    return apply_op(out, (h, weights, bias), vjp)


def mse(pred, target) -> Tensor:
    """Mean squared error between a prediction tensor and a fixed target array."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    if target.size == 0:
        raise ShapeError("mse of empty vectors")
    r = pred.data - target
    m = r.size
    return apply_op(np.array((r * r).mean()), (pred,), lambda g: (g * 2.0 * r / m,))


def l1_norm(x) -> Tensor:
    x = as_tensor(x)
    sgn = np.sign(x.data)
    return apply_op(np.array(np.abs(x.data).sum()), (x,), lambda g: (g * sgn,))
