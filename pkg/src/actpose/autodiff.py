"""Dense float64 tensors with a tape-based reverse-mode gradient.

Operations run eagerly. While a :class:`GradTape` is active (``with
GradTape() as tape:``) each op appends a record holding whatever it needs
for its backward pass; :meth:`GradTape.gradient` then walks the records in
exact reverse order. Nothing is stored on the tensors themselves, so the
same tape can be differentiated any number of times.

The convolution-shaped ops accept either a single sequence ``(C, T)`` or a
batch ``(N, C, T)``; the batch axis is only there so training does not pay
Python overhead per window.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the dimension."""


class WindowUnderflowError(ShapeError):
    """Temporal axis too short for the requested valid convolution."""


class GradCheckError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_active: contextvars.ContextVar[GradTape | None] = contextvars.ContextVar("_active", default=None)


@dataclass
class GradTape:
    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> GradTape:
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)

    def record(self, op, inputs, output, backward) -> None:
        self.records.append(_Record(op, tuple(inputs), output, backward))

    def gradient(self, root: Tensor, sources: Sequence[Tensor], loss_grad: float = 1.0) -> list[np.ndarray]:
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.full(root.shape, float(loss_grad))}
        for rec in reversed(self.records):
            upstream = grads.get(id(rec.output))
            if upstream is None:
                continue
            for tensor, g in zip(rec.inputs, rec.backward(upstream)):
                if g is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return [grads[id(s)] if id(s) in grads else np.zeros(s.shape) for s in sources]


def backward(tape: GradTape, root: Tensor, params: Sequence[Tensor], loss_grad: float = 1.0) -> list[np.ndarray]:
    """Reverse-mode gradients of the scalar ``root`` with respect to ``params``."""
    return tape.gradient(root, params, loss_grad)


def record_op(op: str, inputs, output: Tensor, bwd) -> Tensor:
    """Register ``output`` on the active tape (if any) and return it.

    ``bwd`` maps the upstream gradient to one gradient per input, in order.
    """
    tape = _active.get()
    if tape is not None:
        tape.record(op, inputs, output, bwd)
    return output


def _as_batch(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 2:
        return x.data[None], True
    if x.data.ndim == 3:
        return x.data, False
    raise ShapeError(f"expected (C, T) or (N, C, T) input, got rank {x.data.ndim}")


def conv1d_dilated(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Valid (unpadded) dilated cross-correlation along the last axis.

    ``out[o, t] = bias[o] + sum_c sum_k weight[o, c, k] * x[c, t + k*dilation]``
    """
    if dilation < 1:
        raise ValueError(f"dilation must be a positive int, got {dilation}")
    xb, squeeze = _as_batch(x)
    if weight.data.ndim != 3:
        raise ShapeError(f"weight must be (C_out, C_in, K), got shape {weight.shape}")
    n_out, n_in, width = weight.shape
    if xb.shape[1] != n_in:
        raise ShapeError(f"input channels: input has C_in={xb.shape[1]}, weight expects C_in={n_in}")
    if bias.shape != (n_out,):
        raise ShapeError(f"bias: expected shape ({n_out},) to match C_out, got {bias.shape}")
    length = xb.shape[2]
    span = (width - 1) * dilation + 1
    if length < span:
        raise WindowUnderflowError(
            f"window underflow: T={length} is shorter than the kernel span {span} (K={width}, dilation={dilation})"
        )
    out = _kernels.conv_forward(xb, weight.data, bias.data, dilation)

    def bwd(g):
        return _conv_backward(g, squeeze, xb, weight.data, dilation)

    return record_op("conv1d_dilated", (x, weight, bias), Tensor(out[0] if squeeze else out), bwd)


def _conv_backward(g, squeeze, xb, w, dilation):
    g3 = np.ascontiguousarray(g[None] if squeeze else g)
    gx = _kernels.conv_backward_input(g3, w, xb.shape[2], dilation)
    gw, gbias = _kernels.conv_backward_params(g3, xb, w.shape[2], dilation)
    return (gx[0] if squeeze else gx), gw.transpose(2, 0, 1), gbias


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-frame affine map, ``(C_in, T) -> (C_out, T)``; a 1x1 convolution."""
    if weight.data.ndim != 2:
        raise ShapeError(f"weight must be (C_out, C_in), got shape {weight.shape}")
    xb, squeeze = _as_batch(x)
    n_out, n_in = weight.shape
    if xb.shape[1] != n_in:
        raise ShapeError(f"inner dimension: input has C_in={xb.shape[1]}, weight has C_in={n_in}")
    if bias.shape != (n_out,):
        raise ShapeError(f"bias: expected shape ({n_out},) to match C_out, got {bias.shape}")
    w3 = np.ascontiguousarray(weight.data[:, :, None])
    out = _kernels.conv_forward(xb, w3, bias.data, 1)

    def bwd(g):
        gx, gw, gbias = _conv_backward(g, squeeze, xb, w3, 1)
        return gx, gw[:, :, 0], gbias

    return record_op("linear", (x, weight, bias), Tensor(out[0] if squeeze else out), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", (x,), Tensor(np.where(mask, x.data, 0.0)), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record_op("add", (a, b), Tensor(a.data + b.data), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return record_op("scale", (x,), Tensor(x.data * factor), lambda g: (g * factor,))


def crop_time(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of the last (time) axis."""
    length = x.shape[-1]
    if not 0 <= start <= stop <= length:
        raise ShapeError(f"crop [{start}, {stop}) outside time axis of length {length}")

    def bwd(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return record_op("crop_time", (x,), Tensor(x.data[..., start:stop]), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return record_op("reshape", (x,), Tensor(x.data.reshape(shape)), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return record_op("transpose", (x,), Tensor(x.data.transpose(axes)), lambda g: (g.transpose(inverse),))


def total(x: Tensor) -> Tensor:
    """Sum of all elements, correctly rounded (independent of order)."""
    s = math.fsum(x.data.reshape(-1).tolist())
    return record_op("total", (x,), Tensor(np.array(s)), lambda g: (np.full(x.shape, np.asarray(g).reshape(-1)[0]),))


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Max per-coordinate relative error between tape and central-difference gradients.

    ``f`` must rebuild its scalar output from the current contents of
    ``params``. Each coordinate's error is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates whose true gradient is ~0 from dividing by
    round-off.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with GradTape() as tape:
        root = f()
    if not np.isfinite(root.data).all():
        raise GradCheckError(f"f is not finite: {root.data}")
    analytic = tape.gradient(root, params)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = f().item()
            flat[i] = keep - eps
            down = f().item()
            flat[i] = keep
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError(f"f is not finite near coordinate {i} of a {p.shape} parameter")
            numeric = (up - down) / (2 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), floor)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def fresh(cls, params: Sequence[Tensor]) -> AdamState:
        return cls(0, [np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, hyper: AdamConfig):
    """Bias-corrected Adam update, applied to ``params`` in place.

    Returns ``(params, state)``; ``state.step`` grows by exactly one.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adam: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam: param {p.shape}, grad {g.shape}, moment {m.shape} differ")
    step = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    state.step = step
    return params, state
