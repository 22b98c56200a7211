"""Temporal lifting network: a window of 2D keypoints in, the 3D pose of its
centre frame out.

Layout of a window is ``(2J, F)``: row ``2j`` holds joint ``j``'s x pixel
coordinate, row ``2j + 1`` its y. The network is fully convolutional along
time, so the same parameters applied to a whole clip yield every
sliding-window prediction at once (:func:`predict_sequence`).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    conv1d_dilated,
    crop_time,
    linear,
    record_op,
    relu,
    reshape,
    scale,
    transpose,
)

KERNEL = 3
CHECKPOINT_MAGIC = b"PLM1"
_SPEC_STRUCT = struct.Struct("<4IQ4d")


class WindowLengthError(ShapeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LiftNetSpec:
    joints: int
    blocks: int
    channels: int = 64
    kernel: int = KERNEL
    seed: int = 0
    # fixed pixel normalisation folded into the model, and the mm per unit
    # of the output head
    input_center: tuple[float, float] = (0.0, 0.0)
    input_scale: float = 1.0
    output_scale: float = 1000.0

    def __post_init__(self):
        if self.joints < 2:
            raise ValueError(f"need at least 2 joints, got {self.joints}")
        if self.blocks < 0:
            raise ValueError(f"blocks must be >= 0, got {self.blocks}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.kernel != KERNEL:
            raise ValueError(f"kernel width is fixed at {KERNEL}")
        if self.input_scale <= 0 or self.output_scale <= 0:
            raise ValueError("input_scale and output_scale must be positive")

    @property
    def receptive_field(self) -> int:
        return KERNEL**self.blocks

    @property
    def dilations(self) -> list[int]:
        return [KERNEL**b for b in range(self.blocks)]


def blocks_for_receptive_field(frames: int) -> int:
    """Inverse of ``3**B``; raises for anything that is not a power of three."""
    blocks = 0
    value = 1
    while value < frames:
        value *= KERNEL
        blocks += 1
    if value != frames:
        valid = ", ".join(str(KERNEL**b) for b in range(7))
        raise ValueError(f"receptive field {frames} is not a power of 3; valid values: {valid}, ...")
    return blocks


@dataclass
class LiftNetParams:
    spec: LiftNetSpec
    proj_w: Tensor
    proj_b: Tensor
    block_w: list[Tensor] = field(default_factory=list)
    block_b: list[Tensor] = field(default_factory=list)
    head_w: Tensor = None
    head_b: Tensor = None
    # second per-frame layer, present only for the context-free B=0 model
    hidden_w: Tensor | None = None
    hidden_b: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        """All trainable tensors in declaration (and checkpoint) order."""
        out = [self.proj_w, self.proj_b]
        if self.hidden_w is not None:
            out += [self.hidden_w, self.hidden_b]
        for w, b in zip(self.block_w, self.block_b):
            out += [w, b]
        out += [self.head_w, self.head_b]
        return out

    def copy(self) -> LiftNetParams:
        clone = _empty_params(self.spec)
        for dst, src in zip(clone.tensors(), self.tensors()):
            dst.data[...] = src.data
        return clone


def _param_shapes(spec: LiftNetSpec) -> list[tuple[int, ...]]:
    j2, c = 2 * spec.joints, spec.channels
    shapes = [(c, j2), (c,)]
    if spec.blocks == 0:
        shapes += [(c, c), (c,)]
    for _ in range(spec.blocks):
        shapes += [(c, c, KERNEL), (c,)]
    shapes += [(3 * spec.joints, c), (3 * spec.joints,)]
    return shapes


def _assemble(spec: LiftNetSpec, tensors: list[Tensor]) -> LiftNetParams:
    it = iter(tensors)
    params = LiftNetParams(spec, next(it), next(it))
    if spec.blocks == 0:
        params.hidden_w, params.hidden_b = next(it), next(it)
    for _ in range(spec.blocks):
        params.block_w.append(next(it))
        params.block_b.append(next(it))
    params.head_w, params.head_b = next(it), next(it)
    return params


def _empty_params(spec: LiftNetSpec) -> LiftNetParams:
    return _assemble(spec, [Tensor(np.zeros(s)) for s in _param_shapes(spec)])


def build(spec: LiftNetSpec) -> LiftNetParams:
    """Seeded He-uniform weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.Generator(np.random.Philox(spec.seed))
    tensors = []
    for shape in _param_shapes(spec):
        if len(shape) == 1:
            tensors.append(Tensor(np.zeros(shape)))
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        tensors.append(Tensor(rng.uniform(-bound, bound, size=shape)))
    return _assemble(spec, tensors)


def _normalize(spec: LiftNetSpec, x: np.ndarray) -> np.ndarray:
    center = np.tile(np.asarray(spec.input_center, dtype=np.float64), spec.joints)[:, None]
    return (x - center) / spec.input_scale


def center_root(poses: Tensor) -> Tensor:
    """Subtract joint 0 from every joint of ``(..., J, 3)`` poses."""
    data = poses.data - poses.data[..., :1, :]

    def bwd(g):
        gx = g.copy()
        gx[..., 0, :] -= g.sum(axis=-2)
        return (gx,)

    return record_op("center_root", (poses,), Tensor(data), bwd)


def network(params: LiftNetParams, x: np.ndarray) -> Tensor:
    """Run the model on pixel input ``(N, 2J, T)``; returns ``(N, T - F + 1, J, 3)`` mm."""
    spec = params.spec
    h = Tensor(_normalize(spec, x))
    h = relu(linear(h, params.proj_w, params.proj_b))
    if spec.blocks == 0:
        h = relu(linear(h, params.hidden_w, params.hidden_b))
    for w, b, d in zip(params.block_w, params.block_b, spec.dilations):
        y = relu(conv1d_dilated(h, w, b, d))
        h = add(crop_time(h, d, h.shape[-1] - d), y)
    out = scale(linear(h, params.head_w, params.head_b), spec.output_scale)
    n, _, t = out.shape
    out = transpose(reshape(out, (n, spec.joints, 3, t)), (0, 3, 1, 2))
    return center_root(out)


def _check_rows(params: LiftNetParams, rows: int) -> None:
    if rows != 2 * params.spec.joints:
        raise ShapeError(f"keypoint rows: expected 2J={2 * params.spec.joints}, got {rows}")


def forward(params: LiftNetParams, window: Tensor) -> Tensor:
    """Root-relative 3D pose ``(J, 3)`` in mm for the centre frame of ``window``."""
    rows, frames = window.shape
    _check_rows(params, rows)
    f = params.spec.receptive_field
    if frames != f:
        kind = "underflow" if frames < f else "overflow"
        raise WindowLengthError(f"window {kind}: got {frames} frames, receptive field is {f}")
    out = network(params, window.data[None])
    return reshape(out, (params.spec.joints, 3))


def forward_batch(params: LiftNetParams, windows: np.ndarray) -> Tensor:
    """Batched :func:`forward`: ``(N, 2J, F)`` -> ``(N, J, 3)``."""
    n, rows, frames = windows.shape
    _check_rows(params, rows)
    f = params.spec.receptive_field
    if frames != f:
        kind = "underflow" if frames < f else "overflow"
        raise WindowLengthError(f"window {kind}: got {frames} frames, receptive field is {f}")
    out = network(params, windows)
    return reshape(out, (n, params.spec.joints, 3))


def predict_sequence(params: LiftNetParams, clip2d: Tensor) -> Tensor:
    """Predictions for every full window of a ``(2J, T)`` clip.

    Output row ``s`` is the pose of frame ``s + (F - 1) // 2``.
    """
    rows, length = clip2d.shape
    _check_rows(params, rows)
    f = params.spec.receptive_field
    if length < f:
        raise WindowLengthError(f"window underflow: clip has {length} frames, receptive field is {f}")
    out = network(params, clip2d.data[None])
    return Tensor(out.data[0])


def clip_to_rows(joints2d: np.ndarray) -> np.ndarray:
    """``(T, J, 2)`` keypoints to the ``(2J, T)`` row layout."""
    t, j, _ = joints2d.shape
    return np.ascontiguousarray(joints2d.reshape(t, 2 * j).T)


def loss_mpjpe(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean root-relative per-joint distance over all leading axes and joints.

    Differentiable wherever no per-joint distance is exactly zero; at zero
    the gradient contribution is defined as 0.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    r = (pred.data - pred.data[..., :1, :]) - (gt - gt[..., :1, :])
    dist = np.sqrt(np.einsum("...k,...k->...", r, r))
    count = dist.size
    value = math.fsum(dist.reshape(-1).tolist()) / count

    def bwd(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[..., None] > 0, r / dist[..., None], 0.0)
        gp = unit * (np.asarray(g).reshape(-1)[0] / count)
        gp[..., 0, :] -= gp.sum(axis=-2)
        return (gp,)

    return record_op("loss_mpjpe", (pred,), Tensor(np.array(value)), bwd)


def save_checkpoint(params: LiftNetParams, path: str | Path) -> None:
    s = params.spec
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(
        _SPEC_STRUCT.pack(
            s.joints, s.blocks, s.channels, s.kernel, s.seed,
            s.input_center[0], s.input_center[1], s.input_scale, s.output_scale,
        )
    )
    for t in params.tensors():
        buf.write(t.data.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> LiftNetParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    j, b, c, k, seed, cx, cy, in_scale, out_scale = _SPEC_STRUCT.unpack_from(raw, 4)
    spec = LiftNetSpec(j, b, c, k, seed, (cx, cy), in_scale, out_scale)
    offset = 4 + _SPEC_STRUCT.size
    tensors = []
    for shape in _param_shapes(spec):
        n = int(np.prod(shape))
        chunk = raw[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated parameter data")
        tensors.append(Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape)))
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return _assemble(spec, tensors)
