"""Deterministic, action-labelled synthetic motion capture.

Each action owns a motion signature: every joint's three local rotation
angles follow sinusoids whose amplitude, frequency, phase and offset are
drawn from that action's random stream. Subjects rescale amplitude and
tempo slightly; every clip jitters the signature and picks its own body
yaw. Poses come out of forward kinematics, so bone lengths are exact.

Random streams are Philox (a counter-based 64-bit generator) keyed by
``SeedSequence(seed, spawn_key=...)``; each (action, subject, clip) triple
has its own stream, so clips can be generated in any order.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"PLB1"

ACTION_NAMES = (
    "Dir", "Disc", "Eat", "Greet", "Phone", "Photo", "Pose", "Purch",
    "Sit", "SitD", "Smoke", "Wait", "WkD", "Walk", "WkT",
)

# stream namespaces for spawn keys
_ACTION, _SUBJECT, _CLIP, _SPLIT = 0, 1, 2, 3


class SkeletonError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def action_name(action: int) -> str:
    return ACTION_NAMES[action] if action < len(ACTION_NAMES) else f"A{action}"


def action_id(label: str | int, n_ac: int) -> int:
    """Resolve a label ("Eat") or numeric id ("2") to an action id."""
    if isinstance(label, int) or str(label).isdigit():
        idx = int(label)
    else:
        names = [action_name(a).lower() for a in range(n_ac)]
        key = str(label).lower().rstrip(".")
        if key not in names:
            raise KeyError(f"unknown action {label!r}; known: {', '.join(action_name(a) for a in range(n_ac))}")
        idx = names.index(key)
    if not 0 <= idx < n_ac:
        raise KeyError(f"action id {idx} outside 0..{n_ac - 1}")
    return idx


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class SkeletonSpec:
    """Kinematic tree. ``parent[0] == 0`` marks the root; every other parent
    index must be smaller than its child. ``bone_lengths[j - 1]`` and
    ``rest_dirs[j - 1]`` describe the bone ending at joint ``j``."""

    parent: tuple[int, ...]
    bone_lengths: tuple[float, ...]
    rest_dirs: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        n = len(self.parent)
        if n < 1 or self.parent[0] != 0:
            raise SkeletonError("joint 0 must be the root (parent[0] == 0)")
        for j in range(1, n):
            if not 0 <= self.parent[j] < j:
                raise SkeletonError(f"joint {j}: parent {self.parent[j]} must precede it")
        if len(self.bone_lengths) != n - 1 or len(self.rest_dirs) != n - 1:
            raise SkeletonError(f"need {n - 1} bone lengths and rest directions")
        if any(not (length > 0) for length in self.bone_lengths):
            raise SkeletonError("bone lengths must be positive")
        for d in self.rest_dirs:
            if abs(math.hypot(*d) - 1.0) > 1e-12:
                raise SkeletonError(f"rest direction {d} is not a unit vector")

    @property
    def joints(self) -> int:
        return len(self.parent)


def human17() -> SkeletonSpec:
    """17-joint body (hip root, legs, spine, head, arms); y is up, z is depth."""
    down, up, left, right = (0.0, -1.0, 0.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0), (-1.0, 0.0, 0.0)
    bones = [
        # (parent, length mm, direction)
        (0, 130.0, right), (1, 450.0, down), (2, 440.0, down),    # right leg
        (0, 130.0, left), (4, 450.0, down), (5, 440.0, down),     # left leg
        (0, 230.0, up), (7, 250.0, up), (8, 110.0, up), (9, 115.0, up),  # spine, neck, head
        (8, 150.0, left), (11, 280.0, down), (12, 250.0, down),   # left arm
        (8, 150.0, right), (14, 280.0, down), (15, 250.0, down),  # right arm
    ]
    return SkeletonSpec(
        parent=(0,) + tuple(b[0] for b in bones),
        bone_lengths=tuple(b[1] for b in bones),
        rest_dirs=tuple(b[2] for b in bones),
    )


@dataclass(frozen=True)
class Camera:
    scale: float = 0.5  # px per mm
    principal: tuple[float, float] = (500.0, 500.0)


@dataclass
class PoseClip:
    action: int
    subject: int
    joints3d: np.ndarray  # (T, J, 3) mm
    joints2d: np.ndarray  # (T, J, 2) px

    @property
    def frames(self) -> int:
        return self.joints3d.shape[0]


@dataclass
class Dataset:
    clips: list[PoseClip]
    n_ac: int
    joints: int

    def __post_init__(self):
        if self.n_ac < 1:
            raise ValueError("n_ac must be >= 1")

    def frame_totals(self) -> dict[int, int]:
        totals = {a: 0 for a in range(self.n_ac)}
        for clip in self.clips:
            totals[clip.action] += clip.frames
        return totals

    def clips_of(self, action: int) -> list[PoseClip]:
        return [c for c in self.clips if c.action == action]


@dataclass(frozen=True)
class GenConfig:
    n_ac: int = 15
    subjects: int = 2
    clips_per_action: int = 4
    frames_per_clip: int = 500
    noise_px: float = 1.0
    seed: int = 0
    fps: float = 50.0
    skeleton: SkeletonSpec = field(default_factory=human17)
    camera: Camera = field(default_factory=Camera)


def project_weak_perspective(pose3d: np.ndarray, camera: Camera) -> np.ndarray:
    """``(..., J, 3)`` mm -> ``(..., J, 2)`` px; depth is dropped."""
    if camera.scale <= 0:
        raise ValueError("camera scale must be positive")
    return camera.scale * pose3d[..., :2] + np.asarray(camera.principal)


def _rotations(angles: np.ndarray) -> np.ndarray:
    """Euler angles ``(T, 3)`` (x, y, z) -> rotation matrices ``Rz Ry Rx``, ``(T, 3, 3)``."""
    cx, cy, cz = np.cos(angles).T
    sx, sy, sz = np.sin(angles).T
    r = np.empty(angles.shape[:1] + (3, 3))
    r[:, 0, 0] = cz * cy
    r[:, 0, 1] = cz * sy * sx - sz * cx
    r[:, 0, 2] = cz * sy * cx + sz * sx
    r[:, 1, 0] = sz * cy
    r[:, 1, 1] = sz * sy * sx + cz * cx
    r[:, 1, 2] = sz * sy * cx - cz * sx
    r[:, 2, 0] = -sy
    r[:, 2, 1] = cy * sx
    r[:, 2, 2] = cy * cx
    return r


def forward_kinematics(skeleton: SkeletonSpec, root_pos: np.ndarray, local_angles: np.ndarray) -> np.ndarray:
    """Joint positions ``(T, J, 3)`` from root translation ``(T, 3)`` and
    per-joint local Euler angles ``(T, J, 3)`` (entry 0 is the root's)."""
    t = root_pos.shape[0]
    glob = np.empty((t, skeleton.joints, 3, 3))
    pos = np.empty((t, skeleton.joints, 3))
    glob[:, 0] = _rotations(local_angles[:, 0])
    pos[:, 0] = root_pos
    for j in range(1, skeleton.joints):
        p = skeleton.parent[j]
        glob[:, j] = glob[:, p] @ _rotations(local_angles[:, j])
        bone = skeleton.bone_lengths[j - 1] * np.asarray(skeleton.rest_dirs[j - 1])
        pos[:, j] = pos[:, p] + glob[:, j] @ bone
    return pos


@dataclass(frozen=True)
class _Signature:
    amp: np.ndarray     # (J, 3) rad
    freq: np.ndarray    # (J, 3) Hz
    phase: np.ndarray   # (J, 3) rad
    offset: np.ndarray  # (J, 3) rad


def _action_signature(seed: int, action: int, joints: int) -> _Signature:
    rng = stream(seed, _ACTION, action)
    shape = (joints, 3)
    amp = rng.uniform(0.05, 0.6, shape)
    amp[0] *= 0.25  # whole-body rotation stays moderate
    return _Signature(
        amp=amp,
        freq=rng.uniform(0.3, 2.0, shape),
        phase=rng.uniform(0.0, 2 * math.pi, shape),
        offset=rng.uniform(-0.25, 0.25, shape),
    )


def _generate_clip(cfg: GenConfig, sig: _Signature, action: int, subject: int, index: int) -> PoseClip:
    srng = stream(cfg.seed, _SUBJECT, subject)
    amp_scale, tempo = srng.uniform(0.85, 1.15), srng.uniform(0.97, 1.03)

    rng = stream(cfg.seed, _CLIP, action, subject, index)
    j = cfg.skeleton.joints
    amp = sig.amp * amp_scale * rng.uniform(0.9, 1.1, (j, 3))
    freq = sig.freq * tempo * rng.uniform(0.98, 1.02, (j, 3))
    phase = sig.phase + rng.uniform(-0.5, 0.5, (j, 3))
    yaw = rng.uniform(-math.pi / 6, math.pi / 6)
    sway = rng.uniform(-40.0, 40.0, 3)

    time = np.arange(cfg.frames_per_clip) / cfg.fps
    angles = sig.offset + amp * np.sin(2 * math.pi * freq * time[:, None, None] + phase)
    angles[:, 0, 1] += yaw
    root = np.array([0.0, 0.0, 4000.0]) + np.sin(2 * math.pi * 0.2 * time)[:, None] * sway

    joints3d = forward_kinematics(cfg.skeleton, root, angles)
    joints2d = project_weak_perspective(joints3d, cfg.camera)
    if cfg.noise_px > 0:
        joints2d = joints2d + rng.normal(0.0, cfg.noise_px, joints2d.shape)
    return PoseClip(action, subject, joints3d, joints2d)


def gen_dataset(cfg: GenConfig = GenConfig()) -> Dataset:
    """Generate ``n_ac * clips_per_action`` clips; clip ``c`` of an action
    belongs to subject ``c % subjects``."""
    for name in ("n_ac", "subjects", "clips_per_action", "frames_per_clip"):
        if getattr(cfg, name) < 1:
            raise ValueError(f"{name} must be >= 1")
    if cfg.noise_px < 0:
        raise ValueError("noise_px must be >= 0")
    clips = []
    for action in range(cfg.n_ac):
        sig = _action_signature(cfg.seed, action, cfg.skeleton.joints)
        for index in range(cfg.clips_per_action):
            clips.append(_generate_clip(cfg, sig, action, index % cfg.subjects, index))
    clips.sort(key=lambda c: (c.action, c.subject))  # stable: clip index breaks ties
    return Dataset(clips, cfg.n_ac, cfg.skeleton.joints)


def bone_length_audit(clip: PoseClip, skeleton: SkeletonSpec) -> float:
    """Largest absolute deviation (mm) of any measured bone from its nominal length."""
    if skeleton.joints < 2:
        return 0.0
    parents = np.asarray(skeleton.parent[1:])
    bones = clip.joints3d[:, 1:] - clip.joints3d[:, parents]
    measured = np.linalg.norm(bones, axis=-1)
    return float(np.max(np.abs(measured - np.asarray(skeleton.bone_lengths))))


def split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Clip-level split, stratified by action; relative clip order is kept."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    test_ids: set[int] = set()
    for action in range(dataset.n_ac):
        members = [i for i, c in enumerate(dataset.clips) if c.action == action]
        if len(members) < 2:
            raise ValueError(f"action {action_name(action)} has {len(members)} clip(s); need >= 2 to stratify")
        n_test = min(max(1, math.floor(len(members) * test_fraction + 0.5)), len(members) - 1)
        picked = stream(seed, _SPLIT, action).permutation(len(members))[:n_test]
        test_ids.update(members[k] for k in picked)
    train = [c for i, c in enumerate(dataset.clips) if i not in test_ids]
    test = [c for i, c in enumerate(dataset.clips) if i in test_ids]
    return Dataset(train, dataset.n_ac, dataset.joints), Dataset(test, dataset.n_ac, dataset.joints)


_HEADER = struct.Struct("<3I")


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(_HEADER.pack(dataset.n_ac, dataset.joints, len(dataset.clips)))
    for clip in dataset.clips:
        buf.write(_HEADER.pack(clip.action, clip.subject, clip.frames))
        buf.write(clip.joints3d.astype("<f8").tobytes())
        buf.write(clip.joints2d.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {raw[:4]!r}, expected {DATASET_MAGIC!r}")
    n_ac, joints, count = _HEADER.unpack_from(raw, 4)
    offset = 4 + _HEADER.size
    clips = []
    for k in range(count):
        if offset + _HEADER.size > len(raw):
            raise DatasetFormatError(f"{path}: truncated at clip {k}")
        action, subject, frames = _HEADER.unpack_from(raw, offset)
        offset += _HEADER.size
        arrays = []
        for dims in (3, 2):
            n = frames * joints * dims
            chunk = raw[offset : offset + 8 * n]
            if len(chunk) != 8 * n:
                raise DatasetFormatError(f"{path}: truncated at clip {k}")
            arrays.append(np.frombuffer(chunk, dtype="<f8").reshape(frames, joints, dims).copy())
            offset += 8 * n
        if action >= n_ac:
            raise DatasetFormatError(f"{path}: clip {k} has action {action} >= n_ac {n_ac}")
        clips.append(PoseClip(action, subject, arrays[0], arrays[1]))
    if offset != len(raw):
        raise DatasetFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return Dataset(clips, n_ac, joints)


def export_csv(dataset: Dataset, path: str | Path) -> None:
    """One row per frame: ids, then x/y/z (mm) and u/v (px) for every joint."""
    j = dataset.joints
    header = ["action", "subject", "clip", "frame"]
    header += [f"j{k}_{a}" for k in range(j) for a in "xyz"]
    header += [f"j{k}_{a}" for k in range(j) for a in "uv"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for ci, clip in enumerate(dataset.clips):
            for t in range(clip.frames):
                row = [action_name(clip.action), clip.subject, ci, t]
                row += [repr(float(v)) for v in clip.joints3d[t].reshape(-1)]
                row += [repr(float(v)) for v in clip.joints2d[t].reshape(-1)]
                w.writerow(row)
