"""Synthetic biased action clips.

A clip is a ``T x H x W`` grey video: the scene is a static pattern of
vertical stripes whose width encodes the scene class, and the action is the
direction in which a 3x3 white sprite moves (with toroidal wrap). The bias
knob ``beta`` controls how often the scene agrees with the action's
preferred scene ``action mod M``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from scenebias.errors import ConfigError, ContractError, FormatError
from scenebias.rng import counter_rng

# f32-representable intensities so the SBD1 round trip is bit-exact
DARK = float(np.float32(0.3))
LIGHT = float(np.float32(0.7))
SPRITE = 1.0

VELOCITIES = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1))

MAGIC = b"SBD1"
_HEADER = struct.Struct("<4s6IQBB")


class ActionFamily(enum.IntEnum):
    CARDINAL = 0
    DIAGONAL = 1


class Role(enum.IntEnum):
    TRAIN = 0
    VAL = 1
    TEST = 2


def velocity(action: int, family: ActionFamily) -> tuple[int, int]:
    shift = 0 if family == ActionFamily.CARDINAL else 1
    return VELOCITIES[(action + shift) % len(VELOCITIES)]


@dataclass(frozen=True)
class DatasetSpec:
    num_actions: int = 8
    num_scenes: int = 4
    frames: int = 8
    height: int = 16
    width: int = 16
    beta: float = 0.9
    count: int = 2000
    seed: int = 0
    action_family: ActionFamily = ActionFamily.CARDINAL

    def __post_init__(self):
        object.__setattr__(self, "action_family", ActionFamily(self.action_family))
        if not 1 <= self.num_actions <= len(VELOCITIES):
            raise ConfigError(f"num_actions must be in [1, {len(VELOCITIES)}], got {self.num_actions}")
        if self.num_scenes < 1:
            raise ConfigError(f"num_scenes must be positive, got {self.num_scenes}")
        for name in ("frames", "height", "width", "count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.height < 3 or self.width < 3:
            raise ConfigError("height and width must be at least 3 to hold the sprite")
        if self.num_scenes * self.num_scenes > self.width:
            raise ConfigError(f"num_scenes^2 = {self.num_scenes ** 2} exceeds width {self.width}; stripe patterns would be ambiguous")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(frozen=True, eq=False)
class Clip:
    pixels: np.ndarray  # [T, H, W] float64 in [0, 1]
    action: int
    scene: int
    actor_mask: np.ndarray  # [T, H, W] bool


@dataclass(eq=False)
class Batch:
    """Stacked clip arrays; the form the model and trainers consume."""

    pixels: np.ndarray
    actions: np.ndarray
    scenes: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_clips(cls, clips: Sequence[Clip]) -> "Batch":
        if not clips:
            raise ContractError("empty batch")
        return cls(
            np.stack([c.pixels for c in clips]),
            np.array([c.action for c in clips], dtype=np.int64),
            np.array([c.scene for c in clips], dtype=np.int64),
            np.stack([c.actor_mask for c in clips]),
        )

    def take(self, index) -> "Batch":
        return Batch(self.pixels[index], self.actions[index], self.scenes[index], self.masks[index])

    def masked(self) -> "Batch":
        return Batch(mask_pixels(self.pixels, self.masks), self.actions, self.scenes, self.masks)


def as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, DatasetSplit):
        return data.batch
    if isinstance(data, Clip):
        return Batch.from_clips([data])
    return Batch.from_clips(list(data))


@dataclass(eq=False)
class DatasetSplit:
    clips: list[Clip]
    spec: DatasetSpec
    role: Role = Role.TRAIN

    def __len__(self) -> int:
        return len(self.clips)

    @cached_property
    def batch(self) -> Batch:
        return Batch.from_clips(self.clips)

    @cached_property
    def masked_batch(self) -> Batch:
        return self.batch.masked()


def render_clip(action: int, scene: int, start_row: int, start_col: int, spec: DatasetSpec) -> Clip:
    if not 0 <= action < spec.num_actions:
        raise ContractError(f"action {action} outside [0, {spec.num_actions})")
    if not 0 <= scene < spec.num_scenes:
        raise ContractError(f"scene {scene} outside [0, {spec.num_scenes})")
    if not (0 <= start_row < spec.height and 0 <= start_col < spec.width):
        raise ContractError(f"start ({start_row}, {start_col}) outside the {spec.height}x{spec.width} frame")
    T, H, W = spec.frames, spec.height, spec.width
    cols = np.arange(W)
    row = np.where((cols // (scene + 1)) % 2 == 0, DARK, LIGHT)
    pixels = np.broadcast_to(row, (T, H, W)).copy()
    mask = np.zeros((T, H, W), dtype=bool)
    vr, vc = velocity(action, spec.action_family)
    offsets = np.arange(-1, 2)
    for t in range(T):
        r = (start_row + t * vr) % H
        c = (start_col + t * vc) % W
        rows = (r + offsets) % H
        cs = (c + offsets) % W
        mask[t][np.ix_(rows, cs)] = True
    pixels[mask] = SPRITE
    return Clip(pixels, int(action), int(scene), mask)


def sprite_center(start_row: int, start_col: int, action: int, t: int, spec: DatasetSpec) -> tuple[int, int]:
    vr, vc = velocity(action, spec.action_family)
    return (start_row + t * vr) % spec.height, (start_col + t * vc) % spec.width


def draw_clip(spec: DatasetSpec, role: Role, index: int) -> Clip:
    """The ``index``-th clip of a split, reproducible without generating the others."""
    rng = counter_rng(spec.seed, int(role), index)
    action = int(rng.integers(spec.num_actions))
    if rng.random() < spec.beta:
        scene = action % spec.num_scenes
    else:
        scene = int(rng.integers(spec.num_scenes))
    start_row = int(rng.integers(spec.height))
    start_col = int(rng.integers(spec.width))
    return render_clip(action, scene, start_row, start_col, spec)


def generate_dataset(spec: DatasetSpec, role: Role = Role.TRAIN) -> DatasetSplit:
    role = Role(role)
    return DatasetSplit([draw_clip(spec, role, i) for i in range(spec.count)], spec, role)


def mask_pixels(pixels: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Replace masked cells by the mean of their (original) frame; works on ``[..., H, W]``."""
    means = pixels.mean(axis=(-2, -1), keepdims=True)
    return np.where(masks, means, pixels)


def mask_actor(clip: Clip, mask: np.ndarray | None = None) -> Clip:
    """Human-masked copy of ``clip``: actor cells filled with the per-frame mean."""
    mask = clip.actor_mask if mask is None else mask
    return Clip(mask_pixels(clip.pixels, mask), clip.action, clip.scene, clip.actor_mask)


def scene_agreement(split: DatasetSplit) -> float:
    """Empirical P(scene == action mod M)."""
    b = split.batch
    return float(np.mean(b.scenes == b.actions % split.spec.num_scenes))


# ---------------------------------------------------------------------------
# SBD1 binary format


def write_dataset(path, split: DatasetSplit) -> None:
    spec = split.spec
    parts = [
        _HEADER.pack(
            MAGIC, spec.num_actions, spec.num_scenes, spec.frames, spec.height, spec.width,
            len(split.clips), spec.seed, int(split.role), int(spec.action_family),
        )
    ]
    for clip in split.clips:
        parts.append(struct.pack("<HH", clip.action, clip.scene))
        parts.append(clip.pixels.astype("<f4").tobytes())
        parts.append(np.packbits(clip.actor_mask.reshape(-1)).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path, beta: float | None = None) -> DatasetSplit:
    """Load an SBD1 file. ``beta`` is not stored on disk; it is re-estimated unless given."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(path, 0, f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise FormatError(path, len(raw), "truncated header")
    _, n, m, t, h, w, count, seed, role, family = _HEADER.unpack_from(raw, 0)
    try:
        role = Role(role)
        family = ActionFamily(family)
    except ValueError as exc:
        raise FormatError(path, _HEADER.size - 2, str(exc)) from exc
    npix = t * h * w
    nmask = (npix + 7) // 8
    record = 4 + 4 * npix + nmask
    expected = _HEADER.size + count * record
    if len(raw) != expected:
        raise FormatError(path, min(len(raw), expected), f"file size {len(raw)} does not match header (expected {expected})")
    clips = []
    offset = _HEADER.size
    for _ in range(count):
        action, scene = struct.unpack_from("<HH", raw, offset)
        pix = np.frombuffer(raw, dtype="<f4", count=npix, offset=offset + 4).astype(np.float64).reshape(t, h, w)
        bits = np.frombuffer(raw, dtype=np.uint8, count=nmask, offset=offset + 4 + 4 * npix)
        mask = np.unpackbits(bits)[:npix].astype(bool).reshape(t, h, w)
        if not (action < n and scene < m):
            raise FormatError(path, offset, f"label out of range (action {action}, scene {scene})")
        clips.append(Clip(pix, action, scene, mask))
        offset += record
    if beta is None:
        agree = np.mean([c.scene == c.action % m for c in clips]) if clips else 1.0 / m
        beta = float(min(1.0, max(0.0, (agree - 1.0 / m) / (1.0 - 1.0 / m)))) if m > 1 else 1.0
    spec = DatasetSpec(n, m, t, h, w, beta, max(count, 1), seed, family)
    return DatasetSplit(clips, spec, role)


def dataset_file_size(spec: DatasetSpec) -> int:
    npix = spec.frames * spec.height * spec.width
    return _HEADER.size + spec.count * (4 + 4 * npix + (npix + 7) // 8)
