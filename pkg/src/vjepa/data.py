"""Synthetic moving-sprite clips and the raw clip file format.

Each clip holds one sprite whose *shape* is the appearance label and whose
*direction x speed* is the motion label. Sprites move on a torus (they wrap
at frame edges) from a uniformly random start, so every single frame has the
same position distribution whatever the motion class: motion can only be
read from how frames relate to each other.

By default the sprite holds still for two frames and then jumps, so with
2-frame tubelets every token is static and motion is only visible across
tokens at different times, never inside one patch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

CLIP_MAGIC = b"VJCL"
CLIP_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")
_LABELS = struct.Struct("<II")

# unit direction vectors (dy, dx)
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))
SHAPES = ("square", "disk", "triangle", "cross", "diamond", "ring", "hbar", "vbar")


class ClipFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_shapes: int = 4
    num_motions: int = 8
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 3
    sprite_size: int = 8
    noise: float = 0.02
    # the sprite moves once every ``hold_frames`` frames (by hold_frames * velocity)
    hold_frames: int = 2
    # sprites per clip; they share shape and velocity, colour and start position are per sprite
    num_sprites: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_shapes <= len(SHAPES):
            raise ValueError(f"num_shapes must lie in [2, {len(SHAPES)}], got {self.num_shapes}")
        if self.num_motions < 4 or self.num_motions % len(DIRECTIONS):
            raise ValueError(f"num_motions must be a multiple of 4 and >= 4, got {self.num_motions}")
        if self.num_sprites < 1:
            raise ValueError(f"num_sprites must be >= 1, got {self.num_sprites}")
        if self.hold_frames < 1:
            raise ValueError(f"hold_frames must be >= 1, got {self.hold_frames}")
        if self.sprite_size > min(self.height, self.width):
            raise ValueError(
                f"sprite of size {self.sprite_size} larger than frame {self.height}x{self.width}"
            )

    @property
    def speeds(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_motions // len(DIRECTIONS) + 1))

    def velocity(self, motion: int) -> tuple[int, int]:
        """Per-frame displacement (dy, dx) in pixels for a motion class."""
        dy, dx = DIRECTIONS[motion % len(DIRECTIONS)]
        speed = self.speeds[motion // len(DIRECTIONS)]
        return dy * speed, dx * speed


@dataclass
class ClipBatch:
    values: np.ndarray  # (B, T, H, W, C) in [0, 1]
    appearance: np.ndarray  # (B,)
    motion: np.ndarray  # (B,)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, idx) -> "ClipBatch":
        return ClipBatch(self.values[idx], self.appearance[idx], self.motion[idx])

    @staticmethod
    def concat(batches: Iterable["ClipBatch"]) -> "ClipBatch":
        batches = list(batches)
        return ClipBatch(
            np.concatenate([b.values for b in batches]),
            np.concatenate([b.appearance for b in batches]),
            np.concatenate([b.motion for b in batches]),
        )


def sprite_mask(shape: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = size / 2.0
    dy, dx = yy - c, xx - c
    name = SHAPES[shape]
    if name == "square":
        m = np.ones((size, size), dtype=bool)
    elif name == "disk":
        m = dy**2 + dx**2 <= r**2
    elif name == "triangle":
        m = np.abs(dx) <= (yy + 1) / 2.0
    elif name == "cross":
        m = (np.abs(dy) <= size / 6.0) | (np.abs(dx) <= size / 6.0)
    elif name == "diamond":
        m = np.abs(dy) + np.abs(dx) <= r
    elif name == "ring":
        rr = dy**2 + dx**2
        m = (rr <= r**2) & (rr >= (r * 0.55) ** 2)
    elif name == "hbar":
        m = np.abs(dy) <= size / 5.0
    else:
        m = np.abs(dx) <= size / 5.0
    return m


def render_clip(spec: DatasetSpec, index: int) -> tuple[np.ndarray, int, int]:
    """Pure function of (spec, index): returns (clip, appearance, motion)."""
    rng = np.random.default_rng([spec.seed, index])
    shape = int(rng.integers(spec.num_shapes))
    motion = int(rng.integers(spec.num_motions))
    s = spec.sprite_size
    vy, vx = spec.velocity(motion)
    steps = [t - t % spec.hold_frames for t in range(spec.frames)]
    clip = np.zeros((spec.frames, spec.height, spec.width, spec.channels))
    for _ in range(spec.num_sprites):
        color = rng.uniform(0.4, 1.0, size=spec.channels)
        y0 = int(rng.integers(spec.height))
        x0 = int(rng.integers(spec.width))
        canvas = np.zeros((spec.height, spec.width, spec.channels))
        canvas[:s, :s] = sprite_mask(shape, s)[:, :, None] * color
        moving = np.stack([np.roll(canvas, (y0 + vy * k, x0 + vx * k), axis=(0, 1)) for k in steps])
        np.maximum(clip, moving, out=clip)
    if spec.noise > 0:
        clip += rng.uniform(-spec.noise, spec.noise, size=clip.shape)
    clip = np.clip(np.rint(clip * 255.0), 0, 255).astype(np.float32) / np.float32(255.0)
    return clip, shape, motion


def generate(spec: DatasetSpec, n: int, start: int = 0) -> ClipBatch:
    """Clips ``start .. start+n-1`` of the dataset defined by ``spec``."""
    clips = np.empty((n, spec.frames, spec.height, spec.width, spec.channels), dtype=np.float32)
    app = np.empty(n, dtype=np.int64)
    mot = np.empty(n, dtype=np.int64)
    for i in range(n):
        clips[i], app[i], mot[i] = render_clip(spec, start + i)
    return ClipBatch(clips, app, mot)


def iter_batches(spec: DatasetSpec, n: int, batch_size: int, start: int = 0) -> Iterator[ClipBatch]:
    for s in range(start, start + n, batch_size):
        yield generate(spec, min(batch_size, start + n - s), start=s)


# ---------------------------------------------------------------------------
# raw clip files


def save_clips(path: str | Path, batches: ClipBatch | Iterable[ClipBatch]) -> int:
    """Write clips as u8 pixels; returns the clip count."""
    if isinstance(batches, ClipBatch):
        batches = [batches]
    batches = list(batches)
    if not batches:
        raise ValueError("save_clips needs at least one batch to fix the clip geometry")
    geom = batches[0].values.shape[1:]
    count = sum(len(b) for b in batches)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, count, *geom))
        for b in batches:
            if b.values.shape[1:] != geom:
                raise ValueError(f"clip geometry {b.values.shape[1:]} differs from {geom}")
            pix = np.clip(np.rint(b.values * 255.0), 0, 255).astype(np.uint8)
            for i in range(len(b)):
                f.write(_LABELS.pack(int(b.appearance[i]), int(b.motion[i])))
                f.write(pix[i].tobytes(order="C"))
    return count


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise ClipFormatError(f"truncated {what} at byte offset {offset}: expected {n} bytes, got {len(buf)}")
    return buf


def load_clips(path: str | Path, batch_size: int = 32) -> Iterator[ClipBatch]:
    """Stream clips from a raw clip file in file order."""
    with open(path, "rb") as f:
        magic, version, count, t, h, w, c = _HEADER.unpack(_read_exact(f, _HEADER.size, "header"))
        if magic != CLIP_MAGIC:
            raise ClipFormatError(f"bad magic {magic!r} at byte offset 0")
        if version != CLIP_VERSION:
            raise ClipFormatError(f"unsupported version {version} at byte offset 4")
        frame_bytes = t * h * w * c
        done = 0
        while done < count:
            n = min(batch_size, count - done)
            vals = np.empty((n, t, h, w, c), dtype=np.float32)
            app = np.empty(n, dtype=np.int64)
            mot = np.empty(n, dtype=np.int64)
            for i in range(n):
                app[i], mot[i] = _LABELS.unpack(_read_exact(f, _LABELS.size, "clip labels"))
                raw = np.frombuffer(_read_exact(f, frame_bytes, "clip pixels"), dtype=np.uint8)
                vals[i] = raw.reshape(t, h, w, c) / np.float32(255.0)
            done += n
            yield ClipBatch(vals, app, mot)
