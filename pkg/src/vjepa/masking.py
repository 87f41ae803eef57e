"""Spatio-temporal mask samplers on the token grid.

All samplers return a :class:`Mask` with sorted, disjoint target and context
token ids in (t, h, w) row-major order. Multi-block and random-tube masks are
drawn on the spatial grid and repeated over every temporal slot.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

MULTIBLOCK = "multiblock"
RANDOM_TUBE = "random_tube"
CAUSAL = "causal_multiblock"
KINDS = (MULTIBLOCK, RANDOM_TUBE, CAUSAL)

MAX_RESAMPLES = 100


class MaskError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MaskConfig:
    kind: str = MULTIBLOCK
    num_blocks: int = 8
    spatial_scale: float = 0.15
    aspect_ratio: tuple[float, float] = (0.75, 1.5)
    causal_frames: int | None = None
    tube_ratio: float = 0.9
    tubelet: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MaskError(f"unknown mask kind {self.kind!r}")
        if not 0 < self.spatial_scale <= 1:
            raise MaskError(f"spatial_scale must lie in (0, 1], got {self.spatial_scale}")
        lo, hi = self.aspect_ratio
        if not 0 < lo <= hi:
            raise MaskError(f"aspect ratio range must satisfy 0 < low <= high, got {self.aspect_ratio}")
        if self.num_blocks < 1:
            raise MaskError("num_blocks must be >= 1")
        if self.kind == CAUSAL and (self.causal_frames is None or self.causal_frames <= 0):
            raise MaskError("causal masks need causal_frames > 0")

    @property
    def label(self) -> str:
        if self.kind == RANDOM_TUBE:
            return f"random-tube[{self.tube_ratio:g}]"
        if self.kind == CAUSAL:
            return f"causal multi-block[{self.causal_frames}]"
        return "multi-block"


SHORT_RANGE = MaskConfig(num_blocks=8, spatial_scale=0.15)
LONG_RANGE = MaskConfig(num_blocks=2, spatial_scale=0.7)


@dataclass
class Block:
    top: int
    left: int
    height: int
    width: int
    aspect: float


@dataclass
class Mask:
    target: np.ndarray
    context: np.ndarray
    kind: str
    blocks: list[Block] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return len(self.target) / (len(self.target) + len(self.context))


@dataclass
class MaskSet:
    masks: list[Mask]

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i):
        return self.masks[i]


def _from_token_mask(token_mask: np.ndarray, kind: str, blocks=()) -> Mask:
    flat = token_mask.reshape(-1)
    return Mask(np.flatnonzero(flat), np.flatnonzero(~flat), kind, list(blocks))


def _block_dims(cfg: MaskConfig, gh: int, gw: int, rng: np.random.Generator) -> tuple[int, int, float]:
    area = round_half_up(cfg.spatial_scale * gh * gw)
    aspect = float(rng.uniform(*cfg.aspect_ratio))
    bh = min(max(round_half_up(math.sqrt(area / aspect)), 1), gh)
    bw = min(max(round_half_up(math.sqrt(area * aspect)), 1), gw)
    return bh, bw, aspect


def _spatial_blocks(cfg: MaskConfig, gh: int, gw: int, rng: np.random.Generator):
    spatial = np.zeros((gh, gw), dtype=bool)
    blocks = []
    for _ in range(cfg.num_blocks):
        bh, bw, aspect = _block_dims(cfg, gh, gw, rng)
        top = int(rng.integers(0, gh - bh + 1))
        left = int(rng.integers(0, gw - bw + 1))
        spatial[top:top + bh, left:left + bw] = True
        blocks.append(Block(top, left, bh, bw, aspect))
    return spatial, blocks


def sample_multiblock(cfg: MaskConfig, grid: tuple[int, int, int], rng: np.random.Generator) -> Mask:
    """Union of ``cfg.num_blocks`` rectangles, repeated over all temporal slots."""
    gt, gh, gw = grid
    if gh * gw < 4:
        raise MaskError(f"spatial grid {gh}x{gw} too small for block masks")
    for _ in range(MAX_RESAMPLES):
        spatial, blocks = _spatial_blocks(cfg, gh, gw, rng)
        if not spatial.all():
            token_mask = np.broadcast_to(spatial, (gt, gh, gw))
            return _from_token_mask(token_mask, MULTIBLOCK, blocks)
    raise MaskError(
        f"multi-block mask ({cfg.num_blocks} blocks, scale {cfg.spatial_scale}) left no context "
        f"after {MAX_RESAMPLES} attempts"
    )


def sample_random_tube(ratio: float, grid: tuple[int, int, int], rng: np.random.Generator) -> Mask:
    gt, gh, gw = grid
    if not 0 < ratio < 1:
        raise MaskError(f"tube ratio must lie in (0, 1), got {ratio}")
    cells = gh * gw
    n = round_half_up(ratio * cells)
    if n <= 0 or n >= cells:
        raise MaskError(f"tube ratio {ratio} masks {n} of {cells} tubes")
    chosen = rng.choice(cells, size=n, replace=False)
    spatial = np.zeros(cells, dtype=bool)
    spatial[chosen] = True
    token_mask = np.broadcast_to(spatial.reshape(gh, gw), (gt, gh, gw))
    return _from_token_mask(token_mask, RANDOM_TUBE)


def causal_slots(frames: int, tubelet: int) -> int:
    return -(-frames // tubelet)


def sample_causal_multiblock(frames: int, cfg: MaskConfig, grid: tuple[int, int, int],
                             rng: np.random.Generator) -> Mask:
    """Context confined to the first ``frames`` frames, which are block-masked on top."""
    gt, gh, gw = grid
    if frames <= 0:
        raise MaskError(f"causal prefix must be positive, got {frames}")
    prefix = causal_slots(frames, cfg.tubelet)
    if prefix >= gt:
        mask = sample_multiblock(cfg, grid, rng)
        mask.kind = CAUSAL
        return mask
    for _ in range(MAX_RESAMPLES):
        spatial, blocks = _spatial_blocks(cfg, gh, gw, rng)
        if not spatial.all():
            break
    else:
        raise MaskError(f"causal multi-block mask left no context after {MAX_RESAMPLES} attempts")
    token_mask = np.ones((gt, gh, gw), dtype=bool)
    token_mask[:prefix] = spatial
    return _from_token_mask(token_mask, CAUSAL, blocks)


def sample_mask(cfg: MaskConfig, grid: tuple[int, int, int], rng: np.random.Generator) -> Mask:
    if cfg.kind == RANDOM_TUBE:
        return sample_random_tube(cfg.tube_ratio, grid, rng)
    if cfg.kind == CAUSAL:
        return sample_causal_multiblock(cfg.causal_frames, cfg, grid, rng)
    return sample_multiblock(cfg, grid, rng)


def sample_maskset(configs, grid: tuple[int, int, int], rng: np.random.Generator) -> MaskSet:
    """One mask per config; the default pair is (short-range, long-range)."""
    return MaskSet([sample_mask(cfg, grid, rng) for cfg in configs])


def clip_rngs(seed: int, step: int, batch: int) -> list[np.random.Generator]:
    """Independent per-clip generators derived from (seed, step, clip index)."""
    return [np.random.default_rng([seed, step, i]) for i in range(batch)]


def batch_masksets(configs, grid, seed: int, step: int, batch: int) -> list[MaskSet]:
    return [sample_maskset(configs, grid, rng) for rng in clip_rngs(seed, step, batch)]


def mask_stats(cfg: MaskConfig, grid: tuple[int, int, int], n_draws: int, seed: int = 0) -> dict:
    """Coverage summary over ``n_draws`` masks.

    ``std_coverage`` is the standard error of ``mean_coverage``; the spread of
    individual draws is ``draw_std``.
    """
    if n_draws < 1:
        raise MaskError("n_draws must be >= 1")
    rng = np.random.default_rng(seed)
    cov = np.empty(n_draws)
    sizes: Counter = Counter()
    for i in range(n_draws):
        m = sample_mask(cfg, grid, rng)
        cov[i] = m.coverage
        sizes.update((b.height, b.width) for b in m.blocks)
    draw_std = float(cov.std(ddof=1)) if n_draws > 1 else 0.0
    tube = cfg.kind == RANDOM_TUBE
    return {
        "kind": cfg.kind,
        "label": cfg.label,
        # random tubes have no blocks; their scale is the masked fraction of tubes
        "num_blocks": 0 if tube else cfg.num_blocks,
        "scale": cfg.tube_ratio if tube else cfg.spatial_scale,
        "mean_coverage": float(cov.mean()),
        "std_coverage": draw_std / math.sqrt(n_draws),
        "draw_std": draw_std,
        "block_sizes": dict(sorted(sizes.items())),
    }
