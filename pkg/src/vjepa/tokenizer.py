"""Clip <-> token conversion and fixed 3D sin-cos positional tables."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class PatchGeometry:
    tubelet: int = 2
    ph: int = 8
    pw: int = 8
    channels: int = 3

    @property
    def volume(self) -> int:
        """Pixel values per token."""
        return self.tubelet * self.ph * self.pw * self.channels

    def grid(self, frames: int, height: int, width: int) -> tuple[int, int, int]:
        if frames % self.tubelet or height % self.ph or width % self.pw:
            raise ValueError(
                f"clip geometry {frames}x{height}x{width} not divisible by patch "
                f"{self.tubelet}x{self.ph}x{self.pw}"
            )
        return frames // self.tubelet, height // self.ph, width // self.pw


@dataclass
class TokenGrid:
    tokens: T.Tensor  # (B, L, d)
    grid: tuple[int, int, int]
    patch: PatchGeometry

    @property
    def length(self) -> int:
        t, h, w = self.grid
        return t * h * w


def extract_patches(clips: np.ndarray, patch: PatchGeometry) -> np.ndarray:
    """(B, T, H, W, C) -> (B, L, tubelet*ph*pw*C), tokens in (t, h, w) row-major order."""
    if clips.ndim == 4:
        clips = clips[None]
    b, t, h, w, c = clips.shape
    if c != patch.channels:
        raise ValueError(f"expected {patch.channels} channels, got {c}")
    gt, gh, gw = patch.grid(t, h, w)
    x = clips.reshape(b, gt, patch.tubelet, gh, patch.ph, gw, patch.pw, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return np.ascontiguousarray(x.reshape(b, gt * gh * gw, patch.volume))


def unpatchify(tokens: np.ndarray, grid: tuple[int, int, int], patch: PatchGeometry) -> np.ndarray:
    """Exact inverse of :func:`extract_patches`."""
    gt, gh, gw = grid
    if tokens.ndim != 3 or tokens.shape[1] != gt * gh * gw or tokens.shape[2] != patch.volume:
        raise ValueError(
            f"unpatchify: tokens of shape {tokens.shape} do not match grid {grid} "
            f"with patch volume {patch.volume}"
        )
    b = tokens.shape[0]
    x = tokens.reshape(b, gt, gh, gw, patch.tubelet, patch.ph, patch.pw, patch.channels)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return np.ascontiguousarray(
        x.reshape(b, gt * patch.tubelet, gh * patch.ph, gw * patch.pw, patch.channels)
    )


def patchify(clips: np.ndarray, weight: T.Tensor, bias: T.Tensor, patch: PatchGeometry) -> TokenGrid:
    """Strided 3D convolution with stride == kernel, written as a per-token linear map."""
    grid = patch.grid(*clips.shape[-4:-1])
    pix = T.tensor(extract_patches(clips, patch))
    return TokenGrid(T.matmul(pix, weight) + bias, grid, patch)


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    angles = positions[:, None] * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@lru_cache(maxsize=32)
def _sincos_3d_cached(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    gt, gh, gw = grid
    band = dim // 3
    tt, hh, ww = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    table = np.concatenate(
        [
            _sincos_1d(tt.reshape(-1).astype(np.float64), band),
            _sincos_1d(hh.reshape(-1).astype(np.float64), band),
            _sincos_1d(ww.reshape(-1).astype(np.float64), band),
        ],
        axis=1,
    )
    table.setflags(write=False)
    return table


def sincos_3d(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    """Positional table of shape (T'*H'*W', dim).

    The embedding is split into equal t, h and w bands; each band holds
    ``[sin(p*w_k), cos(p*w_k)]`` with ``w_k = 10000^(-2k/band)``.
    """
    if dim % 6:
        raise ValueError(f"positional dim must be divisible by 6, got {dim}")
    return _sincos_3d_cached(tuple(int(g) for g in grid), int(dim))
