"""Patch layout and the temporal-factored masking policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PredictorConfig


def patchify(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """``(..., H, W, 3)`` -> ``(..., N, P*P*3)``; patches row-major, pixels (py, px, c) within."""
    frames = np.asarray(frames)
    *lead, h, w, c = frames.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"frame {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = frames.reshape(*lead, gh, patch_size, gw, patch_size, c)
    nl = len(lead)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.transpose(axes).reshape(*lead, gh * gw, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, patch_size: int, grid: tuple[int, int] | None = None) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, n, d = patches.shape
    c = d // (patch_size * patch_size)
    if grid is None:
        g = int(round(np.sqrt(n)))
        if g * g != n:
            raise ValueError(f"{n} patches do not form a square grid")
        grid = (g, g)
    gh, gw = grid
    x = patches.reshape(*lead, gh, gw, patch_size, patch_size, c)
    nl = len(lead)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.transpose(axes).reshape(*lead, gh * patch_size, gw * patch_size, c)


def patch_index(row: int, col: int, grid_width: int) -> int:
    return row * grid_width + col


def visible_count(num_patches: int, mask_ratio: float, training: bool = True) -> int:
    """``round_half_even(N * (1 - p))``, clamped to ``[1, N-1]`` for training."""
    k = int(round(num_patches * (1.0 - mask_ratio)))
    if training:
        k = min(max(k, 1), num_patches - 1)
    return k


@dataclass(frozen=True)
class PatchMask:
    """Visibility of every patch of every frame; context frames are always fully visible."""

    n_context_frames: int
    grid: int
    visible_target: np.ndarray  # sorted flat indices into the target-frame grid

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def target_grid(self) -> np.ndarray:
        g = np.zeros(self.num_patches, dtype=bool)
        g[self.visible_target] = True
        return g.reshape(self.grid, self.grid)

    @property
    def frame_grids(self) -> np.ndarray:
        """``(n_context+1, grid, grid)`` bool, True = visible."""
        ctx = np.ones((self.n_context_frames, self.grid, self.grid), dtype=bool)
        return np.concatenate([ctx, self.target_grid[None]], axis=0)

    @property
    def masked_target(self) -> np.ndarray:
        return np.flatnonzero(~self.target_grid.reshape(-1))

    def token_indices(self) -> np.ndarray:
        """Flat token indices (time-major) of all visible tokens fed to the encoder."""
        n = self.num_patches
        ctx = np.arange(self.n_context_frames * n)
        return np.concatenate([ctx, self.n_context_frames * n + np.asarray(self.visible_target, dtype=np.int64)])


def sample_mask(config: PredictorConfig, rng: np.random.Generator) -> PatchMask:
    n = config.num_patches
    k = visible_count(n, config.mask_ratio)
    vis = np.sort(rng.choice(n, size=k, replace=False))
    return PatchMask(config.n_context_frames, config.grid, vis.astype(np.int64))


def mask_from_indices(config: PredictorConfig, visible_target) -> PatchMask:
    vis = np.unique(np.asarray(visible_target, dtype=np.int64))
    if vis.size and (vis.min() < 0 or vis.max() >= config.num_patches):
        raise ValueError("visible patch index out of range")
    return PatchMask(config.n_context_frames, config.grid, vis)
