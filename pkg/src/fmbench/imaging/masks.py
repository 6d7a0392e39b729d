"""Mask-derived selections: patch membership and pixel-weighted slice sampling."""

from __future__ import annotations

import numpy as np

from ..errors import EmptyMaskError, ShapeError
from ..rng import generator
from .types import LabelMask, PatchGrid, RasterVolume


def mask_to_patch_mask(mask: LabelMask, grid: PatchGrid, label: int) -> set[int]:
    """Patch indices (row-major) whose footprint contains >= 1 pixel of ``label``.

    The mask must be 2D with shape equal to the grid resolution.
    """
    m = mask.data
    if m.ndim != 2:
        raise ShapeError("mask_to_patch_mask expects a 2D mask")
    if m.shape != (grid.resolution, grid.resolution):
        raise ShapeError(
            f"mask shape {m.shape} does not match grid resolution {grid.resolution}")
    hit = m == int(label)
    if not hit.any():
        raise EmptyMaskError(f"label {label} absent from mask")
    p = grid.patch_size
    blocks = hit.reshape(grid.grid_h, p, grid.grid_w, p)
    covered = blocks.any(axis=(1, 3))
    idx = np.flatnonzero(covered.reshape(-1))
    return {int(i) for i in idx}


def sample_slices_weighted(volume: RasterVolume, mask: LabelMask, label: int,
                           n: int, seed: int) -> list[int]:
    """Sample ``n`` z-indices without replacement, weighted by labeled-pixel count.

    Probability of a slice is proportional to the number of pixels carrying
    ``label`` on it; deterministic given ``seed``.
    """
    m = mask.data
    if m.ndim != 3:
        raise ShapeError("sample_slices_weighted expects a 3D mask")
    if m.shape != volume.data.shape:
        raise ShapeError(f"mask shape {m.shape} != volume shape {volume.data.shape}")
    if n < 1:
        raise ShapeError(f"n must be >= 1, got {n}")
    counts = (m == int(label)).sum(axis=(1, 2)).astype(np.float64)
    eligible = np.flatnonzero(counts > 0)
    if eligible.size == 0:
        raise EmptyMaskError(f"label {label} absent from every slice")
    if n > eligible.size:
        raise ShapeError(
            f"requested {n} slices but only {eligible.size} carry label {label}")
    rng = generator(seed)
    weights = counts[eligible]
    picked = rng.choice(eligible, size=n, replace=False, p=weights / weights.sum())
    return [int(z) for z in picked]
