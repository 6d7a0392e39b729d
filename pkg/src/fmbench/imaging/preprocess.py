"""Slice preprocessing: bilinear resize and z-score normalization.

The resize uses half-pixel-center sampling with edge clamping; slices are
resized first and normalized second.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .types import Slice2D

# Divisor guard for constant slices: normalized output becomes all zeros
# instead of NaN.
_STD_EPS = 1e-8


def resize_bilinear(slc: Slice2D, out_h: int, out_w: int) -> Slice2D:
    """Resample a slice to (out_h, out_w) with half-pixel-center bilinear weights."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output dims must be >= 1, got ({out_h}, {out_w})")
    src = slc.data
    in_h, in_w = src.shape
    if (out_h, out_w) == (in_h, in_w):
        return Slice2D(src.copy(), slc.volume_id, slc.z_index)

    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5

    y0 = np.clip(np.floor(ys).astype(np.int64), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]

    f = src.astype(np.float64)
    top = f[np.ix_(y0, x0)] * (1 - wx) + f[np.ix_(y0, x1)] * wx
    bot = f[np.ix_(y1, x0)] * (1 - wx) + f[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    return Slice2D(out, slc.volume_id, slc.z_index)


def z_score_normalize(slc: Slice2D) -> Slice2D:
    """Zero-mean, unit-population-std normalization; constant slices map to zeros."""
    data = slc.data.astype(np.float64)
    mean = data.mean()
    std = data.std()
    if std == 0.0:
        out = np.zeros_like(data)
    else:
        out = (data - mean) / max(std, _STD_EPS)
    return Slice2D(out, slc.volume_id, slc.z_index)


def preprocess_slice(slc: Slice2D, resolution: int) -> Slice2D:
    """Resize to the encoder resolution, then normalize (in that order)."""
    return z_score_normalize(resize_bilinear(slc, resolution, resolution))
