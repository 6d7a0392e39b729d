"""Deterministic toy encoder: a desk-scale stand-in for real backbones.

Each patch token is an affine map of the patch pixels plus a per-cell
positional code; the class token is the mean of the patch tokens.  All
projection entries come from a splitmix64 counter stream, so outputs are
bit-identical across platforms for a given seed.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..imaging.types import Slice2D
from ..rng import derive_key, uniform_stream
from .base import Encoder, EncoderDescriptor, FeatureMap

PATCH_SIZE = 16


class ToyEncoder(Encoder):
    def __init__(self, seed: int, embed_dim: int, input_resolution: int = 512):
        self.seed = int(seed)
        self.descriptor = EncoderDescriptor(
            encoder_id=f"toy:seed={self.seed},dim={int(embed_dim)},res={int(input_resolution)}",
            input_resolution=int(input_resolution),
            patch_size=PATCH_SIZE,
            embed_dim=int(embed_dim),
        )
        d = self.descriptor.embed_dim
        n_pix = PATCH_SIZE * PATCH_SIZE
        # Entries in [-1,1), scaled by 1/sqrt(patch pixel count)
        self._w = (uniform_stream(derive_key(self.seed, "proj"), d * n_pix)
                   .reshape(d, n_pix) / np.sqrt(n_pix))
        self._b = uniform_stream(derive_key(self.seed, "bias"), d)

    def _pos_code(self, grid_h: int, grid_w: int) -> np.ndarray:
        d = self.descriptor.embed_dim
        flat = uniform_stream(derive_key(self.seed, "pos", grid_h, grid_w),
                              grid_h * grid_w * d)
        return flat.reshape(grid_h, grid_w, d)

    def encode(self, slc: Slice2D) -> FeatureMap:
        return toy_encode(slc, self.seed, self.descriptor.embed_dim, encoder=self)


def toy_encode(slc: Slice2D, seed: int, embed_dim: int,
               encoder: ToyEncoder | None = None) -> FeatureMap:
    """Encode a square slice whose side is divisible by 16.

    token(i, j) = W @ patch_pixels(i, j) + b + pos(i, j);
    class token = mean over the grid.
    """
    h, w = slc.data.shape
    if h != w:
        raise ShapeError(f"toy encoder needs a square slice, got {slc.data.shape}")
    if h % PATCH_SIZE != 0:
        raise ShapeError(f"slice side {h} not divisible by patch size {PATCH_SIZE}")
    if encoder is None or encoder.descriptor.input_resolution != h:
        encoder = ToyEncoder(seed, embed_dim, input_resolution=h)

    grid = h // PATCH_SIZE
    pixels = (slc.data.astype(np.float64)
              .reshape(grid, PATCH_SIZE, grid, PATCH_SIZE)
              .transpose(0, 2, 1, 3)
              .reshape(grid * grid, PATCH_SIZE * PATCH_SIZE))
    tokens = pixels @ encoder._w.T + encoder._b
    tokens = tokens.reshape(grid, grid, embed_dim) + encoder._pos_code(grid, grid)
    tokens32 = tokens.astype(np.float32)
    cls = tokens32.reshape(-1, embed_dim).mean(axis=0, dtype=np.float64).astype(np.float32)
    return FeatureMap(class_token=cls, patch_tokens=tokens32,
                      descriptor=encoder.descriptor,
                      source=(slc.volume_id, slc.z_index))
