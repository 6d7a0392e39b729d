"""Frozen-encoder interface: descriptors, per-slice feature maps, dispatch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError, ShapeError
from ..imaging.types import Slice2D


@dataclass(frozen=True)
class EncoderDescriptor:
    """Identity and geometry of a frozen encoder."""

    encoder_id: str
    input_resolution: int
    patch_size: int
    embed_dim: int

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ShapeError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.input_resolution % self.patch_size != 0:
            raise ShapeError(
                f"patch size {self.patch_size} does not divide resolution "
                f"{self.input_resolution}")

    @property
    def grid_h(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.input_resolution // self.patch_size


@dataclass
class FeatureMap:
    """Per-slice class token plus (grid_h, grid_w, D) patch-token grid."""

    class_token: np.ndarray
    patch_tokens: np.ndarray
    descriptor: EncoderDescriptor
    source: tuple[str, int]  # (volume_id, z_index)
    sample_id: str | None = None

    def __post_init__(self):
        self.class_token = np.asarray(self.class_token, dtype=np.float32)
        self.patch_tokens = np.asarray(self.patch_tokens, dtype=np.float32)
        d = self.descriptor
        if self.class_token.shape != (d.embed_dim,):
            raise ShapeError(
                f"class token shape {self.class_token.shape} != ({d.embed_dim},)")
        if self.patch_tokens.shape != (d.grid_h, d.grid_w, d.embed_dim):
            raise ShapeError(
                f"patch tokens shape {self.patch_tokens.shape} != "
                f"({d.grid_h}, {d.grid_w}, {d.embed_dim})")
        if not (np.all(np.isfinite(self.class_token))
                and np.all(np.isfinite(self.patch_tokens))):
            raise DataError(f"feature map for {self.source} has non-finite values")
        if self.sample_id is None:
            self.sample_id = f"{self.source[0]}:{self.source[1]}"

    @property
    def tokens_flat(self) -> np.ndarray:
        """(grid_h * grid_w, D) view of the patch tokens."""
        d = self.descriptor
        return self.patch_tokens.reshape(d.grid_h * d.grid_w, d.embed_dim)


class Encoder:
    """A frozen encoder: a pure function of the slice bytes and encoder_id."""

    descriptor: EncoderDescriptor

    def encode(self, slc: Slice2D) -> FeatureMap:
        raise NotImplementedError


def encode_slice(slc: Slice2D, encoder: Encoder) -> FeatureMap:
    """Encode one preprocessed slice, enforcing the descriptor geometry."""
    d = encoder.descriptor
    if slc.data.shape != (d.input_resolution, d.input_resolution):
        raise ShapeError(
            f"slice shape {slc.data.shape} does not match encoder input resolution "
            f"{d.input_resolution}")
    return encoder.encode(slc)
