"""Core raster data model: volumes, slices, label masks, patch grids.

Axis order is (z, y, x) everywhere after ingestion; file-format axis
permutations are resolved once by the readers and never downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, EmptyMaskError, ShapeError

MODALITIES = ("CT", "MR", "SYNTH")


@dataclass
class RasterVolume:
    """3D intensity grid indexed (z, y, x) with physical spacing in mm."""

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    modality: str
    volume_id: str
    acquisition_axis: int = 0  # slicing axis; z unless the manifest overrides

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got ndim={self.data.ndim}")
        if any(d < 1 for d in self.data.shape):
            raise ShapeError(f"every volume dimension must be >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"volume {self.volume_id!r} contains non-finite samples")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise DataError(f"spacing components must be positive, got {self.spacing_mm}")
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def slice_at(self, z_index: int) -> "Slice2D":
        if not 0 <= z_index < self.data.shape[0]:
            raise ShapeError(
                f"z_index {z_index} out of range for depth {self.data.shape[0]}")
        return Slice2D(self.data[z_index], self.volume_id, z_index)


@dataclass
class Slice2D:
    """One 2D slice (y, x) taken from a volume."""

    data: np.ndarray
    volume_id: str
    z_index: int

    def __post_init__(self):
        # float64 so preprocessing keeps full precision; volumes stay float32
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"slice data must be 2D, got ndim={self.data.ndim}")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"slice ({self.volume_id!r}, z={self.z_index}) has non-finite samples")
        if self.z_index < 0:
            raise DataError(f"z_index must be nonnegative, got {self.z_index}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class LabelMask:
    """2D or 3D nonnegative-integer label grid; 0 is background."""

    data: np.ndarray
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (2, 3):
            raise ShapeError(f"mask must be 2D or 3D, got ndim={self.data.ndim}")
        if not np.issubdtype(self.data.dtype, np.integer):
            as_int = self.data.astype(np.int64)
            if not np.array_equal(as_int, self.data):
                raise DataError("mask samples must be integers")
            self.data = as_int
        if self.data.min(initial=0) < 0:
            raise DataError("mask labels must be nonnegative")

    def labels_present(self) -> list[int]:
        vals = np.unique(self.data)
        return [int(v) for v in vals if v != 0]

    def binary(self, label: int) -> np.ndarray:
        out = self.data == int(label)
        if not out.any():
            raise EmptyMaskError(f"label {label} absent from mask")
        return out


@dataclass(frozen=True)
class PatchGrid:
    """Square input resolution R tokenized into (R/P) x (R/P) patches of side P."""

    resolution: int
    patch_size: int

    def __post_init__(self):
        if self.resolution < 1 or self.patch_size < 1:
            raise ShapeError("resolution and patch_size must be positive")
        if self.resolution % self.patch_size != 0:
            raise ShapeError(
                f"patch size {self.patch_size} does not divide resolution {self.resolution}")

    @property
    def grid_h(self) -> int:
        return self.resolution // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.resolution // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w
