"""Volume/slice/mask data model, ingestion, and preprocessing."""

from .io import (ManifestRow, check_group_disjoint, load_manifest, load_mask,
                 load_volume, write_manifest, write_raw_raster_2d, write_volume)
from .masks import mask_to_patch_mask, sample_slices_weighted
from .preprocess import preprocess_slice, resize_bilinear, z_score_normalize
from .types import LabelMask, PatchGrid, RasterVolume, Slice2D

__all__ = [
    "LabelMask", "ManifestRow", "PatchGrid", "RasterVolume", "Slice2D",
    "check_group_disjoint", "load_manifest", "load_mask", "load_volume",
    "mask_to_patch_mask", "preprocess_slice", "resize_bilinear",
    "sample_slices_weighted", "write_manifest", "write_raw_raster_2d",
    "write_volume", "z_score_normalize",
]
