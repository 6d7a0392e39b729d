"""Synthetic desk-scale corpora: classification slices, survival cohorts,
registration pairs.  Everything is seeded and file-based so CLI runs are
reproducible end to end."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..encoders.base import EncoderDescriptor, FeatureMap
from ..encoders.dump import write_feature_dump
from ..imaging.io import ManifestRow, write_manifest, write_volume
from ..imaging.types import RasterVolume
from ..rng import derive_key, generator


def _class_template(class_id: int, side: int, seed: int) -> np.ndarray:
    rng = generator(derive_key(seed, "template", class_id))
    coarse = rng.normal(size=(side // 8, side // 8))
    return np.kron(coarse, np.ones((8, 8)))


def _blob_mask(side: int, rng) -> np.ndarray:
    yy, xx = np.indices((side, side))
    cy, cx = rng.integers(side // 4, 3 * side // 4, size=2)
    ry, rx = rng.integers(side // 8, side // 4, size=2)
    return ((yy - cy) ** 2 / ry ** 2 + (xx - cx) ** 2 / rx ** 2 <= 1.0)


def make_classification_corpus(out_dir: str | Path, n_classes: int,
                               n_train: int, n_val: int, n_test: int,
                               side: int = 64, seed: int = 0,
                               noise: float = 0.05, with_masks: bool = False,
                               modality: str = "CT",
                               template_seed: int | None = None) -> Path:
    """Write slice volumes (+ optional ROI masks) and a manifest CSV.

    Returns the manifest path.  ``template_seed`` pins the class templates so
    two corpora can share classes (cross-modality pairing) while drawing
    different noise.
    """
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    template_seed = seed if template_seed is None else template_seed
    templates = [_class_template(c, side, template_seed) for c in range(n_classes)]
    rows = []
    counter = 0
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(count):
            for c in range(n_classes):
                rng = generator(derive_key(seed, "sample", split, i, c))
                img = templates[c] + rng.normal(scale=noise, size=(side, side))
                sid = f"s{counter:05d}"
                counter += 1
                vol_rel = f"volumes/{sid}.rawr"
                write_volume(RasterVolume(data=img[None].astype(np.float32),
                                          spacing_mm=(1.0, 1.0, 1.0),
                                          modality=modality, volume_id=sid),
                             out_dir / vol_rel)
                mask_rel = None
                if with_masks:
                    mask = _blob_mask(side, rng).astype(np.float32)
                    mask_rel = f"volumes/{sid}_mask.rawr"
                    write_volume(RasterVolume(data=mask[None],
                                              spacing_mm=(1.0, 1.0, 1.0),
                                              modality=modality,
                                              volume_id=sid + "_mask"),
                                 out_dir / mask_rel)
                rows.append(ManifestRow(
                    sample_id=sid, volume_path=vol_rel, z_index=0,
                    mask_path=mask_rel, label=f"c{c}", split=split,
                    modality=modality, group_id=f"g_{sid}"))
    manifest = out_dir / "manifest.csv"
    write_manifest(rows, manifest)
    return manifest


def make_survival_corpus(out_dir: str | Path, n_subjects: int, seed: int = 0,
                         embed_dim: int = 8, beta: float = 5.0) -> tuple[Path, Path]:
    """Feature dump + survival manifest with times driven by one coordinate.

    Returns (manifest_path, dump_path).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = generator(seed)
    X = rng.normal(size=(n_subjects, embed_dim))
    hazard = np.exp(beta * X[:, 0])
    times = rng.exponential(1.0 / hazard) * 365.0 + 1e-3
    horizon = float(np.median(times) * 3.0)
    observed = np.minimum(times, horizon)
    events = (times <= horizon).astype(int)

    desc = EncoderDescriptor(encoder_id=f"synthetic-survival:seed={seed}",
                             input_resolution=16, patch_size=16,
                             embed_dim=embed_dim)
    maps = []
    for i in range(n_subjects):
        token = X[i].astype(np.float32)
        maps.append(FeatureMap(class_token=token,
                               patch_tokens=token[None, None, :],
                               descriptor=desc, source=(f"subj{i:04d}", 0),
                               sample_id=f"subj{i:04d}"))
    dump_path = out_dir / "survival.fmfd"
    write_feature_dump(maps, dump_path)

    manifest_path = out_dir / "survival.csv"
    n_train = int(n_subjects * 0.6)
    n_val = int(n_subjects * 0.2)
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "time_days", "event", "feature_ref",
                         "split", "group_id"])
        for i in range(n_subjects):
            split = ("train" if i < n_train
                     else "val" if i < n_train + n_val else "test")
            writer.writerow([f"subj{i:04d}", repr(float(observed[i])),
                             int(events[i]), f"subj{i:04d}", split,
                             f"g{i:04d}"])
    return manifest_path, dump_path


def _smooth_field_3d(shape, scale, rng) -> np.ndarray:
    from ..registration import _sample_trilinear
    z, h, w = shape
    coarse = rng.normal(scale=scale, size=(3, 4, 4, 3))
    pos = np.indices(shape, dtype=np.float64).transpose(1, 2, 3, 0)
    pos[..., 0] *= 2.0 / max(z - 1, 1)
    pos[..., 1] *= 3.0 / max(h - 1, 1)
    pos[..., 2] *= 3.0 / max(w - 1, 1)
    vals, _ = _sample_trilinear(coarse, pos.reshape(-1, 3), with_grad=False)
    return vals.reshape(z, h, w, 3)


def make_registration_pair(out_dir: str | Path, seed: int = 0,
                           shape=(12, 64, 64), warp_scale: float = 2.0) -> dict:
    """Fixed/moving intensity volumes plus label masks related by a smooth warp.

    Returns the four file paths.  The moving volume samples the fixed one at
    x + w(x), so label overlap before registration is imperfect and a good
    registration improves it.
    """
    from ..registration import DisplacementField, warp as apply_warp
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = generator(seed)
    z, h, w = shape

    zz, yy, xx = np.indices(shape, dtype=np.float64)
    intensity = np.zeros(shape, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.float32)
    centers = [(z * 0.5, h * 0.35, w * 0.35), (z * 0.5, h * 0.6, w * 0.65)]
    radii = [(z * 0.3, h * 0.2, w * 0.18), (z * 0.35, h * 0.22, w * 0.2)]
    for lab, (c, r) in enumerate(zip(centers, radii), start=1):
        inside = (((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2
                  + ((xx - c[2]) / r[2]) ** 2) <= 1.0
        intensity[inside] = float(lab)
        labels[inside] = float(lab)
    intensity += rng.normal(scale=0.05, size=shape)

    field = _smooth_field_3d(shape, warp_scale, rng)
    disp = DisplacementField(u=field)
    moving = apply_warp(intensity, disp, interpolation="trilinear")
    moving_labels = apply_warp(labels, disp, interpolation="nearest")

    paths = {}
    for name, data in (("fixed", intensity), ("moving", moving),
                       ("fixed_labels", labels), ("moving_labels", moving_labels)):
        p = out_dir / f"{name}.rawr"
        write_volume(RasterVolume(data=np.asarray(data, dtype=np.float32),
                                  spacing_mm=(1.0, 1.0, 1.0), modality="SYNTH",
                                  volume_id=name), p)
        paths[name] = str(p)
    return paths
