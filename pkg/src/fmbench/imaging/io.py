"""Volume ingestion and serialization: NIfTI-1, raw-raster, manifest CSV.

Two on-disk volume formats are supported:

* NIfTI-1 (``.nii``/``.nii.gz``), int16 or float32 payloads, with
  ``scl_slope``/``scl_inter`` applied and spacing taken from ``pixdim``;
* raw-raster: a little-endian float32 payload in z-major order plus a JSON
  sidecar ``<path>.json`` holding ``{"shape":[Z,Y,X],"spacing_mm":[..],
  "dtype":"f32le","modality":...}``.

NIfTI stores samples x-fastest, so the payload reshaped C-order as
(nz, ny, nx) already lands in the harness (z, y, x) axis order.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, FormatError, LeakageError
from .types import MODALITIES, LabelMask, RasterVolume

_NIFTI_HDR_SIZE = 348
_DT_INT16 = 4
_DT_FLOAT32 = 16
SPLITS = ("train", "val", "test")


def load_volume(path: str | Path) -> RasterVolume:
    """Read a volume from NIfTI-1 or raw-raster, enforcing (z, y, x) order."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return _load_nifti(path)
    return _load_raw_raster(path)


def write_volume(volume: RasterVolume, path: str | Path) -> None:
    """Write a volume in the format implied by the path suffix."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        _write_nifti(volume, path)
    else:
        _write_raw_raster(volume, path)


# -- NIfTI-1 ----------------------------------------------------------------

def _volume_id_for(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".rawr"):
        if name.lower().endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _read_bytes(path: Path) -> bytes:
    if path.name.lower().endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _load_nifti(path: Path) -> RasterVolume:
    blob = _read_bytes(path)
    if len(blob) < _NIFTI_HDR_SIZE:
        raise FormatError(f"{path}: header truncated, field sizeof_hdr unreadable")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from(order + "i", blob, 0)
    if sizeof_hdr != _NIFTI_HDR_SIZE:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(order + "i", blob, 0)
        if sizeof_hdr != _NIFTI_HDR_SIZE:
            raise FormatError(f"{path}: field sizeof_hdr is not 348; not a NIfTI-1 file")
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: field magic is {magic!r}, expected n+1 or ni1")

    dim = struct.unpack_from(order + "8h", blob, 40)
    if dim[0] != 3:
        raise FormatError(f"{path}: field dim[0] is {dim[0]}, only 3D volumes supported")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: field dim holds nonpositive extent {dim[1:4]}")

    (datatype,) = struct.unpack_from(order + "h", blob, 70)
    if datatype == _DT_INT16:
        dtype = np.dtype(order + "i2")
    elif datatype == _DT_FLOAT32:
        dtype = np.dtype(order + "f4")
    else:
        raise FormatError(
            f"{path}: field datatype is {datatype}, only int16 (4) and float32 (16) supported")

    pixdim = struct.unpack_from(order + "8f", blob, 76)
    sx, sy, sz = pixdim[1], pixdim[2], pixdim[3]
    if not all(np.isfinite([sx, sy, sz])) or min(sx, sy, sz) <= 0:
        raise FormatError(f"{path}: field pixdim holds nonpositive spacing {pixdim[1:4]}")

    (vox_offset,) = struct.unpack_from(order + "f", blob, 108)
    offset = int(vox_offset)
    if offset < _NIFTI_HDR_SIZE:
        raise FormatError(f"{path}: field vox_offset is {vox_offset}, below header size")
    scl_slope, scl_inter = struct.unpack_from(order + "2f", blob, 112)

    need = offset + nx * ny * nz * dtype.itemsize
    if len(blob) < need:
        raise FormatError(f"{path}: data payload truncated ({len(blob)} < {need} bytes)")
    raw = np.frombuffer(blob, dtype=dtype, count=nx * ny * nz, offset=offset)
    data = raw.reshape(nz, ny, nx).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * np.float32(slope) + np.float32(scl_inter)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: volume contains non-finite samples")
    return RasterVolume(data=data, spacing_mm=(float(sz), float(sy), float(sx)),
                        modality="CT", volume_id=_volume_id_for(path))


def _write_nifti(volume: RasterVolume, path: Path) -> None:
    nz, ny, nx = volume.data.shape
    sz, sy, sx = volume.spacing_mm
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _DT_FLOAT32)
    struct.pack_into("<h", hdr, 72, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    payload = volume.data.astype("<f4").tobytes(order="C")
    blob = bytes(hdr) + b"\x00" * 4 + payload
    if path.name.lower().endswith(".gz"):
        # mtime=0 keeps gzip output byte-stable across reruns
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)


# -- raw-raster ---------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _load_raw_raster(path: Path) -> RasterVolume:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FormatError(f"{path}: missing raw-raster sidecar {sidecar.name}")
    try:
        meta = json.loads(sidecar.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{sidecar}: sidecar is not valid JSON: {exc}") from exc
    for key in ("shape", "spacing_mm", "dtype", "modality"):
        if key not in meta:
            raise FormatError(f"{sidecar}: sidecar missing field {key!r}")
    if meta["dtype"] != "f32le":
        raise FormatError(f"{sidecar}: field dtype is {meta['dtype']!r}, expected 'f32le'")
    shape = meta["shape"]
    if len(shape) != 3 or any(int(d) < 1 for d in shape):
        raise FormatError(f"{sidecar}: field shape must be [Z,Y,X] positive, got {shape}")
    if meta["modality"] not in MODALITIES:
        raise FormatError(f"{sidecar}: field modality is {meta['modality']!r}")
    z, y, x = (int(d) for d in shape)
    payload = path.read_bytes()
    if len(payload) != 4 * z * y * x:
        raise FormatError(
            f"{path}: payload length {len(payload)} != 4*Z*Y*X = {4 * z * y * x}")
    data = np.frombuffer(payload, dtype="<f4").reshape(z, y, x)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: volume contains non-finite samples")
    return RasterVolume(data=data.copy(), spacing_mm=tuple(float(s) for s in meta["spacing_mm"]),
                        modality=meta["modality"], volume_id=_volume_id_for(path))


def _write_raw_raster(volume: RasterVolume, path: Path) -> None:
    z, y, x = volume.data.shape
    meta = {
        "shape": [z, y, x],
        "spacing_mm": [float(s) for s in volume.spacing_mm],
        "dtype": "f32le",
        "modality": volume.modality,
    }
    _sidecar_path(path).write_text(json.dumps(meta, separators=(",", ":")), "utf-8")
    path.write_bytes(volume.data.astype("<f4").tobytes(order="C"))


def write_raw_raster_2d(data: np.ndarray, path: str | Path, modality: str = "SYNTH") -> None:
    """2D arrays ride the raw-raster format as a single-slice volume."""
    arr = np.asarray(data, dtype=np.float32)[None, ...]
    vol = RasterVolume(data=arr, spacing_mm=(1.0, 1.0, 1.0), modality=modality,
                       volume_id=Path(path).stem)
    _write_raw_raster(vol, Path(path))


def load_mask(path: str | Path) -> LabelMask:
    """Label masks are stored as volumes; values must be nonnegative integers."""
    vol = load_volume(path)
    data = np.rint(vol.data).astype(np.int64)
    if not np.allclose(vol.data, data, atol=1e-3):
        raise DataError(f"{path}: mask samples are not integers")
    return LabelMask(data=data)


# -- manifest CSV -------------------------------------------------------------

_REQUIRED_COLUMNS = ("sample_id", "volume_path", "z_index", "mask_path",
                     "label", "split", "modality", "group_id")


@dataclass
class ManifestRow:
    sample_id: str
    volume_path: str
    z_index: int | None  # None = whole volume
    mask_path: str | None
    label: str
    split: str
    modality: str
    group_id: str
    acquisition_axis: int = 0
    extras: dict = field(default_factory=dict)


def load_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty manifest")
        missing = [c for c in _REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise FormatError(f"{path}: manifest missing columns {missing}")
        rows = []
        seen = set()
        for i, rec in enumerate(reader, start=2):
            sid = rec["sample_id"].strip()
            if not sid:
                raise FormatError(f"{path}:{i}: empty sample_id")
            if sid in seen:
                raise FormatError(f"{path}:{i}: duplicate sample_id {sid!r}")
            seen.add(sid)
            split = rec["split"].strip()
            if split not in SPLITS:
                raise FormatError(f"{path}:{i}: split must be one of {SPLITS}, got {split!r}")
            z_raw = (rec["z_index"] or "").strip()
            extras = {k: v for k, v in rec.items() if k not in _REQUIRED_COLUMNS}
            rows.append(ManifestRow(
                sample_id=sid,
                volume_path=rec["volume_path"].strip(),
                z_index=int(z_raw) if z_raw else None,
                mask_path=(rec["mask_path"] or "").strip() or None,
                label=rec["label"].strip(),
                split=split,
                modality=rec["modality"].strip(),
                group_id=rec["group_id"].strip(),
                acquisition_axis=int(extras.pop("acquisition_axis", 0) or 0),
                extras=extras,
            ))
    return rows


def check_group_disjoint(rows: list[ManifestRow]) -> None:
    """Raise LeakageError if any group_id spans more than one split."""
    by_group: dict[str, set[str]] = {}
    for row in rows:
        by_group.setdefault(row.group_id, set()).add(row.split)
    leaking = sorted(g for g, splits in by_group.items() if len(splits) > 1)
    if leaking:
        raise LeakageError(f"group_id(s) span multiple splits: {leaking[:5]}")


def write_manifest(rows: list[ManifestRow], path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_REQUIRED_COLUMNS)
        for r in rows:
            writer.writerow([
                r.sample_id, r.volume_path,
                "" if r.z_index is None else r.z_index,
                r.mask_path or "", r.label, r.split, r.modality, r.group_id,
            ])
