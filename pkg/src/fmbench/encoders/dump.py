"""FMFD1 feature-dump files: a bit-exact cache of encoder outputs.

Layout: 5-byte magic ``FMFD1``, u32 little-endian header length, UTF-8 JSON
header ``{"encoder_id","embed_dim","grid":[H,W],"records":[{"sample_id",
"offset"}...]}``, then per record D float32 (class token) followed by
H*W*D float32 (patch tokens, row-major), all little-endian.  Record offsets
are byte offsets from the end of the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .base import EncoderDescriptor, FeatureMap

MAGIC = b"FMFD1"


def _record_nbytes(descriptor: EncoderDescriptor) -> int:
    d = descriptor
    return 4 * (d.embed_dim + d.grid_h * d.grid_w * d.embed_dim)


def write_feature_dump(maps: list[FeatureMap], path: str | Path) -> None:
    """Write an ordered sequence of feature maps sharing one descriptor."""
    path = Path(path)
    if maps:
        desc = maps[0].descriptor
        for m in maps[1:]:
            if m.descriptor != desc:
                raise FormatError(
                    f"descriptor conflict: {m.descriptor.encoder_id!r} vs "
                    f"{desc.encoder_id!r}")
    else:
        desc = EncoderDescriptor("empty", 16, 16, 1)

    rec_size = _record_nbytes(desc)
    records = [{"sample_id": m.sample_id, "offset": i * rec_size}
               for i, m in enumerate(maps)]
    header = {
        "encoder_id": desc.encoder_id,
        "embed_dim": desc.embed_dim,
        "grid": [desc.grid_h, desc.grid_w],
        "input_resolution": desc.input_resolution,
        "patch_size": desc.patch_size,
        "records": records,
    }
    header_bytes = json.dumps(header, separators=(",", ":"), ensure_ascii=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for m in maps:
            fh.write(m.class_token.astype("<f4").tobytes())
            fh.write(m.patch_tokens.astype("<f4").tobytes(order="C"))


class FeatureDump:
    """Random-access reader over a sealed FMFD1 file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        blob = self.path.read_bytes()
        if blob[:5] != MAGIC:
            raise FormatError(f"{self.path}: magic mismatch, expected FMFD1")
        if len(blob) < 9:
            raise FormatError(f"{self.path}: header length field truncated")
        (hlen,) = struct.unpack_from("<I", blob, 5)
        if len(blob) < 9 + hlen:
            raise FormatError(f"{self.path}: JSON header truncated")
        try:
            header = json.loads(blob[9:9 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.path}: malformed JSON header: {exc}") from exc
        for key in ("encoder_id", "embed_dim", "grid", "records"):
            if key not in header:
                raise FormatError(f"{self.path}: header missing field {key!r}")
        gh, gw = (int(v) for v in header["grid"])
        patch = int(header.get("patch_size", 16))
        self.descriptor = EncoderDescriptor(
            encoder_id=header["encoder_id"],
            input_resolution=int(header.get("input_resolution", gh * patch)),
            patch_size=patch,
            embed_dim=int(header["embed_dim"]),
        )
        if (self.descriptor.grid_h, self.descriptor.grid_w) != (gh, gw):
            raise FormatError(f"{self.path}: grid field inconsistent with geometry")
        self._payload = blob[9 + hlen:]
        self._offsets: dict[str, int] = {}
        self._order: list[str] = []
        rec_size = _record_nbytes(self.descriptor)
        for rec in header["records"]:
            sid, off = rec["sample_id"], int(rec["offset"])
            if off + rec_size > len(self._payload):
                raise FormatError(
                    f"{self.path}: payload truncated for record {sid!r} "
                    f"(need {off + rec_size}, have {len(self._payload)})")
            self._offsets[sid] = off
            self._order.append(sid)

    def __len__(self) -> int:
        return len(self._order)

    @property
    def sample_ids(self) -> list[str]:
        return list(self._order)

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._offsets

    def get(self, sample_id: str) -> FeatureMap:
        if sample_id not in self._offsets:
            raise KeyError(sample_id)
        d = self.descriptor
        off = self._offsets[sample_id]
        cls_n = d.embed_dim
        grid_n = d.grid_h * d.grid_w * d.embed_dim
        cls = np.frombuffer(self._payload, dtype="<f4", count=cls_n, offset=off)
        tokens = np.frombuffer(self._payload, dtype="<f4", count=grid_n,
                               offset=off + 4 * cls_n)
        volume_id, _, z_part = sample_id.rpartition(":")
        source = (volume_id, int(z_part)) if volume_id and z_part.isdigit() else (sample_id, 0)
        return FeatureMap(
            class_token=cls.copy(),
            patch_tokens=tokens.reshape(d.grid_h, d.grid_w, d.embed_dim).copy(),
            descriptor=d,
            source=source,
            sample_id=sample_id,
        )

    def maps(self) -> list[FeatureMap]:
        return [self.get(sid) for sid in self._order]


def read_feature_dump(path: str | Path) -> list[FeatureMap]:
    """Read all feature maps back, in writing order."""
    return FeatureDump(path).maps()
