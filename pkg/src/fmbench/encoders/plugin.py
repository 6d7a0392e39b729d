"""Foreign encoders as subprocess plugins speaking the FMFD1 dump format.

The plugin command is invoked once per extraction batch as::

    CMD <slices.rawr>

where the input is a raw-raster volume whose z-slices are the preprocessed
inputs, in manifest order.  The plugin must write an FMFD1 dump somewhere,
print that file's path as the last line of stdout, and exit 0.  Sample ids in
the dump must match ``<volume_id>:<z>`` of the input.
"""

from __future__ import annotations

import subprocess
import tempfile
from pathlib import Path

import numpy as np

from ..errors import ProtocolError
from ..imaging.io import write_volume
from ..imaging.types import RasterVolume, Slice2D
from .base import Encoder, FeatureMap
from .dump import FeatureDump


class SubprocessEncoder(Encoder):
    """Adapter that batches slices through an external encoder command."""

    def __init__(self, command: list[str]):
        self.command = list(command)
        self.descriptor = None  # known only after the first batch

    def encode_batch(self, slices: list[Slice2D]) -> list[FeatureMap]:
        if not slices:
            return []
        side = slices[0].data.shape[0]
        stack = np.stack([s.data for s in slices])
        vol = RasterVolume(data=stack, spacing_mm=(1.0, 1.0, 1.0),
                           modality="SYNTH", volume_id="batch")
        with tempfile.TemporaryDirectory(prefix="fmbench-plugin-") as tmp:
            in_path = Path(tmp) / "batch.rawr"
            write_volume(vol, in_path)
            proc = subprocess.run(self.command + [str(in_path)],
                                  capture_output=True, text=True)
            if proc.returncode != 0:
                raise ProtocolError(
                    f"encoder plugin exited {proc.returncode}: {proc.stderr.strip()}")
            lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
            if not lines:
                raise ProtocolError("encoder plugin printed no dump path on stdout")
            dump_path = Path(lines[-1].strip())
            if not dump_path.exists():
                raise ProtocolError(f"encoder plugin named missing dump {dump_path}")
            dump = FeatureDump(dump_path)
            if dump.descriptor.input_resolution != side:
                raise ProtocolError(
                    f"plugin dump resolution {dump.descriptor.input_resolution} "
                    f"!= slice side {side}")
            self.descriptor = dump.descriptor
            out = []
            for i, slc in enumerate(slices):
                sid = f"batch:{i}"
                if sid not in dump:
                    raise ProtocolError(f"plugin dump missing record {sid!r}")
                fm = dump.get(sid)
                out.append(FeatureMap(class_token=fm.class_token,
                                      patch_tokens=fm.patch_tokens,
                                      descriptor=fm.descriptor,
                                      source=(slc.volume_id, slc.z_index)))
            return out

    def encode(self, slc: Slice2D) -> FeatureMap:
        return self.encode_batch([slc])[0]
