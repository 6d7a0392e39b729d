"""Synthetic prompt generation and the prompted-segmentation protocol.

Box prompts perturb the tight ground-truth box with per-side integer offsets
drawn uniformly from [-5, +20] (positive = outward); point prompts sample
uniformly from mask pixels more than 2 px (city-block) from any background,
falling back to the full mask when that interior is empty.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, ProtocolError, ShapeError
from .imaging.io import load_volume, write_raw_raster_2d
from .registration import dice
from .rng import derive_key, generator

OFFSET_LO, OFFSET_HI = -5, 20
CONTOUR_MARGIN = 2


@dataclass(frozen=True)
class BoxPrompt:
    x0: int
    y0: int
    x1: int
    y1: int
    fallback: bool = False  # tight box substituted after repeated degeneracy

    def validate(self, width: int, height: int) -> None:
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ShapeError(f"box {self} violates bounds {width}x{height}")


@dataclass(frozen=True)
class PointPrompt:
    x: int
    y: int
    fallback: bool = False  # interior was empty; drawn from the full mask


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyMaskError("cannot prompt an empty mask")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def synth_box_prompt(mask: np.ndarray, seed: int, max_attempts: int = 100) -> BoxPrompt:
    """Perturbed bounding box; resamples degenerate draws, then falls back."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    tx0, ty0, tx1, ty1 = _tight_box(mask)
    rng = generator(seed)
    for _ in range(max_attempts):
        left, top, right, bottom = rng.integers(OFFSET_LO, OFFSET_HI + 1, size=4)
        x0 = max(0, tx0 - left)
        y0 = max(0, ty0 - top)
        x1 = min(w, tx1 + right)
        y1 = min(h, ty1 + bottom)
        if x0 < x1 and y0 < y1:
            box = BoxPrompt(x0=int(x0), y0=int(y0), x1=int(x1), y1=int(y1))
            box.validate(w, h)
            return box
    box = BoxPrompt(x0=tx0, y0=ty0, x1=tx1, y1=ty1, fallback=True)
    box.validate(w, h)
    return box


def interior_mask(mask: np.ndarray, margin: int = CONTOUR_MARGIN) -> np.ndarray:
    """Mask pixels with city-block distance > margin to background.

    The image border counts as background, so the interior of a full-image
    mask still excludes a ``margin`` band along the edges.
    """
    mask = np.asarray(mask).astype(bool)
    padded = np.pad(mask, 1, constant_values=False)
    dist = ndimage.distance_transform_cdt(padded, metric="taxicab")[1:-1, 1:-1]
    return dist > margin


def synth_point_prompt(mask: np.ndarray, seed: int) -> PointPrompt:
    """Uniform draw over the eroded interior; full-mask fallback is flagged."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyMaskError("cannot prompt an empty mask")
    interior = interior_mask(mask)
    fallback = not interior.any()
    pool = mask if fallback else interior
    ys, xs = np.nonzero(pool)
    k = int(generator(seed).integers(ys.size))
    return PointPrompt(x=int(xs[k]), y=int(ys[k]), fallback=fallback)


# -- segmenters ----------------------------------------------------------------------

def reference_box_fill_segmenter(image: np.ndarray, prompt) -> np.ndarray:
    """Harness baseline: box -> box interior; point -> bright component fill."""
    image = np.asarray(image, dtype=np.float64)
    out = np.zeros(image.shape, dtype=np.int64)
    if isinstance(prompt, BoxPrompt):
        out[prompt.y0:prompt.y1, prompt.x0:prompt.x1] = 1
        return out
    if isinstance(prompt, PointPrompt):
        median = np.median(image)
        bright = image > median
        if not bright[prompt.y, prompt.x]:
            return out
        labels, _ = ndimage.label(bright)
        out[labels == labels[prompt.y, prompt.x]] = 1
        return out
    raise ShapeError(f"unknown prompt type {type(prompt).__name__}")


class SubprocessSegmenter:
    """Promptable-segmenter plugin: ``CMD IMAGE.rawr PROMPT.json OUT.rawr``.

    The image and output mask ride the raw-raster format as single-slice
    volumes; the prompt JSON is ``{"kind":"box","coords":[x0,y0,x1,y1]}`` or
    ``{"kind":"point","coords":[x,y]}``.  Exit code 0 signals success.
    """

    def __init__(self, command: list[str]):
        self.command = list(command)

    def __call__(self, image: np.ndarray, prompt) -> np.ndarray:
        if isinstance(prompt, BoxPrompt):
            payload = {"kind": "box", "coords": [prompt.x0, prompt.y0,
                                                 prompt.x1, prompt.y1]}
        elif isinstance(prompt, PointPrompt):
            payload = {"kind": "point", "coords": [prompt.x, prompt.y]}
        else:
            raise ShapeError(f"unknown prompt type {type(prompt).__name__}")
        with tempfile.TemporaryDirectory(prefix="fmbench-seg-") as tmp:
            img_path = Path(tmp) / "image.rawr"
            prompt_path = Path(tmp) / "prompt.json"
            out_path = Path(tmp) / "mask.rawr"
            write_raw_raster_2d(np.asarray(image, dtype=np.float64), img_path)
            prompt_path.write_text(json.dumps(payload), "utf-8")
            proc = subprocess.run(self.command + [str(img_path), str(prompt_path),
                                                  str(out_path)],
                                  capture_output=True, text=True)
            if proc.returncode != 0:
                raise ProtocolError(
                    f"segmenter exited {proc.returncode}: {proc.stderr.strip()}")
            if not out_path.exists():
                raise ProtocolError("segmenter wrote no output mask")
            vol = load_volume(out_path)
            mask = np.rint(vol.data[0]).astype(np.int64)
        if mask.shape != np.asarray(image).shape:
            raise ProtocolError(
                f"segmenter mask shape {mask.shape} != image {np.asarray(image).shape}")
        return mask


# -- evaluation protocol ----------------------------------------------------------------

@dataclass
class PromptInstance:
    sample_id: str
    image: np.ndarray
    mask: np.ndarray  # binary ground truth for one label
    label: str


def evaluate_prompted(instances: list[PromptInstance], segmenter,
                      prompt_kind: str, seed: int = 0):
    """One synthetic prompt per (slice, label) instance; per-label mean DSC.

    The overall figure is the unweighted mean over per-label means.  Instance
    seeds derive from (seed, sample_id, label), so evaluation order does not
    matter.
    """
    if prompt_kind not in ("box", "point"):
        raise ShapeError(f"prompt_kind must be box|point, got {prompt_kind!r}")
    per_label: dict[str, list[float]] = {}
    flagged = 0
    for inst in instances:
        inst_seed = derive_key(seed, "prompt", inst.sample_id, inst.label)
        if prompt_kind == "box":
            prompt = synth_box_prompt(inst.mask, inst_seed)
        else:
            prompt = synth_point_prompt(inst.mask, inst_seed)
        if getattr(prompt, "fallback", False):
            flagged += 1
        pred = np.asarray(segmenter(inst.image, prompt))
        if pred.shape != inst.mask.shape:
            raise ProtocolError(
                f"segmenter output shape {pred.shape} != mask "
                f"{inst.mask.shape} for sample {inst.sample_id!r}")
        per_label.setdefault(inst.label, []).append(dice(pred > 0, inst.mask > 0))
    label_means = {lab: float(np.mean(scores)) for lab, scores in
                   sorted(per_label.items())}
    overall = float(np.mean(list(label_means.values()))) if label_means else 0.0
    return {"per_label": label_means, "overall": overall,
            "n_instances": len(instances), "n_flagged_prompts": flagged,
            "prompt_kind": prompt_kind, "seed": seed}
