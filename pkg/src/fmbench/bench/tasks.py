"""Task configuration, split guarding, and feature/target assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..encoders.dump import FeatureDump
from ..errors import (CoverageError, FormatError, LeakageError, ShapeError)
from ..heads.config import MASK_KINDS, ATTENTION_KINDS, HeadConfig, TrainConfig
from ..imaging.io import ManifestRow, check_group_disjoint, load_manifest, load_mask
from ..imaging.masks import mask_to_patch_mask
from ..imaging.types import LabelMask, PatchGrid
from ..heads.forward import sample_representation

TASK_KINDS = ("image_cls", "mask_cls", "volume_cls", "regression", "survival",
              "registration", "prompted_seg")
_METRIC_FOR_KIND = {
    "image_cls": ("accuracy", "balanced_accuracy", "auroc"),
    "mask_cls": ("accuracy", "balanced_accuracy", "auroc"),
    "volume_cls": ("accuracy", "balanced_accuracy", "auroc"),
    "regression": ("r2",),
    "survival": ("c_index",),
    "registration": ("dsc",),
    "prompted_seg": ("dsc",),
}


@dataclass
class TaskSpec:
    task_id: str
    kind: str
    manifest: str
    metric: str
    classes: list[str] = field(default_factory=list)
    head: HeadConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    n_runs: int = 5

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ShapeError(f"unknown task kind {self.kind!r}")
        if self.metric not in _METRIC_FOR_KIND[self.kind]:
            raise ShapeError(
                f"metric {self.metric!r} incompatible with kind {self.kind!r}")
        if self.n_runs < 1:
            raise ShapeError("n_runs must be >= 1")

    @classmethod
    def from_json(cls, path: str | Path) -> "TaskSpec":
        d = json.loads(Path(path).read_text("utf-8"))
        try:
            head = HeadConfig.from_dict(d["head"]) if d.get("head") else None
            train = TrainConfig.from_dict(d.get("train", {}))
            return cls(task_id=d["task_id"], kind=d["kind"], manifest=d["manifest"],
                       metric=d["metric"], classes=list(d.get("classes", [])),
                       head=head, train=train, n_runs=int(d.get("n_runs", 5)))
        except KeyError as exc:
            raise FormatError(f"{path}: task spec missing field {exc}") from exc

    def to_json(self, path: str | Path) -> None:
        d = {"task_id": self.task_id, "kind": self.kind, "manifest": self.manifest,
             "metric": self.metric, "classes": self.classes,
             "head": self.head.to_dict() if self.head else None,
             "train": self.train.to_dict(), "n_runs": self.n_runs}
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True), "utf-8")


@dataclass
class FewShotConfig:
    k_values: tuple = (1, 2, 5, 10, 20, 40)
    n_runs: int = 5
    seed: int = 0

    def __post_init__(self):
        self.k_values = tuple(int(k) for k in self.k_values)
        if any(k < 1 for k in self.k_values):
            raise ShapeError("every few-shot k must be >= 1")


class SplitGuard:
    """Holds test labels hostage until evaluation explicitly unlocks them.

    Training and model-selection code paths receive this wrapper instead of
    raw test labels; touching them early raises LeakageError.
    """

    def __init__(self, labels):
        self._labels = labels
        self._unlocked = False

    def unlock_for_evaluation(self):
        self._unlocked = True
        return self._labels

    @property
    def labels(self):
        if not self._unlocked:
            raise LeakageError("test labels accessed before evaluation phase")
        return self._labels


# -- dataset assembly -----------------------------------------------------------------

def _resize_mask_nearest(mask: np.ndarray, resolution: int) -> np.ndarray:
    if mask.shape == (resolution, resolution):
        return mask
    h, w = mask.shape
    ys = np.clip(((np.arange(resolution) + 0.5) * h / resolution - 0.5).round()
                 .astype(int), 0, h - 1)
    xs = np.clip(((np.arange(resolution) + 0.5) * w / resolution - 0.5).round()
                 .astype(int), 0, w - 1)
    return mask[np.ix_(ys, xs)]


def region_patches(mask2d: np.ndarray, grid: PatchGrid) -> set[int]:
    """Patch indices touched by any nonzero mask pixel (the sample's ROI)."""
    binary = (np.asarray(mask2d) > 0).astype(np.int64)
    return mask_to_patch_mask(LabelMask(binary), grid, 1)


def _feature_maps_for_row(row: ManifestRow, dump: FeatureDump) -> list:
    if row.sample_id in dump:
        return [dump.get(row.sample_id)]
    family = sorted((sid for sid in dump.sample_ids
                     if sid.startswith(row.sample_id + "#")),
                    key=lambda s: int(s.rsplit("#", 1)[1]))
    if not family:
        raise CoverageError(f"features missing for sample {row.sample_id!r}",
                            missing_ids=[row.sample_id])
    return [dump.get(sid) for sid in family]


@dataclass
class SplitData:
    ids: list[str]
    inputs: object  # (n, D) array or list of token sets
    targets: object


@dataclass
class TaskData:
    train: SplitData
    val: SplitData
    test_ids: list[str]
    test_inputs: object
    test_guard: SplitGuard
    class_names: list[str]


def _pack_inputs(head: HeadConfig, reps: list):
    if head.kind in ATTENTION_KINDS:
        return reps
    return np.asarray(reps, dtype=np.float64)


def build_task_data(spec: TaskSpec, rows: list[ManifestRow], dump: FeatureDump,
                    manifest_dir: Path) -> TaskData:
    """Assemble per-split head inputs and targets in manifest order."""
    if spec.head is None:
        raise ShapeError(f"task {spec.task_id!r} has no head config")
    check_group_disjoint(rows)

    missing = [r.sample_id for r in rows
               if r.sample_id not in dump
               and not any(s.startswith(r.sample_id + "#") for s in dump.sample_ids)]
    if missing:
        raise CoverageError(
            f"feature dump misses {len(missing)} manifest sample(s): "
            f"{missing[:10]}", missing_ids=missing)

    needs_mask = spec.head.kind in MASK_KINDS
    grid = PatchGrid(resolution=dump.descriptor.input_resolution,
                     patch_size=dump.descriptor.patch_size)
    is_cls = spec.kind in ("image_cls", "mask_cls", "volume_cls")
    class_index = {c: i for i, c in enumerate(spec.classes)}
    if is_cls and len(spec.classes) < 2:
        raise ShapeError(f"classification task {spec.task_id!r} needs >= 2 classes")

    mask_cache: dict[str, LabelMask] = {}

    def mask_for(row: ManifestRow, n_slices: int):
        if not needs_mask:
            return None
        if row.mask_path is None:
            raise ShapeError(f"sample {row.sample_id!r} lacks mask_path for a mask head")
        key = row.mask_path
        if key not in mask_cache:
            mask_cache[key] = load_mask(manifest_dir / row.mask_path)
        m = mask_cache[key].data
        if row.z_index is not None:
            planes = [m[row.z_index] if m.ndim == 3 else m]
        else:
            planes = [m[k] for k in range(m.shape[0])] if m.ndim == 3 else [m]
        if len(planes) != n_slices:
            raise ShapeError(
                f"sample {row.sample_id!r}: {len(planes)} mask planes for "
                f"{n_slices} feature slices")
        sets = []
        for plane in planes:
            resized = _resize_mask_nearest(plane, grid.resolution)
            if (resized > 0).any():
                sets.append(region_patches(resized, grid))
            else:
                sets.append(set())
        return sets

    def target_for(row: ManifestRow):
        if is_cls:
            if row.label not in class_index:
                raise ShapeError(
                    f"label {row.label!r} of sample {row.sample_id!r} not in task classes")
            return class_index[row.label]
        return float(row.label)

    per_split = {"train": ([], [], []), "val": ([], [], []), "test": ([], [], [])}
    for row in rows:
        maps = _feature_maps_for_row(row, dump)
        rep = sample_representation(spec.head, maps, mask_for(row, len(maps)))
        ids, reps, targets = per_split[row.split]
        ids.append(row.sample_id)
        reps.append(rep)
        targets.append(target_for(row))

    def pack(split):
        ids, reps, targets = per_split[split]
        t = np.asarray(targets, dtype=np.int64 if is_cls else np.float64)
        return SplitData(ids=ids, inputs=_pack_inputs(spec.head, reps), targets=t)

    train, val = pack("train"), pack("val")
    test_ids, test_reps, test_targets = per_split["test"]
    t = np.asarray(test_targets, dtype=np.int64 if is_cls else np.float64)
    return TaskData(train=train, val=val, test_ids=test_ids,
                    test_inputs=_pack_inputs(spec.head, test_reps),
                    test_guard=SplitGuard(t), class_names=list(spec.classes))


def load_task_rows(spec: TaskSpec, base_dir: Path) -> tuple[list[ManifestRow], Path]:
    manifest_path = Path(spec.manifest)
    if not manifest_path.is_absolute():
        manifest_path = base_dir / manifest_path
    rows = load_manifest(manifest_path)
    return rows, manifest_path.parent
