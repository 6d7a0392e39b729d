"""Head and training configuration plus trained-head serialization (HEAD1)."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, FormatError, ShapeError

HEAD_KINDS = ("cls_linear", "patch_pool_linear", "attention_pool",
              "mask_pool_linear", "mask_attention", "mlp_regression")
POOLED_KINDS = ("patch_pool_linear", "mask_pool_linear")
ATTENTION_KINDS = ("attention_pool", "mask_attention")
MASK_KINDS = ("mask_pool_linear", "mask_attention")

# The grid size is fixed at 10; the log-spaced range is a default and is
# recorded in every report so runs stay comparable.
DEFAULT_LR_GRID = tuple(float(f"{v:.10g}") for v in np.logspace(-4, 1, 10))


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    n_outputs: int
    pooling: str | None = None  # set iff kind is a pooled variant
    hidden_dim: int | None = None  # MLP only

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ShapeError(f"unknown head kind {self.kind!r}")
        if self.n_outputs < 1:
            raise ShapeError(f"n_outputs must be >= 1, got {self.n_outputs}")
        pooled = self.kind in POOLED_KINDS
        if pooled and self.pooling not in ("mean", "max"):
            raise ShapeError(f"pooled kind {self.kind} needs pooling mean|max")
        if not pooled and self.pooling is not None:
            raise ShapeError(f"pooling set for non-pooled kind {self.kind}")
        if self.kind == "mlp_regression" and (self.hidden_dim or 0) < 1:
            object.__setattr__(self, "hidden_dim", 64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_outputs": self.n_outputs,
                "pooling": self.pooling, "hidden_dim": self.hidden_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(kind=d["kind"], n_outputs=int(d["n_outputs"]),
                   pooling=d.get("pooling"), hidden_dim=d.get("hidden_dim"))


@dataclass(frozen=True)
class TrainConfig:
    lr_grid: tuple = DEFAULT_LR_GRID
    epochs: int = 50
    batch_size: int = 256
    momentum: float = 0.9
    seed: int = 0
    scheduler: str = "cosine"

    def __post_init__(self):
        grid = tuple(float(lr) for lr in self.lr_grid)
        object.__setattr__(self, "lr_grid", grid)
        if len(grid) != 10:
            raise ShapeError(f"lr_grid must hold exactly 10 values, got {len(grid)}")
        if any(lr <= 0 for lr in grid) or any(a >= b for a, b in zip(grid, grid[1:])):
            raise ShapeError("lr_grid must be strictly increasing positive reals")
        if not 0 <= self.momentum < 1:
            raise ShapeError(f"momentum must be in [0,1), got {self.momentum}")
        if self.scheduler != "cosine":
            raise ShapeError(f"only the cosine scheduler is supported, got {self.scheduler!r}")

    def to_dict(self) -> dict:
        return {"lr_grid": list(self.lr_grid), "epochs": self.epochs,
                "batch_size": self.batch_size, "momentum": self.momentum,
                "seed": self.seed, "scheduler": self.scheduler}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = {k: d[k] for k in ("epochs", "batch_size", "momentum", "seed") if k in d}
        if "lr_grid" in d:
            kwargs["lr_grid"] = tuple(d["lr_grid"])
        return cls(**kwargs)


@dataclass
class TrainedHead:
    config: HeadConfig
    weights: np.ndarray
    best_lr: float
    val_score: float
    seed: int
    input_dim: int
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.weights)):
            raise DataError("trained head weights contain non-finite values")


_HEAD_MAGIC = b"HEAD1"


def save_head(head: TrainedHead, path: str | Path) -> None:
    meta = {
        "config": head.config.to_dict(),
        "best_lr": head.best_lr,
        "val_score": head.val_score,
        "seed": head.seed,
        "input_dim": head.input_dim,
        "n_weights": int(head.weights.size),
    }
    blob = json.dumps(meta, separators=(",", ":"), ensure_ascii=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(head.weights.astype("<f4").tobytes())


def load_head(path: str | Path) -> TrainedHead:
    raw = Path(path).read_bytes()
    if raw[:5] != _HEAD_MAGIC:
        raise FormatError(f"{path}: magic mismatch, expected HEAD1")
    (hlen,) = struct.unpack_from("<I", raw, 5)
    meta = json.loads(raw[9:9 + hlen].decode("utf-8"))
    n = int(meta["n_weights"])
    weights = np.frombuffer(raw, dtype="<f4", count=n, offset=9 + hlen)
    if weights.size != n:
        raise FormatError(f"{path}: weight blob truncated")
    return TrainedHead(config=HeadConfig.from_dict(meta["config"]),
                       weights=weights.astype(np.float64),
                       best_lr=float(meta["best_lr"]),
                       val_score=float(meta["val_score"]),
                       seed=int(meta["seed"]),
                       input_dim=int(meta["input_dim"]))
