from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Dict, Optional


class TrainScheme(str, Enum):
    END_TO_END = "end_to_end"
    PROGRESSIVE = "progressive"
    FINETUNE = "finetune"


class Level(IntEnum):
    """Progression levels of the decoder, ordered by resolution."""

    PCU = 0
    UP1 = 1
    UP2 = 2
    UP3 = 3
    UP4 = 4
    FINAL = 5

    @property
    def label(self) -> str:
        return _LEVEL_LABELS[self]


_LEVEL_LABELS = {
    Level.PCU: "PCU",
    Level.UP1: "1stUP",
    Level.UP2: "2ndUP",
    Level.UP3: "3rdUP",
    Level.UP4: "4thUP",
    Level.FINAL: "final",
}


class RunStatus(str, Enum):
    PLANNED = "planned"
    RUNNING = "running"
    COMPLETE = "complete"
    FAILED = "failed"


@dataclass
class EpochRecord:
    epoch: int
    level: Level
    l_q: float
    l_c: float
    total: float
    batches: int
    duration_seconds: float

    def to_dict(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "level": self.level.label,
            "l_q": self.l_q,
            "l_c": self.l_c,
            "total": self.total,
            "batches": self.batches,
            "duration_seconds": self.duration_seconds,
        }


@dataclass
class RunManifest:
    run_id: str
    plan: Dict[str, object]
    config_fingerprint: str
    bins_fingerprint: str
    total_epochs: int
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    previews: list[str] = field(default_factory=list)
    status: RunStatus = RunStatus.PLANNED

    def to_dict(self) -> Dict[str, object]:
        return {
            "run_id": self.run_id,
            "plan": self.plan,
            "total_epochs": self.total_epochs,
            "config_fingerprint": self.config_fingerprint,
            "bins_fingerprint": self.bins_fingerprint,
            "epochs": [record.to_dict() for record in self.epochs],
            "checkpoints": self.checkpoints,
            "previews": self.previews,
            "status": self.status.value,
        }


@dataclass(frozen=True)
class ImageMetrics:
    path: str
    psnr: float
    ssim: float
    lpips: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return {"path": self.path, "psnr": self.psnr, "ssim": self.ssim, "lpips": self.lpips}


@dataclass
class MetricReport:
    model_id: str
    dataset_id: str
    convention: str
    lpips_plugin: Optional[str] = None
    rows: list[ImageMetrics] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return _mean([row.psnr for row in self.rows])

    @property
    def mean_ssim(self) -> float:
        return _mean([row.ssim for row in self.rows])

    @property
    def mean_lpips(self) -> Optional[float]:
        if self.lpips_plugin is None:
            return None
        return _mean([row.lpips for row in self.rows if row.lpips is not None])

    def to_dict(self) -> Dict[str, object]:
        return {
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "convention": self.convention,
            "lpips_plugin": self.lpips_plugin,
            "rows": [row.to_dict() for row in self.rows],
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "mean_lpips": self.mean_lpips,
        }


def _mean(values: list[float]) -> float:
    if not values:
        return math.nan
    return math.fsum(values) / len(values)
