from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .colorspace import BinTable
from .errors import CheckpointError
from .logging_config import get_logger
from .tucan_net import NetworkConfig, TucanNet, build
from .types import Level

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "tucan-checkpoint"
CHECKPOINT_VERSION = 1
_ORDINAL_PATTERN = re.compile(r"^ckpt_(\d+)_e(\d+)\.pt$")


@dataclass
class Checkpoint:
    path: Optional[Path]
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict]
    epoch: int
    level: Level
    network_config: NetworkConfig
    bins: BinTable
    plan: Dict[str, object]
    config_fingerprint: str
    bins_fingerprint: str
    diagnostic: bool = False

    def describe(self) -> Dict[str, object]:
        return {
            "path": str(self.path) if self.path else None,
            "epoch": self.epoch,
            "level": self.level.label,
            "preset": self.network_config.preset,
            "Q": self.bins.Q,
            "config_fingerprint": self.config_fingerprint,
            "bins_fingerprint": self.bins_fingerprint,
            "plan": self.plan,
            "diagnostic": self.diagnostic,
        }


def _bins_payload(bins: BinTable) -> Dict[str, object]:
    return {
        "grid_size": float(bins.grid_size),
        "centers": torch.tensor(np.array(bins.centers), dtype=torch.float64),
        "prior": None if bins.prior is None else torch.tensor(np.array(bins.prior), dtype=torch.float64),
        "weights": None if bins.weights is None else torch.tensor(np.array(bins.weights), dtype=torch.float64),
    }


def _bins_from_payload(payload: Dict[str, object]) -> BinTable:
    def array(value):
        return None if value is None else value.numpy()

    return BinTable(
        grid_size=float(payload["grid_size"]),  # type: ignore[arg-type]
        centers=array(payload["centers"]),
        prior=array(payload["prior"]),
        weights=array(payload["weights"]),
    )


def save_checkpoint(
    path: Path,
    model: TucanNet,
    bins: BinTable,
    epoch: int,
    plan: Dict[str, object],
    optimizer: Optional[torch.optim.Optimizer] = None,
    diagnostic: bool = False,
) -> Path:
    """Write a self-contained checkpoint; ``epoch`` counts completed epochs."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network_config": json.dumps(model.config.to_dict(), sort_keys=True),
        "config_fingerprint": model.config.fingerprint(),
        "bins": _bins_payload(bins),
        "bins_fingerprint": bins.fingerprint(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "level": int(model.active_level),
        "plan": json.dumps(plan, sort_keys=True),
        "diagnostic": bool(diagnostic),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.info("Saved checkpoint %s (epoch %d, level %s)", path, epoch, model.active_level.label)
    return path


def load_checkpoint(
    path: Path,
    expected_config: Optional[NetworkConfig] = None,
    expected_bins: Optional[BinTable] = None,
    map_location: str = "cpu",
) -> Checkpoint:
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as error:
        raise CheckpointError(f"Unreadable checkpoint {path}: {error}") from error
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a tucan checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )

    try:
        config = NetworkConfig.from_dict(json.loads(payload["network_config"]))
        bins = _bins_from_payload(payload["bins"])
        plan = json.loads(payload["plan"])
        level = Level(payload["level"])
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f"Malformed checkpoint {path}: {error}") from error

    if config.fingerprint() != payload["config_fingerprint"]:
        raise CheckpointError(f"Network config fingerprint in {path} does not match its contents")
    if bins.fingerprint() != payload["bins_fingerprint"]:
        raise CheckpointError(f"Bin table fingerprint in {path} does not match its contents")
    if expected_config is not None and expected_config.fingerprint() != config.fingerprint():
        raise CheckpointError(
            f"{path} was trained with a different network config "
            f"({config.preset}, Q={config.num_bins}) than the one requested "
            f"({expected_config.preset}, Q={expected_config.num_bins})"
        )
    if expected_bins is not None and expected_bins.fingerprint() != bins.fingerprint():
        raise CheckpointError(f"{path} was trained with a different bin table (Q={bins.Q})")

    return Checkpoint(
        path=path,
        model_state=payload["model"],
        optimizer_state=payload["optimizer"],
        epoch=int(payload["epoch"]),
        level=level,
        network_config=config,
        bins=bins,
        plan=plan,
        config_fingerprint=payload["config_fingerprint"],
        bins_fingerprint=payload["bins_fingerprint"],
        diagnostic=bool(payload.get("diagnostic", False)),
    )


def restore_model(checkpoint: Checkpoint) -> TucanNet:
    """Rebuild the network stored in ``checkpoint``, temporary head included."""
    model = build(checkpoint.network_config, checkpoint.bins)
    if checkpoint.level != Level.FINAL:
        model.attach_temp_head(checkpoint.level)
    try:
        model.load_state_dict(checkpoint.model_state)
    except RuntimeError as error:
        raise CheckpointError(f"Checkpoint weights do not fit the stored network: {error}") from error
    return model


class CheckpointStore:
    """Ordinal checkpoint files inside one run directory."""

    def __init__(self, directory: Path) -> None:
        self._directory = directory
        self._directory.mkdir(parents=True, exist_ok=True)
        self._ordinal = max((ordinal for ordinal, _ in self._entries()), default=0)

    def _entries(self) -> List[tuple]:
        entries = []
        for path in self._directory.glob("ckpt_*.pt"):
            match = _ORDINAL_PATTERN.match(path.name)
            if match:
                entries.append((int(match.group(1)), path))
        return sorted(entries)

    def next_path(self, epoch: int) -> Path:
        self._ordinal += 1
        return self._directory / f"ckpt_{self._ordinal:03d}_e{epoch}.pt"

    def diagnostic_path(self, epoch: int) -> Path:
        return self._directory / f"diagnostic_e{epoch}.pt"

    def list(self) -> List[Path]:
        return [path for _, path in self._entries()]

    def get_latest(self) -> Optional[Path]:
        entries = self._entries()
        if not entries:
            return None
        return entries[-1][1]
