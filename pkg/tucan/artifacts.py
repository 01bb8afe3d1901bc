from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .types import RunManifest


@dataclass(frozen=True)
class RunPaths:
    run_id: str
    base_dir: Path
    checkpoints_dir: Path
    outputs_dir: Path
    logs_dir: Path

    @property
    def manifest_path(self) -> Path:
        return self.base_dir / "run_manifest.json"


class ArtifactManager:
    def __init__(self, base_output_dir: Path) -> None:
        self._base_output_dir = base_output_dir
        self._base_output_dir.mkdir(parents=True, exist_ok=True)

    def create_run(self, run_id: Optional[str] = None) -> RunPaths:
        run_identifier = run_id or datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S_%f")
        base_dir = self._base_output_dir / run_identifier
        checkpoints_dir = base_dir / "checkpoints"
        outputs_dir = base_dir / "outputs"
        logs_dir = base_dir / "logs"
        for directory in (checkpoints_dir, outputs_dir, logs_dir):
            directory.mkdir(parents=True, exist_ok=True)
        return RunPaths(
            run_id=run_identifier,
            base_dir=base_dir,
            checkpoints_dir=checkpoints_dir,
            outputs_dir=outputs_dir,
            logs_dir=logs_dir,
        )

    def write_manifest(self, run_paths: RunPaths, manifest: RunManifest) -> Path:
        path = run_paths.manifest_path
        path.write_text(json.dumps(manifest.to_dict(), indent=2), encoding="utf-8")
        return path

    def persist_config(self, run_paths: RunPaths, config_path: Optional[Path]) -> Optional[Path]:
        if not config_path:
            return None
        target = run_paths.base_dir / "config.conf"
        target.write_text(config_path.read_text(encoding="utf-8"), encoding="utf-8")
        return target

    def write_report(self, run_paths: RunPaths, text: str, name: str = "report.tsv") -> Path:
        report_path = run_paths.outputs_dir / name
        report_path.write_text(text, encoding="utf-8")
        return report_path

    def persist_preview(self, run_paths: RunPaths, label: str, index: int, rgb: np.ndarray) -> Path:
        preview_path = run_paths.outputs_dir / f"preview_{label}_{index}.png"
        Image.fromarray(rgb).save(preview_path)
        return preview_path

    def bins_path(self, run_paths: RunPaths) -> Path:
        return run_paths.base_dir / "bins.txt"
