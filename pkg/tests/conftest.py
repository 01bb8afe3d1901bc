from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np
import pytest
import torch
from PIL import Image

from tucan.artifacts import ArtifactManager, RunPaths
from tucan.colorspace import BinTable, SoftEncoder, canonical_bins
from tucan.datapipe import SampleRecord, load_records, scan_dataset
from tucan.tucan_net import NetworkConfig, TucanNet, build

TOY_SIZE = 64


def warm_image(rng: np.random.Generator, size: int = TOY_SIZE) -> np.ndarray:
    """Orange-ish gradient whose chroma follows its brightness."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-6)
    offset = rng.uniform(-15, 15)
    red = 170 + 70 * t + offset
    green = 90 + 70 * t + offset
    blue = 30 + 40 * t + offset
    image = np.stack([red, green, blue], axis=-1) + rng.normal(0, 2, (size, size, 3))
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def write_warm_images(directory: Path, count: int, size: int = TOY_SIZE, seed: int = 0) -> List[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for index in range(count):
        path = directory / f"img_{index:03d}.png"
        Image.fromarray(warm_image(rng, size)).save(path)
        paths.append(path)
    return paths


def write_gray_ramp(path: Path, width: int = 70, height: int = 50) -> Path:
    ramp = np.tile(np.linspace(60, 200, width), (height, 1))
    Image.fromarray(np.rint(ramp).astype(np.uint8)).save(path)
    return path


def lattice_bins(a_range: Tuple[int, int], b_range: Tuple[int, int], grid: float = 10.0) -> BinTable:
    a_values = np.arange(a_range[0], a_range[1] + grid, grid)
    b_values = np.arange(b_range[0], b_range[1] + grid, grid)
    centers = np.array([(a, b) for a in a_values for b in b_values], dtype=np.float64)
    return BinTable(grid_size=grid, centers=centers)


def write_center_list(path: Path, count: int = 313) -> np.ndarray:
    """Save ``count`` grid-10 centers as int64 ``.npy``: the packaged table reversed, then extra lattice cells."""
    base = canonical_bins().centers[::-1].astype(np.int64)
    taken = {tuple(center) for center in base}
    extra = [(a, b) for a in range(-110, 130, 10) for b in range(-130, 130, 10) if (a, b) not in taken]
    centers = np.vstack([base, np.array(extra[: count - len(base)], dtype=np.int64)])
    np.save(path, centers)
    return centers


@pytest.fixture(autouse=True)
def _no_data_root(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("TUCAN_DATA_ROOT", raising=False)


@pytest.fixture
def small_bins() -> BinTable:
    return lattice_bins((-20, 40), (-20, 60))


@pytest.fixture
def toy_config(small_bins: BinTable) -> NetworkConfig:
    return NetworkConfig.toy(small_bins.Q)


@pytest.fixture
def toy_model(toy_config: NetworkConfig, small_bins: BinTable) -> TucanNet:
    torch.manual_seed(0)
    return build(toy_config, small_bins)


@pytest.fixture
def image_dir(tmp_path: Path) -> Path:
    directory = tmp_path / "images"
    write_warm_images(directory, 10)
    return directory


@pytest.fixture
def records(image_dir: Path, small_bins: BinTable) -> List[SampleRecord]:
    return load_records(scan_dataset(image_dir), SoftEncoder(small_bins), TOY_SIZE)


@pytest.fixture
def run_artifacts(tmp_path: Path) -> Tuple[ArtifactManager, RunPaths]:
    manager = ArtifactManager(tmp_path / "runs")
    return manager, manager.create_run("test-run")
