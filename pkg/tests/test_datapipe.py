from __future__ import annotations

import logging
from pathlib import Path
from typing import List

import numpy as np
import pytest
import torch

from conftest import TOY_SIZE, write_gray_ramp, write_warm_images
from tucan.colorspace import BinTable, LabImage, SoftEncoder, denormalize_lightness, lab_to_rgb
from tucan.datapipe import (
    SampleRecord,
    batches,
    collate,
    load_records,
    load_rgb,
    prefetch,
    prepare_sample,
    resize_rgb,
    scan_dataset,
)
from tucan.errors import DatasetError


def test_scan_orders_lexicographically(tmp_path: Path) -> None:
    directory = tmp_path / "data"
    write_warm_images(directory / "b", 5, seed=1)
    write_warm_images(directory / "a", 5, seed=2)
    paths = scan_dataset(directory)
    assert len(paths) == 10
    relative = [path.relative_to(directory).as_posix() for path in paths]
    assert relative == sorted(relative)
    assert relative[0] == "a/img_000.png"
    assert scan_dataset(directory) == paths


def test_scan_skips_corrupt_files(image_dir: Path, caplog: pytest.LogCaptureFixture) -> None:
    (image_dir / "img_004.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        paths = scan_dataset(image_dir)
    assert len(paths) == 9
    assert image_dir / "img_004.png" not in paths
    assert sum("Skipping unreadable image" in record.message for record in caplog.records) == 1


def test_scan_errors(tmp_path: Path) -> None:
    with pytest.raises(DatasetError):
        scan_dataset(tmp_path / "absent")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError):
        scan_dataset(tmp_path / "empty")


def test_split_manifest_and_limit(image_dir: Path, tmp_path: Path) -> None:
    manifest = tmp_path / "split.txt"
    manifest.write_text("# validation\nimg_007.png\nimg_002.png\n\nimg_005.png\n", encoding="utf-8")
    paths = scan_dataset(image_dir, split_manifest=manifest)
    assert [path.name for path in paths] == ["img_002.png", "img_005.png", "img_007.png"]
    assert len(scan_dataset(image_dir, limit=4)) == 4


def test_prepare_sample_at_input_size(image_dir: Path, small_bins: BinTable) -> None:
    rgb, grayscale = load_rgb(image_dir / "img_000.png")
    assert not grayscale
    record = prepare_sample(rgb, SoftEncoder(small_bins), TOY_SIZE, resolutions=(3, 16))
    assert record.size == TOY_SIZE
    assert record.lightness.dtype == np.float32
    assert record.lightness.min() >= -1.0 and record.lightness.max() <= 1.0

    indices, weights = record.encoding(3)
    assert indices.shape == (3, 3, 5)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
    assert record.ab_at(16).shape == (16, 16, 2)

    lab = LabImage(L=denormalize_lightness(record.lightness.astype(np.float64)), ab=record.ab)
    assert np.abs(lab_to_rgb(lab).astype(int) - rgb.astype(int)).max() <= 1


def test_prepare_sample_resizes_larger_sources(small_bins: BinTable) -> None:
    rgb = np.random.default_rng(0).integers(0, 256, size=(90, 120, 3), dtype=np.uint8)
    record = prepare_sample(rgb, SoftEncoder(small_bins), TOY_SIZE)
    assert record.lightness.shape == (TOY_SIZE, TOY_SIZE)
    assert record.ab.shape == (TOY_SIZE, TOY_SIZE, 2)
    assert resize_rgb(rgb, TOY_SIZE).shape == (TOY_SIZE, TOY_SIZE, 3)


def test_gray_source_has_neutral_chroma(tmp_path: Path, small_bins: BinTable) -> None:
    path = write_gray_ramp(tmp_path / "ramp.png")
    rgb, grayscale = load_rgb(path)
    assert grayscale
    assert rgb.shape == (50, 70, 3)
    record = load_records([path], SoftEncoder(small_bins), TOY_SIZE)[0]
    assert record.grayscale
    assert np.abs(record.ab).max() < 2.0


def test_load_records_skips_undecodable_files(image_dir: Path, small_bins: BinTable) -> None:
    paths = scan_dataset(image_dir)
    paths[3].write_bytes(b"broken after scan")
    records = load_records(paths, SoftEncoder(small_bins), TOY_SIZE)
    assert len(records) == 9
    with pytest.raises(DatasetError):
        load_records([paths[3]], SoftEncoder(small_bins), TOY_SIZE)


def test_batches_sizes_and_determinism() -> None:
    items = list(range(10))
    first = list(batches(items, 4, seed=7, epoch=0))
    assert [len(batch) for batch in first] == [4, 4, 2]
    assert sorted(sum(first, [])) == items
    assert list(batches(items, 4, seed=7, epoch=0)) == first
    assert list(batches(items, 4, seed=7, epoch=1))[0] != first[0]
    with pytest.raises(ValueError):
        list(batches(items, 0, seed=7))


def test_collate_shapes_and_weights(records: List[SampleRecord], small_bins: BinTable) -> None:
    lightness, targets = collate(records[:3], z_size=32, ab_size=64)
    assert lightness.shape == (3, 1, TOY_SIZE, TOY_SIZE)
    assert targets.z.shape == (3, small_bins.Q, 32, 32)
    assert targets.ab.shape == (3, 2, 64, 64)
    assert torch.allclose(targets.z.sum(dim=1), torch.ones(3, 32, 32), atol=1e-5)
    assert torch.equal(targets.pixel_weights, torch.ones(3, 32, 32))

    weights = np.linspace(0.5, 2.0, small_bins.Q)
    fitted = small_bins.with_weights(np.full(small_bins.Q, 1.0 / small_bins.Q), weights)
    encoder = SoftEncoder(fitted)
    weighted = load_records([record.source for record in records[:2]], encoder, TOY_SIZE)
    _, targets = collate(weighted, z_size=4, ab_size=4)
    expected = torch.from_numpy(weights).float()[targets.z.argmax(dim=1)]
    assert torch.equal(targets.pixel_weights, expected)


def test_prefetch_preserves_order_and_errors() -> None:
    assert list(prefetch(iter(range(50)), depth=3)) == list(range(50))
    assert list(prefetch(iter(range(5)), depth=0)) == list(range(5))

    def failing():
        yield 1
        raise RuntimeError("boom")

    stream = prefetch(failing(), depth=2)
    assert next(stream) == 1
    with pytest.raises(RuntimeError, match="boom"):
        next(stream)


def test_cached_records_use_compact_dtypes(records: List[SampleRecord]) -> None:
    record = records[0]
    assert record.resident
    assert record.ab.dtype == np.float32 and record.lightness.dtype == np.float32
    indices, weights = record.encoding(8)
    assert indices.dtype == np.int16 and weights.dtype == np.float32
    assert record.encoding(8)[0] is indices


def test_streamed_records_decode_per_batch(image_dir: Path, small_bins: BinTable, records: List[SampleRecord]) -> None:
    paths = scan_dataset(image_dir)
    streamed = load_records(paths, SoftEncoder(small_bins), TOY_SIZE, cache=False)
    assert len(streamed) == len(records)
    assert not any(record.resident for record in streamed)

    lightness, targets = collate(streamed[:3], z_size=16, ab_size=32)
    cached_lightness, cached_targets = collate(records[:3], z_size=16, ab_size=32)
    assert not any(record.resident for record in streamed)
    assert torch.equal(lightness, cached_lightness)
    assert torch.equal(targets.z, cached_targets.z)
    assert torch.equal(targets.ab, cached_targets.ab)

    loaded = streamed[0].loaded()
    assert loaded.resident and loaded is not streamed[0]
    assert loaded.size == TOY_SIZE and not loaded.grayscale

    paths[4].unlink()
    with pytest.raises(OSError):
        collate([streamed[4]], z_size=16, ab_size=32)
