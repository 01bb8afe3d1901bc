"""Dataset scanning, sample preparation and deterministic batching."""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.nn import functional as F

from .colorspace import SoftEncoder, densify, rgb_to_lab, normalize_lightness
from .errors import DatasetError, InputError
from .logging_config import get_logger
from .losses import Targets, pixel_weights_from

logger = get_logger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
_GRAYSCALE_MODES = {"1", "L", "LA", "I", "I;16", "F"}

T = TypeVar("T")


def scan_dataset(
    root: Path,
    split_manifest: Optional[Path] = None,
    limit: Optional[int] = None,
) -> List[Path]:
    """List readable images under ``root`` in lexicographic order."""
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")

    if split_manifest is not None:
        if not split_manifest.is_file():
            raise DatasetError(f"Split manifest not found: {split_manifest}")
        entries = [
            line.strip()
            for line in split_manifest.read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.lstrip().startswith("#")
        ]
        candidates = [root / entry for entry in entries]
    else:
        candidates = [path for path in root.rglob("*") if path.suffix.lower() in IMAGE_SUFFIXES]
    candidates.sort(key=lambda path: path.relative_to(root).as_posix())

    readable: List[Path] = []
    for path in candidates:
        if limit is not None and len(readable) >= limit:
            break
        try:
            with Image.open(path) as image:
                image.verify()
        except (OSError, SyntaxError, UnidentifiedImageError) as error:
            logger.warning("Skipping unreadable image %s: %s", path, error)
            continue
        readable.append(path)

    if not readable:
        raise DatasetError(f"No readable images found under {root}")
    logger.info("Scanned %s: %d images", root, len(readable))
    return readable


def load_rgb(path: Path) -> Tuple[np.ndarray, bool]:
    """Decode an image as 8-bit RGB; grayscale sources are replicated and flagged."""
    with Image.open(path) as image:
        grayscale = image.mode in _GRAYSCALE_MODES
        rgb = np.asarray(image.convert("RGB"))
    return rgb, grayscale


def resize_rgb(rgb: np.ndarray, size: int) -> np.ndarray:
    if rgb.shape[:2] == (size, size):
        return rgb
    resized = Image.fromarray(rgb).resize((size, size), Image.Resampling.BILINEAR)
    return np.asarray(resized)


def area_resize(ab: np.ndarray, size: int) -> np.ndarray:
    """Area-average an (H, W, 2) chroma raster to (size, size, 2)."""
    if ab.shape[:2] == (size, size):
        return ab
    tensor = torch.from_numpy(np.ascontiguousarray(ab.transpose(2, 0, 1)))[None]
    resized = F.interpolate(tensor, size=(size, size), mode="area")
    return resized[0].numpy().transpose(1, 2, 0)


def upsample_chroma(ab: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resize an (h, w, 2) chroma raster to (height, width, 2)."""
    if ab.shape[:2] == (height, width):
        return ab
    tensor = torch.from_numpy(np.ascontiguousarray(ab.transpose(2, 0, 1)))[None]
    resized = F.interpolate(tensor, size=(height, width), mode="bilinear", align_corners=False)
    return resized[0].numpy().transpose(1, 2, 0)


def _compact(indices: np.ndarray, weights: np.ndarray, num_bins: int) -> Tuple[np.ndarray, np.ndarray]:
    index_dtype = np.int16 if num_bins <= np.iinfo(np.int16).max else np.int32
    return indices.astype(index_dtype), weights.astype(np.float32)


@dataclass
class SampleRecord:
    """One image at the network's input size.

    With ``cache`` the decoded planes and every requested encoding stay in
    memory (float32 planes, int16 indices). Without it the record keeps only its
    path and :meth:`loaded` decodes the file again on each call.
    """

    source: Path
    encoder: SoftEncoder = field(repr=False)
    input_size: int
    cache: bool = True
    _planes: Optional[Tuple[np.ndarray, np.ndarray, bool]] = field(default=None, repr=False)
    _chroma: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _encodings: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.input_size

    @property
    def resident(self) -> bool:
        return self._planes is not None

    @property
    def lightness(self) -> np.ndarray:
        return self._decoded()[0]

    @property
    def ab(self) -> np.ndarray:
        return self._decoded()[1]

    @property
    def grayscale(self) -> bool:
        return self._decoded()[2]

    def _decoded(self) -> Tuple[np.ndarray, np.ndarray, bool]:
        if self._planes is not None:
            return self._planes
        rgb, grayscale = load_rgb(self.source)
        lightness, ab = _lab_planes(rgb, self.input_size)
        planes = (lightness, ab, grayscale)
        if self.cache:
            self._planes = planes
        return planes

    def loaded(self) -> "SampleRecord":
        """A record whose planes are decoded; cached records return themselves."""
        if self.cache:
            self._decoded()
            return self
        return replace(self, cache=True, _planes=self._decoded(), _chroma={}, _encodings={})

    def ab_at(self, size: int) -> np.ndarray:
        if size in self._chroma:
            return self._chroma[size]
        chroma = area_resize(self.ab, size)
        if self.cache:
            self._chroma[size] = chroma
        return chroma

    def encoding(self, size: int) -> Tuple[np.ndarray, np.ndarray]:
        """Sparse soft-encoding ``(indices, weights)`` at ``size``."""
        if size in self._encodings:
            return self._encodings[size]
        encoded = _compact(*self.encoder.encode_topk(self.ab_at(size)), self.encoder.bins.Q)
        if self.cache:
            self._encodings[size] = encoded
        return encoded


def _lab_planes(rgb: np.ndarray, input_size: int) -> Tuple[np.ndarray, np.ndarray]:
    lab = rgb_to_lab(resize_rgb(rgb, input_size))
    return normalize_lightness(lab.L).astype(np.float32), lab.ab.astype(np.float32)


def prepare_sample(
    rgb: np.ndarray,
    encoder: SoftEncoder,
    input_size: int,
    resolutions: Iterable[int] = (),
    source: Path = Path("<memory>"),
    grayscale: bool = False,
) -> SampleRecord:
    lightness, ab = _lab_planes(rgb, input_size)
    record = SampleRecord(
        source=source,
        encoder=encoder,
        input_size=input_size,
        _planes=(lightness, ab, grayscale),
    )
    for size in resolutions:
        record.encoding(size)
    return record


def load_records(
    paths: Sequence[Path],
    encoder: SoftEncoder,
    input_size: int,
    resolutions: Iterable[int] = (),
    cache: bool = True,
) -> List[SampleRecord]:
    """Records for ``paths``; without ``cache`` nothing is decoded until a batch needs it."""
    if not cache:
        if not paths:
            raise DatasetError("No images to stream")
        logger.info("Streaming %d samples at %dx%d, decoded per batch", len(paths), input_size, input_size)
        return [SampleRecord(source=path, encoder=encoder, input_size=input_size, cache=False) for path in paths]

    resolutions = tuple(resolutions)
    records = []
    for path in paths:
        try:
            rgb, grayscale = load_rgb(path)
            records.append(prepare_sample(rgb, encoder, input_size, resolutions, source=path, grayscale=grayscale))
        except (OSError, UnidentifiedImageError, InputError) as error:
            logger.warning("Skipping %s: %s", path, error)
    if not records:
        raise DatasetError("None of the scanned images could be prepared")
    logger.info("Prepared %d samples at %dx%d", len(records), input_size, input_size)
    return records


def sample_chroma(paths: Sequence[Path], input_size: int) -> Iterator[np.ndarray]:
    """Yield the resized chroma of each image, for fitting colour priors."""
    for path in paths:
        rgb, _ = load_rgb(path)
        yield rgb_to_lab(resize_rgb(rgb, input_size)).ab


def batches(records: Sequence[T], batch_size: int, seed: int, epoch: int = 0) -> Iterator[List[T]]:
    """Shuffle per epoch from (seed, epoch) and yield batches, keeping the last partial one."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(order), batch_size):
        yield [records[index] for index in order[start:start + batch_size]]


def collate(records: Sequence[SampleRecord], z_size: int, ab_size: int) -> Tuple[torch.Tensor, Targets]:
    """Stack records into network input and loss targets at the given sizes.

    Streamed records are decoded here, so under :func:`prefetch` decoding runs
    on the worker thread.
    """
    records = [record.loaded() for record in records]
    bins = records[0].encoder.bins
    lightness = torch.from_numpy(np.stack([record.lightness for record in records]))[:, None]

    dense = [densify(*record.encoding(z_size), bins.Q) for record in records]
    z = torch.from_numpy(np.stack(dense).transpose(0, 3, 1, 2)).float()
    ab = torch.from_numpy(np.stack([record.ab_at(ab_size) for record in records]).transpose(0, 3, 1, 2)).float()

    if bins.weights is not None:
        weights = pixel_weights_from(z, torch.from_numpy(np.array(bins.weights)))
    else:
        weights = torch.ones(z.shape[0], z.shape[2], z.shape[3])
    return lightness, Targets(z=z.contiguous(), ab=ab.contiguous(), pixel_weights=weights)


_DONE = object()


def prefetch(iterator: Iterable[T], depth: int) -> Iterator[T]:
    """Produce items from ``iterator`` on a background thread, preserving order."""
    if depth <= 0:
        yield from iterator
        return

    buffer: "queue.Queue[object]" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def worker() -> None:
        try:
            for item in iterator:
                if stop.is_set():
                    return
                buffer.put(item)
        except BaseException as error:  # handed to the consumer
            buffer.put(error)
            return
        buffer.put(_DONE)

    thread = threading.Thread(target=worker, name="tucan-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = buffer.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item  # type: ignore[misc]
    finally:
        stop.set()
        while thread.is_alive():
            try:
                buffer.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.05)
