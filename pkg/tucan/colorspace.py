"""CIELab conversion and the quantized (a, b) colour representation."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from skimage import color

from .errors import ConfigError, DatasetError, InputError
from .logging_config import get_logger

logger = get_logger(__name__)

CANONICAL_GRID_SIZE = 10.0
CANONICAL_BINS_RESOURCE = "gamut_grid10.txt"
_CHUNK_ROWS = 8192


@dataclass(frozen=True, eq=False)
class LabImage:
    L: np.ndarray
    ab: np.ndarray

    @property
    def height(self) -> int:
        return int(self.L.shape[0])

    @property
    def width(self) -> int:
        return int(self.L.shape[1])

    @property
    def a(self) -> np.ndarray:
        return self.ab[..., 0]

    @property
    def b(self) -> np.ndarray:
        return self.ab[..., 1]

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.L[..., None], self.ab], axis=-1)

    @classmethod
    def from_array(cls, lab: np.ndarray) -> "LabImage":
        lab = np.asarray(lab, dtype=np.float64)
        return cls(L=lab[..., 0], ab=lab[..., 1:3])


def rgb_to_lab(image: np.ndarray) -> LabImage:
    """Convert an 8-bit sRGB raster (H, W, 3) to CIELab under D65."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise InputError(f"Expected an (H, W, 3) RGB raster, got shape {image.shape}")
    lab = color.rgb2lab(image.astype(np.float64) / 255.0, illuminant="D65", observer="2")
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    return LabImage.from_array(lab)


def lab_to_rgb(lab: LabImage) -> np.ndarray:
    """Convert back to 8-bit sRGB, clamping out-of-gamut colours."""
    with warnings.catch_warnings():
        # skimage warns when negative XYZ components get clipped
        warnings.simplefilter("ignore")
        rgb = color.lab2rgb(lab.to_array(), illuminant="D65", observer="2")
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def normalize_lightness(L):
    """Map L in [0, 100] to the network input range [-1, 1]."""
    return (L - 50.0) / 50.0


def denormalize_lightness(x):
    return x * 50.0 + 50.0


@dataclass(frozen=True, eq=False)
class BinTable:
    """In-gamut lattice cells of the (a, b) plane plus optional rarity weights.

    ``prior`` holds the smoothed empirical bin probabilities and ``weights`` the
    re-balancing factor of every bin. Both stay ``None`` until fitted. Arrays are
    made read-only on construction.
    """

    grid_size: float
    centers: np.ndarray
    prior: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.grid_size <= 0:
            raise ValueError(f"grid_size must be positive, got {self.grid_size}")
        centers = np.array(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[1] != 2 or centers.shape[0] == 0:
            raise ValueError(f"centers must have shape (Q, 2), got {centers.shape}")
        cells = centers / self.grid_size
        if not np.allclose(cells, np.rint(cells)):
            raise ValueError(f"centers must lie on the grid-size {self.grid_size:g} lattice")
        if len(np.unique(centers, axis=0)) != len(centers):
            raise ValueError("centers contain duplicates")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        for name in ("prior", "weights"):
            values = getattr(self, name)
            if values is None:
                continue
            values = np.array(values, dtype=np.float64)
            if values.shape != (len(centers),):
                raise ValueError(f"{name} must have shape ({len(centers)},), got {values.shape}")
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    @property
    def Q(self) -> int:
        return int(self.centers.shape[0])

    @property
    def fitted(self) -> bool:
        return self.weights is not None

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"grid={self.grid_size:g};Q={self.Q}".encode("utf-8"))
        digest.update(self.centers.astype("<f8").tobytes())
        if self.weights is not None:
            digest.update(self.weights.astype("<f8").tobytes())
        return digest.hexdigest()

    def with_weights(self, prior: np.ndarray, weights: np.ndarray) -> "BinTable":
        return replace(self, prior=prior, weights=weights)

    def save(self, path: Path) -> Path:
        """Write ``index a b`` rows, with the weight as a fourth column when fitted."""
        lines = [f"grid={self.grid_size:g} Q={self.Q}"]
        for index, (a, b) in enumerate(self.centers):
            line = f"{index} {a:g} {b:g}"
            if self.weights is not None:
                line += f" {self.weights[index]:.10g}"
            lines.append(line)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "BinTable":
        if not path.is_file():
            raise ConfigError(f"Bin table not found: {path}", key="quantization.bins_file")
        return cls.parse(path.read_text(encoding="utf-8"), source=str(path))

    @classmethod
    def parse(cls, text: str, source: str = "<bins>") -> "BinTable":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if not rows:
            raise ConfigError(f"Empty bin table: {source}", key="quantization.bins_file")
        try:
            header = dict(token.split("=", 1) for token in rows[0])
            grid_size = float(header["grid"])
            declared = int(header["Q"])
        except (KeyError, ValueError) as error:
            raise ConfigError(f"Malformed bin table header in {source}: {' '.join(rows[0])}",
                              key="quantization.bins_file") from error

        centers, weights = [], []
        for expected, row in enumerate(rows[1:]):
            if len(row) not in (3, 4) or int(row[0]) != expected:
                raise ConfigError(f"Malformed bin table row {expected} in {source}",
                                  key="quantization.bins_file")
            centers.append((float(row[1]), float(row[2])))
            if len(row) == 4:
                weights.append(float(row[3]))
        if len(centers) != declared:
            raise ConfigError(f"{source} declares Q={declared} but lists {len(centers)} bins",
                              key="quantization.bins_file")
        if weights and len(weights) != len(centers):
            raise ConfigError(f"{source} gives weights for {len(weights)} of {len(centers)} bins",
                              key="quantization.bins_file")
        return cls(
            grid_size=grid_size,
            centers=np.asarray(centers),
            weights=np.asarray(weights) if weights else None,
        )


def canonical_bins() -> BinTable:
    """Return the frozen grid-10 table shipped with the package."""
    resource = resources.files("tucan") / "data" / CANONICAL_BINS_RESOURCE
    return BinTable.parse(resource.read_text(encoding="utf-8"), source=CANONICAL_BINS_RESOURCE)


def import_centers(path: Path, grid_size: float = CANONICAL_GRID_SIZE) -> BinTable:
    """Bin table from a ``.npy`` array of (a, b) centers, keeping the file's order.

    Published in-gamut center lists ship in this form; ``tucan bins`` turns one
    into a fitted text table.
    """
    if not path.is_file():
        raise ConfigError(f"Center list not found: {path}", key="quantization.bins_file")
    try:
        centers = np.load(path, allow_pickle=False)
        return BinTable(grid_size=grid_size, centers=centers)
    except (OSError, ValueError) as error:
        raise ConfigError(f"Unusable center list {path}: {error}", key="quantization.bins_file") from error


def load_bins(bins_file: Optional[Path], grid_size: float = CANONICAL_GRID_SIZE) -> BinTable:
    """Bin table from ``bins_file``, else the packaged table, else a fresh sweep at ``grid_size``.

    ``bins_file`` is a text table or, with a ``.npy`` suffix, a list of centers.
    """
    if bins_file:
        if bins_file.suffix == ".npy":
            return import_centers(bins_file, grid_size)
        table = BinTable.load(bins_file)
        if table.grid_size != grid_size:
            raise ConfigError(
                f"{bins_file} uses grid {table.grid_size:g}, config asks for {grid_size:g}",
                key="quantization.grid_size",
            )
        return table
    if grid_size == CANONICAL_GRID_SIZE:
        return canonical_bins()
    return build_gamut_bins(grid_size)


def build_gamut_bins(grid_size: float = CANONICAL_GRID_SIZE, stride: int = 4) -> BinTable:
    """Sweep the sRGB cube and keep every lattice cell that receives a colour.

    Each channel is sampled at ``0, stride, 2*stride, ...`` plus 255. A colour
    lands in the cell whose center is nearest to its (a, b). Cells come back
    sorted by (a, b), so the result does not depend on sweep order.
    """
    if grid_size <= 0:
        raise ValueError(f"grid_size must be positive, got {grid_size}")
    levels = np.unique(np.append(np.arange(0, 256, stride), 255)).astype(np.float64)
    r, g, b = np.meshgrid(levels, levels, levels, indexing="ij")
    cube = np.stack([r.ravel(), g.ravel(), b.ravel()], axis=-1)[:, None, :] / 255.0
    lab = color.rgb2lab(cube, illuminant="D65", observer="2")[:, 0, :]
    cells = np.floor(lab[:, 1:] / grid_size + 0.5) * grid_size
    centers = np.unique(cells, axis=0)
    logger.info("Gamut sweep: %d colours, grid %g, %d bins", len(cube), grid_size, len(centers))
    return BinTable(grid_size=float(grid_size), centers=centers)


def _squared_distances(ab: np.ndarray, centers: np.ndarray) -> Iterable[Tuple[slice, np.ndarray]]:
    for start in range(0, len(ab), _CHUNK_ROWS):
        chunk = slice(start, start + _CHUNK_ROWS)
        yield chunk, cdist(ab[chunk], centers, metric="sqeuclidean")


def _flatten_ab(ab: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    ab = np.asarray(ab, dtype=np.float64)
    if ab.shape[-1] != 2:
        raise InputError(f"Expected chroma with a trailing axis of 2, got shape {ab.shape}")
    if not np.all(np.isfinite(ab)):
        raise InputError("Chroma contains non-finite values")
    return ab.reshape(-1, 2), ab.shape[:-1]


def nearest_bin(ab: np.ndarray, bins: BinTable) -> np.ndarray:
    """Index of the nearest bin center per pixel; ties go to the lowest index."""
    flat, shape = _flatten_ab(ab)
    indices = np.empty(len(flat), dtype=np.int64)
    for chunk, distances in _squared_distances(flat, bins.centers):
        indices[chunk] = np.argmin(distances, axis=1)
    return indices.reshape(shape)


class SoftEncoder:
    """Gaussian soft-encoding of chroma over the nearest bin centers."""

    def __init__(self, bins: BinTable, neighbors: int = 5, sigma: float = 5.0) -> None:
        if neighbors < 1:
            raise ValueError("neighbors must be at least 1")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.bins = bins
        self.neighbors = min(neighbors, bins.Q)
        self.sigma = sigma

    def encode_topk(self, ab: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, weights)`` of shape (..., neighbors)."""
        flat, shape = _flatten_ab(ab)
        k = self.neighbors
        indices = np.empty((len(flat), k), dtype=np.int64)
        weights = np.empty((len(flat), k), dtype=np.float64)
        for chunk, distances in _squared_distances(flat, self.bins.centers):
            order = np.argsort(distances, axis=1, kind="stable")[:, :k]
            nearest = np.take_along_axis(distances, order, axis=1)
            kernel = np.exp(-(nearest - nearest[:, :1]) / (2.0 * self.sigma ** 2))
            indices[chunk] = order
            weights[chunk] = kernel / kernel.sum(axis=1, keepdims=True)
        return indices.reshape(*shape, k), weights.reshape(*shape, k)

    def encode(self, ab: np.ndarray) -> np.ndarray:
        indices, weights = self.encode_topk(ab)
        return densify(indices, weights, self.bins.Q)


def densify(indices: np.ndarray, weights: np.ndarray, num_bins: int) -> np.ndarray:
    dense = np.zeros((*indices.shape[:-1], num_bins), dtype=weights.dtype)
    np.put_along_axis(dense, indices, weights, axis=-1)
    return dense


def soft_encode(ab: np.ndarray, bins: BinTable, neighbors: int = 5, sigma: float = 5.0) -> np.ndarray:
    return SoftEncoder(bins, neighbors=neighbors, sigma=sigma).encode(ab)


def compute_prior(samples: Iterable[np.ndarray], bins: BinTable) -> np.ndarray:
    """Empirical probability of each bin under hard assignment."""
    counts = np.zeros(bins.Q, dtype=np.float64)
    for ab in samples:
        counts += np.bincount(nearest_bin(ab, bins).ravel(), minlength=bins.Q)
    total = counts.sum()
    if total == 0:
        raise DatasetError("Cannot fit a colour prior on an empty sample")
    return counts / total


def smooth_prior(prior: np.ndarray, centers: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.asarray(prior, dtype=np.float64).copy()
    kernel = np.exp(-cdist(centers, centers, metric="sqeuclidean") / (2.0 * sigma ** 2))
    kernel /= kernel.sum(axis=1, keepdims=True)
    smoothed = kernel @ np.asarray(prior, dtype=np.float64)
    return smoothed / smoothed.sum()


def rebalance_weights(
    prior: np.ndarray,
    lam: float,
    sigma: float,
    centers: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(smoothed_prior, weights)`` with sum(smoothed_prior * weights) == 1."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    smoothed = smooth_prior(prior, centers, sigma)
    mixed = (1.0 - lam) * smoothed + lam / len(smoothed)
    weights = 1.0 / np.maximum(mixed, 1e-12)
    weights /= float(np.sum(smoothed * weights))
    return smoothed, weights


def fit_rebalance_weights(
    samples: Iterable[np.ndarray],
    bins: BinTable,
    lam: float = 0.5,
    sigma: float = 5.0,
) -> BinTable:
    prior = compute_prior(samples, bins)
    smoothed, weights = rebalance_weights(prior, lam, sigma, bins.centers)
    logger.info(
        "Fitted re-balancing weights: lambda=%g sigma=%g min=%.4f max=%.4f",
        lam, sigma, weights.min(), weights.max(),
    )
    return bins.with_weights(smoothed, weights)


def decode_expectation(Z: np.ndarray, bins: BinTable) -> np.ndarray:
    """Expected bin center under each pixel's distribution (..., Q) -> (..., 2)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-1] != bins.Q:
        raise InputError(f"Distribution has {Z.shape[-1]} bins, table has {bins.Q}")
    if np.any(Z < 0) or not np.all(np.isfinite(Z)):
        raise InputError("Distribution must be finite and nonnegative")
    totals = Z.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise InputError("Cannot decode an all-zero distribution")
    return (Z / totals) @ bins.centers
