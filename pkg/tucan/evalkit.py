"""Image-quality metrics and dataset evaluation reports."""
from __future__ import annotations

import importlib
import math
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .colorspace import LabImage, denormalize_lightness, lab_to_rgb
from .datapipe import SampleRecord, upsample_chroma
from .errors import ConfigError, ShapeError
from .logging_config import get_logger
from .tucan_net import TucanNet
from .types import ImageMetrics, MetricReport

logger = get_logger(__name__)

PSNR_CAP_DB = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0
SSIM_WINDOW = 2 * int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5) + 1
CONVENTION = (
    "RGB from true L + predicted ab; PSNR capped at 100 dB; "
    "SSIM on ITU-R 601 luma, 11x11 Gaussian window sigma 1.5"
)
_LUMA = np.array([0.299, 0.587, 0.114])


class PerceptualScorer(Protocol):
    def __call__(self, prediction: np.ndarray, reference: np.ndarray) -> float: ...


class Colorizer(Protocol):
    name: str

    def colorize(self, record: SampleRecord) -> np.ndarray:
        """Return predicted chroma (S, S, 2) at the record's input size."""
        ...


def _check_pair(prediction: np.ndarray, reference: np.ndarray) -> None:
    if prediction.shape != reference.shape:
        raise ShapeError(f"Image shapes differ: {prediction.shape} vs {reference.shape}")


def psnr(prediction: np.ndarray, reference: np.ndarray) -> float:
    _check_pair(prediction, reference)
    error = np.mean((prediction.astype(np.float64) - reference.astype(np.float64)) ** 2)
    if error == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(DATA_RANGE ** 2 / error))


def luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ _LUMA


def ssim(prediction: np.ndarray, reference: np.ndarray, boundary: str = "reflect") -> float:
    """Mean structural similarity on luma.

    ``boundary="reflect"`` crops half a window from every border before
    averaging; ``"wrap"`` treats the image as a torus and keeps every pixel.
    """
    _check_pair(prediction, reference)
    if boundary not in ("reflect", "wrap"):
        raise ValueError(f"Unknown boundary mode: {boundary}")
    x, y = luma(prediction), luma(reference)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"Images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, got {x.shape}")

    def blur(image: np.ndarray) -> np.ndarray:
        return gaussian_filter(image, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode=boundary)

    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    score = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    if boundary == "reflect":
        pad = (SSIM_WINDOW - 1) // 2
        score = score[pad:-pad, pad:-pad]
    return float(score.mean(dtype=np.float64))


def load_lpips_plugin(spec: str) -> PerceptualScorer:
    """Resolve ``package.module:attr``; classes are instantiated without arguments."""
    module_name, sep, attr = spec.partition(":")
    if not sep or not module_name or not attr:
        raise ConfigError(f"LPIPS plug-in must look like module:attr, got {spec}", key="lpips_plugin")
    try:
        target = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as error:
        raise ConfigError(f"Cannot load LPIPS plug-in {spec}: {error}", key="lpips_plugin") from error
    if isinstance(target, type):
        target = target()
    if not callable(target):
        raise ConfigError(f"LPIPS plug-in {spec} is not callable", key="lpips_plugin")
    return target


def lpips(prediction: np.ndarray, reference: np.ndarray, plugin: Optional[PerceptualScorer]) -> Optional[float]:
    if plugin is None:
        return None
    _check_pair(prediction, reference)
    return float(plugin(prediction, reference))


class ReferenceColorizer:
    """Returns the true chroma; an upper bound for every metric."""

    name = "stub:perfect"

    def colorize(self, record: SampleRecord) -> np.ndarray:
        return record.ab


class GrayColorizer:
    name = "stub:gray"

    def colorize(self, record: SampleRecord) -> np.ndarray:
        return np.zeros_like(record.ab)


class ModelColorizer:
    """Runs a network and resizes whatever level it emits to the input size."""

    def __init__(self, model: TucanNet, name: str = "model", device: str = "cpu") -> None:
        self.model = model.to(device).eval()
        self.name = name
        self.device = device

    @torch.no_grad()
    def colorize(self, record: SampleRecord) -> np.ndarray:
        lightness = torch.from_numpy(record.lightness)[None, None].to(self.device)
        ab = self.model(lightness).ab_hat[0].permute(1, 2, 0).double().cpu().numpy()
        return upsample_chroma(ab, record.size, record.size)


def evaluate(
    colorizer: Colorizer,
    records: Sequence[SampleRecord],
    dataset_id: str,
    plugin: Optional[PerceptualScorer] = None,
    plugin_name: Optional[str] = None,
) -> MetricReport:
    """Score every record in order against its own Lab round trip."""
    if plugin is None:
        logger.warning("No LPIPS plug-in supplied; LPIPS is omitted from the report")
    report = MetricReport(
        model_id=colorizer.name,
        dataset_id=dataset_id,
        convention=CONVENTION,
        lpips_plugin=(plugin_name or "custom") if plugin is not None else None,
    )
    for item in records:
        record = item.loaded()
        L = denormalize_lightness(record.lightness.astype(np.float64))
        reference = lab_to_rgb(LabImage(L=L, ab=record.ab))
        prediction = lab_to_rgb(LabImage(L=L, ab=colorizer.colorize(record)))
        report.rows.append(
            ImageMetrics(
                path=str(record.source),
                psnr=psnr(prediction, reference),
                ssim=ssim(prediction, reference),
                lpips=lpips(prediction, reference, plugin),
            )
        )
    logger.info(
        "Evaluated %s on %s: %d images, PSNR %.3f, SSIM %.4f",
        report.model_id, dataset_id, len(report.rows), report.mean_psnr, report.mean_ssim,
    )
    return report


def _cell(value: Optional[float]) -> str:
    return "n/a" if value is None else repr(float(value))


def format_report(report: MetricReport) -> str:
    """Tab-separated rows plus a summary block; floats round-trip exactly."""
    lines = [
        f"# model\t{report.model_id}",
        f"# dataset\t{report.dataset_id}",
        f"# convention\t{report.convention}",
        f"# lpips\t{report.lpips_plugin or 'n/a'}",
        "path\tpsnr\tssim\tlpips",
    ]
    for row in report.rows:
        lines.append(f"{row.path}\t{_cell(row.psnr)}\t{_cell(row.ssim)}\t{_cell(row.lpips)}")
    lines.append("# summary")
    lines.append(f"mean\t{_cell(report.mean_psnr)}\t{_cell(report.mean_ssim)}\t{_cell(report.mean_lpips)}")
    lines.append(f"count\t{len(report.rows)}")
    return "\n".join(lines) + "\n"


def summary_lines(report: MetricReport) -> Iterable[str]:
    lpips_text = "n/a" if report.mean_lpips is None else f"{report.mean_lpips:.4f}"
    yield f"Model:   {report.model_id}"
    yield f"Dataset: {report.dataset_id} ({len(report.rows)} images)"
    yield f"PSNR:    {report.mean_psnr:.3f} dB"
    yield f"SSIM:    {report.mean_ssim:.4f}"
    yield f"LPIPS:   {lpips_text}"
