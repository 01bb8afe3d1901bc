"""Quantization loss, colour error loss and their unweighted sum.

All tensors are channels first: distributions (B, Q, H, W), chroma (B, 2, H, W),
per-pixel weights (B, H, W). Both losses are averaged over pixels and batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import torch

from .errors import InputError, ShapeError
from .tucan_net import ForwardOutput

LOG_FLOOR = 1e-10
TARGET_SUM_TOLERANCE = 1e-4


@dataclass
class LossBreakdown:
    l_q: torch.Tensor
    l_c: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name).detach().item() for name in ("l_q", "l_c", "total")}


@dataclass
class Targets:
    z: torch.Tensor
    ab: torch.Tensor
    pixel_weights: torch.Tensor

    def to(self, device: torch.device) -> "Targets":
        return Targets(self.z.to(device), self.ab.to(device), self.pixel_weights.to(device))


def pixel_weights_from(z: torch.Tensor, bin_weights: torch.Tensor) -> torch.Tensor:
    """Re-balancing weight of each pixel's most probable bin."""
    return bin_weights.to(z.dtype)[z.argmax(dim=1)]


def quantization_loss(z_hat: torch.Tensor, z: torch.Tensor, pixel_weights: torch.Tensor) -> torch.Tensor:
    if z_hat.shape != z.shape:
        raise ShapeError(f"Predicted distribution {tuple(z_hat.shape)} != target {tuple(z.shape)}")
    if pixel_weights.shape != z.shape[:1] + z.shape[2:]:
        raise ShapeError(f"Pixel weights {tuple(pixel_weights.shape)} do not match target {tuple(z.shape)}")
    deviation = (z.sum(dim=1) - 1.0).abs().max()
    if deviation > TARGET_SUM_TOLERANCE:
        raise InputError(f"Target distributions must sum to 1 (max deviation {float(deviation):.2e})")

    normalized = z_hat / z_hat.sum(dim=1, keepdim=True)
    cross_entropy = -(z * torch.log(normalized.clamp_min(LOG_FLOOR))).sum(dim=1)
    return (pixel_weights * cross_entropy).mean()


def color_error_loss(ab_hat: torch.Tensor, ab: torch.Tensor) -> torch.Tensor:
    if ab_hat.shape != ab.shape:
        raise ShapeError(f"Predicted chroma {tuple(ab_hat.shape)} != target {tuple(ab.shape)}")
    return (ab_hat - ab).pow(2).sum(dim=1).mean()


def combined_loss(output: ForwardOutput, targets: Targets) -> LossBreakdown:
    l_q = quantization_loss(output.z_hat, targets.z, targets.pixel_weights)
    l_c = color_error_loss(output.ab_hat, targets.ab)
    return LossBreakdown(l_q=l_q, l_c=l_c, total=l_q + l_c)
