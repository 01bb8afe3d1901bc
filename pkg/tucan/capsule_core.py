"""Capsule maths: squash, vote projection, routing by agreement and de-routing.

Tensor layout used throughout:

* capsules ``u``: (batch, N_in, k)
* vote weights ``W``: (N_in, N_out, k_hat, k)
* votes: (batch, N_in, N_out, k_hat)
* entities ``v``: (batch, N_out, k_hat)
* de-route weights ``W_r``: (N_in, N_out, k, k_hat)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeError


def squash(s: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Scale ``s`` to norm ``|s|^2 / (1 + |s|^2)`` keeping its direction."""
    squared = s.pow(2).sum(dim=dim, keepdim=True)
    norm = squared.clamp_min(1e-24).sqrt()
    return s * (norm / (1.0 + squared))


@dataclass
class CapsuleBank:
    u: torch.Tensor
    grid_shape: Tuple[int, int, int]

    @property
    def num_capsules(self) -> int:
        return int(self.u.shape[1])

    @property
    def capsule_dim(self) -> int:
        return int(self.u.shape[2])


@dataclass
class RoutingResult:
    entities: torch.Tensor
    coupling: torch.Tensor
    iterations: int


def project_votes(u: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    if u.dim() != 3 or weights.dim() != 4:
        raise ShapeError(f"Expected u (B, N_in, k) and W (N_in, N_out, k_hat, k), got {tuple(u.shape)} and {tuple(weights.shape)}")
    if u.shape[1] != weights.shape[0] or u.shape[2] != weights.shape[3]:
        raise ShapeError(
            f"Capsules {tuple(u.shape)} do not match vote weights {tuple(weights.shape)}"
        )
    return torch.einsum("ijhk,bik->bijh", weights, u)


def route(votes: torch.Tensor, iterations: int = 3) -> RoutingResult:
    """Dynamic routing by agreement over ``votes`` (B, N_in, N_out, k_hat).

    Logits start at zero on every call. The agreement update after the last
    iteration is skipped since nothing reads it.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be at least 1, got {iterations}")
    if votes.dim() != 4:
        raise ShapeError(f"Expected votes (B, N_in, N_out, k_hat), got {tuple(votes.shape)}")
    if votes.shape[2] == 0:
        raise ShapeError("Routing needs at least one output capsule")

    logits = votes.new_zeros(votes.shape[:3])
    for iteration in range(iterations):
        coupling = F.softmax(logits, dim=2)
        weighted = torch.einsum("bij,bijh->bjh", coupling, votes)
        entities = squash(weighted)
        if iteration < iterations - 1:
            logits = logits + torch.einsum("bijh,bjh->bij", votes, entities)
    return RoutingResult(entities=entities, coupling=coupling, iterations=iterations)


def deroute(entities: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Reconstruct one k-vector per input capsule: u_r[i] = sum_j W_r[i, j] v[j]."""
    if entities.dim() != 3 or weights.dim() != 4:
        raise ShapeError(
            f"Expected v (B, N_out, k_hat) and W_r (N_in, N_out, k, k_hat), got {tuple(entities.shape)} and {tuple(weights.shape)}"
        )
    if entities.shape[1] != weights.shape[1] or entities.shape[2] != weights.shape[3]:
        raise ShapeError(
            f"Entities {tuple(entities.shape)} do not match de-route weights {tuple(weights.shape)}"
        )
    return torch.einsum("ijkh,bjh->bik", weights, entities)


class PrimaryCapsulesDown(nn.Module):
    """Primary-capsule convolution followed by vote projection and routing."""

    def __init__(
        self,
        in_channels: int,
        grid_size: int,
        kernel_size: int,
        capsule_dim: int = 8,
        capsule_groups: int = 8,
        output_capsules: int = 10,
        entity_dim: int = 16,
        routing_iterations: int = 3,
    ) -> None:
        super().__init__()
        self.capsule_dim = capsule_dim
        self.capsule_groups = capsule_groups
        self.grid_size = grid_size
        self.routing_iterations = routing_iterations
        self.conv = nn.Conv2d(in_channels, capsule_dim * capsule_groups, kernel_size=kernel_size)
        num_capsules = capsule_groups * grid_size * grid_size
        self.vote_weights = nn.Parameter(
            0.05 * torch.randn(num_capsules, output_capsules, entity_dim, capsule_dim)
        )

    def primary_capsules(self, x: torch.Tensor) -> CapsuleBank:
        features = self.conv(x)
        batch, _, height, width = features.shape
        if (height, width) != (self.grid_size, self.grid_size):
            raise ShapeError(
                f"PCD grid is {height}x{width}, expected {self.grid_size}x{self.grid_size}"
            )
        grid = features.view(batch, self.capsule_dim, self.capsule_groups, height, width)
        u = grid.permute(0, 2, 3, 4, 1).reshape(batch, -1, self.capsule_dim)
        return CapsuleBank(u=squash(u), grid_shape=(self.capsule_groups, height, width))

    def forward(self, x: torch.Tensor) -> Tuple[CapsuleBank, RoutingResult]:
        bank = self.primary_capsules(x)
        votes = project_votes(bank.u, self.vote_weights)
        return bank, route(votes, self.routing_iterations)


class PrimaryCapsulesUp(nn.Module):
    """De-route entities back to capsule grids and rebuild k spatial maps.

    Each of the k capsule components forms a (groups, g, g) map that goes
    through its own transpose convolution; the outputs are concatenated.
    """

    def __init__(
        self,
        grid_size: int,
        out_channels: int,
        capsule_dim: int = 8,
        capsule_groups: int = 8,
        output_capsules: int = 10,
        entity_dim: int = 16,
    ) -> None:
        super().__init__()
        if out_channels % capsule_dim:
            raise ShapeError(
                f"PCU output channels {out_channels} must be a multiple of capsule_dim {capsule_dim}"
            )
        self.capsule_dim = capsule_dim
        self.capsule_groups = capsule_groups
        self.grid_size = grid_size
        num_capsules = capsule_groups * grid_size * grid_size
        self.deroute_weights = nn.Parameter(
            0.05 * torch.randn(num_capsules, output_capsules, capsule_dim, entity_dim)
        )
        per_map = out_channels // capsule_dim
        self.transpose_convs = nn.ModuleList(
            nn.ConvTranspose2d(capsule_groups, per_map, kernel_size=3, padding=1)
            for _ in range(capsule_dim)
        )

    def forward(self, routing: RoutingResult) -> torch.Tensor:
        u_r = deroute(routing.entities, self.deroute_weights)
        batch = u_r.shape[0]
        g = self.grid_size
        maps = u_r.reshape(batch, self.capsule_groups, g, g, self.capsule_dim).permute(0, 4, 1, 2, 3)
        return torch.cat(
            [conv(maps[:, index]) for index, conv in enumerate(self.transpose_convs)], dim=1
        )
