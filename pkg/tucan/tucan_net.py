"""Assembly of the colourisation network and its shape plan."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .capsule_core import PrimaryCapsulesDown, PrimaryCapsulesUp, RoutingResult
from .colorspace import BinTable
from .config import NetworkSection
from .errors import ConfigError, HeadStateError, ShapeError
from .logging_config import get_logger
from .types import Level

logger = get_logger(__name__)


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int = 1
    padding: int = 0

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass(frozen=True)
class KernelSchedule:
    pre_conv: ConvSpec = ConvSpec(3, 1, 1)
    pool: int = 2
    dbd: Tuple[Tuple[ConvSpec, ConvSpec], ...] = (
        (ConvSpec(3, 2, 1), ConvSpec(3, 2, 1)),
        (ConvSpec(3), ConvSpec(3)),
        (ConvSpec(3), ConvSpec(3)),
        (ConvSpec(3), ConvSpec(3)),
    )
    pcd_kernel: int = 2


@dataclass(frozen=True)
class ShapePlan:
    input_size: int = 224
    pre_out: int = 112
    dbd_sizes: Tuple[int, ...] = (28, 24, 20, 16)
    pcd_size: int = 15
    dbu_sizes: Tuple[int, ...] = (16, 20, 24, 28)
    post_out: int = 112
    head_out: int = 224

    @property
    def level_sizes(self) -> Tuple[int, ...]:
        return (self.pcd_size, *self.dbu_sizes, self.head_out)

    def trace(self) -> List[int]:
        return [self.pre_out, *self.dbd_sizes, self.pcd_size, *self.dbu_sizes, self.post_out, self.head_out]

    def target_sizes(self, level: Level) -> Tuple[int, int]:
        """(distribution size, chroma size) emitted at ``level``."""
        if level == Level.FINAL:
            return self.post_out, self.head_out
        size = self.level_sizes[level]
        return size, size


@dataclass(frozen=True)
class NetworkConfig:
    num_bins: int
    preset: str = "canonical"
    plan: ShapePlan = field(default_factory=ShapePlan)
    schedule: KernelSchedule = field(default_factory=KernelSchedule)
    base_channels: int = 64
    max_channels: int = 256
    capsule_dim: int = 8
    entity_dim: int = 16
    output_capsules: int = 10
    capsule_groups: int = 8
    routing_iterations: int = 3
    bn_eps: float = 1e-5

    @classmethod
    def canonical(cls, num_bins: int) -> "NetworkConfig":
        return cls(num_bins=num_bins)

    @classmethod
    def toy(cls, num_bins: int) -> "NetworkConfig":
        return cls(
            num_bins=num_bins,
            preset="toy",
            plan=ShapePlan(
                input_size=64,
                pre_out=32,
                dbd_sizes=(16, 12, 8, 4),
                pcd_size=3,
                dbu_sizes=(4, 8, 12, 16),
                post_out=32,
                head_out=64,
            ),
            schedule=KernelSchedule(
                dbd=(
                    (ConvSpec(3, 2, 1), ConvSpec(3, 1, 1)),
                    (ConvSpec(3), ConvSpec(3)),
                    (ConvSpec(3), ConvSpec(3)),
                    (ConvSpec(3), ConvSpec(3)),
                ),
            ),
            base_channels=16,
            max_channels=64,
        )

    @classmethod
    def from_settings(cls, section: NetworkSection, num_bins: int) -> "NetworkConfig":
        preset = cls.toy(num_bins) if section.preset == "toy" else cls.canonical(num_bins)
        overrides = {
            "capsule_dim": section.capsule_dim,
            "entity_dim": section.entity_dim,
            "output_capsules": section.output_capsules,
            "capsule_groups": section.capsule_groups,
            "routing_iterations": section.routing_iterations,
            "bn_eps": section.bn_eps,
        }
        if section.base_channels is not None:
            overrides["base_channels"] = section.base_channels
        if section.max_channels is not None:
            overrides["max_channels"] = section.max_channels
        return replace(preset, **overrides)

    @property
    def dbd_channels(self) -> Tuple[int, ...]:
        return tuple(min(self.base_channels * 2 ** (index + 1), self.max_channels) for index in range(4))

    @property
    def pcu_channels(self) -> int:
        return self.dbd_channels[-1]

    @property
    def dbu_channels(self) -> Tuple[int, ...]:
        return tuple(reversed(self.dbd_channels))

    def validate(self) -> "NetworkConfig":
        """Check that the kernel schedule reproduces every planned size."""
        plan, schedule = self.plan, self.schedule

        def mismatch(stage: str, got: int, expected: int) -> ConfigError:
            return ConfigError(
                f"Stage {stage}: kernel schedule yields {got}, shape plan expects {expected}", key=stage
            )

        size = schedule.pre_conv.output_size(plan.input_size) // schedule.pool
        if size != plan.pre_out:
            raise mismatch("preprocessing", size, plan.pre_out)
        if len(plan.dbd_sizes) != 4 or len(schedule.dbd) != 4:
            raise ConfigError("The encoder needs exactly four DBD blocks", key="DBD")
        for index, (first, second) in enumerate(schedule.dbd):
            size = second.output_size(first.output_size(size))
            if size != plan.dbd_sizes[index]:
                raise mismatch(f"DBD{index + 1}", size, plan.dbd_sizes[index])
        size = size - schedule.pcd_kernel + 1
        if size != plan.pcd_size:
            raise mismatch("PCD", size, plan.pcd_size)
        if tuple(plan.dbu_sizes) != tuple(reversed(plan.dbd_sizes)):
            raise ConfigError(
                f"DBU sizes {list(plan.dbu_sizes)} must mirror DBD sizes {list(plan.dbd_sizes)}", key="DBU"
            )
        if plan.post_out != plan.pre_out:
            raise mismatch("postprocessing", plan.post_out, plan.pre_out)
        if plan.head_out != 2 * plan.post_out:
            raise mismatch("chroma", plan.head_out, 2 * plan.post_out)
        if plan.head_out != plan.input_size:
            raise mismatch("chroma", plan.head_out, plan.input_size)
        if self.pcu_channels % self.capsule_dim:
            raise ConfigError(
                f"PCU channels {self.pcu_channels} are not a multiple of capsule_dim {self.capsule_dim}",
                key="network.capsule_dim",
            )
        return self

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "NetworkConfig":
        data = dict(data)
        plan = dict(data.pop("plan"))  # type: ignore[arg-type]
        schedule = dict(data.pop("schedule"))  # type: ignore[arg-type]
        return cls(
            plan=ShapePlan(
                **{key: tuple(value) if isinstance(value, list) else value for key, value in plan.items()}
            ),
            schedule=KernelSchedule(
                pre_conv=ConvSpec(**schedule["pre_conv"]),
                pool=schedule["pool"],
                dbd=tuple(tuple(ConvSpec(**spec) for spec in pair) for pair in schedule["dbd"]),
                pcd_kernel=schedule["pcd_kernel"],
            ),
            **data,
        )

    def fingerprint(self) -> str:
        encoded = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def _conv_bn_relu(in_channels: int, out_channels: int, spec: ConvSpec, eps: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, spec.kernel, stride=spec.stride, padding=spec.padding, bias=False),
        nn.BatchNorm2d(out_channels, eps=eps),
        nn.ReLU(inplace=True),
    )


class UpSample(nn.Module):
    """Bilinear resize to an exact size followed by a 3x3 convolution."""

    def __init__(self, in_channels: int, out_channels: int, size: int, bias: bool = True) -> None:
        super().__init__()
        self.size = size
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.size or x.shape[-2] != self.size:
            x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        return self.conv(x)


class Preprocessing(nn.Module):
    def __init__(self, out_channels: int, spec: ConvSpec, pool: int, eps: float) -> None:
        super().__init__()
        self.block = _conv_bn_relu(1, out_channels, spec, eps)
        self.pool = nn.MaxPool2d(pool)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.block(x))


class DoubleBlockDown(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, specs: Tuple[ConvSpec, ConvSpec], eps: float) -> None:
        super().__init__()
        self.first = _conv_bn_relu(in_channels, out_channels, specs[0], eps)
        self.second = _conv_bn_relu(out_channels, out_channels, specs[1], eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.second(self.first(x))


class DoubleBlockUp(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, size: int, eps: float) -> None:
        super().__init__()
        self.first = nn.Sequential(
            UpSample(in_channels, out_channels, size, bias=False), nn.BatchNorm2d(out_channels, eps=eps), nn.ReLU(inplace=True)
        )
        self.second = nn.Sequential(
            UpSample(out_channels, out_channels, size, bias=False), nn.BatchNorm2d(out_channels, eps=eps), nn.ReLU(inplace=True)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.second(self.first(x))


class Postprocessing(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, size: int, eps: float) -> None:
        super().__init__()
        self.block = nn.Sequential(
            UpSample(in_channels, out_channels, size, bias=False), nn.BatchNorm2d(out_channels, eps=eps), nn.ReLU(inplace=True)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class QuantizationHead(nn.Module):
    def __init__(self, in_channels: int, num_bins: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_channels, num_bins, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.conv(x), dim=1)


class ChromaHead(nn.Module):
    """1x1 convolution from the bin distribution to (a, b).

    Starts as the expectation of bin centers so early predictions are already
    in chroma units.
    """

    def __init__(self, centers: np.ndarray, upsample: bool) -> None:
        super().__init__()
        num_bins = centers.shape[0]
        self.upsample = upsample
        self.conv = nn.Conv2d(num_bins, 2, kernel_size=1)
        with torch.no_grad():
            weight = torch.tensor(np.ascontiguousarray(centers.T), dtype=torch.float32)
            self.conv.weight.copy_(weight.view(2, num_bins, 1, 1))
            self.conv.bias.zero_()

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        ab = self.conv(z)
        if self.upsample:
            ab = F.interpolate(ab, scale_factor=2, mode="bilinear", align_corners=False)
        return ab


class TemporaryHead(nn.Module):
    """Two 1x1 convolutions emitting level-resolution predictions."""

    def __init__(self, level: Level, in_channels: int, centers: np.ndarray) -> None:
        super().__init__()
        self.level = level
        self.quantization = QuantizationHead(in_channels, centers.shape[0])
        self.chroma = ChromaHead(centers, upsample=False)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z_hat = self.quantization(x)
        return z_hat, self.chroma(z_hat)


@dataclass
class ForwardOutput:
    """Network predictions, channels first.

    ``z_hat`` is (B, Q, h, w) and ``ab_hat`` is (B, 2, H, W); for the final
    stage H = 2h, for temporary heads H = h.
    """

    z_hat: torch.Tensor
    ab_hat: torch.Tensor
    level: Level
    trace: List[int]
    routing: RoutingResult


class TucanNet(nn.Module):
    def __init__(self, config: NetworkConfig, centers: np.ndarray) -> None:
        super().__init__()
        config.validate()
        if centers.shape != (config.num_bins, 2):
            raise ConfigError(
                f"Bin table has {centers.shape[0]} bins, network expects {config.num_bins}", key="quantization.bins_file"
            )
        self.config = config
        self._centers = np.asarray(centers, dtype=np.float64)
        plan, schedule, eps = config.plan, config.schedule, config.bn_eps
        dbd_channels, dbu_channels = config.dbd_channels, config.dbu_channels

        self.preprocessing = Preprocessing(config.base_channels, schedule.pre_conv, schedule.pool, eps)
        in_channels = config.base_channels
        blocks = []
        for index, specs in enumerate(schedule.dbd):
            blocks.append(DoubleBlockDown(in_channels, dbd_channels[index], specs, eps))
            in_channels = dbd_channels[index]
        self.dbd = nn.ModuleList(blocks)

        self.pcd = PrimaryCapsulesDown(
            in_channels,
            grid_size=plan.pcd_size,
            kernel_size=schedule.pcd_kernel,
            capsule_dim=config.capsule_dim,
            capsule_groups=config.capsule_groups,
            output_capsules=config.output_capsules,
            entity_dim=config.entity_dim,
            routing_iterations=config.routing_iterations,
        )
        self.pcu = PrimaryCapsulesUp(
            grid_size=plan.pcd_size,
            out_channels=config.pcu_channels,
            capsule_dim=config.capsule_dim,
            capsule_groups=config.capsule_groups,
            output_capsules=config.output_capsules,
            entity_dim=config.entity_dim,
        )

        # skip_sources[n] is the DBD index whose output joins Y_{n+1}
        self.skip_sources = [list(plan.dbd_sizes).index(size) for size in plan.dbu_sizes]
        self.skips = nn.ModuleList(nn.Identity() for _ in plan.dbu_sizes)
        blocks = []
        in_channels = config.pcu_channels
        for index, size in enumerate(plan.dbu_sizes):
            blocks.append(DoubleBlockUp(in_channels, dbu_channels[index], size, eps))
            in_channels = dbu_channels[index] + dbd_channels[self.skip_sources[index]]
        self.dbu = nn.ModuleList(blocks)

        self.postprocessing = Postprocessing(in_channels, config.base_channels, plan.post_out, eps)
        self.quantization_head = QuantizationHead(config.base_channels, config.num_bins)
        self.chroma_head = ChromaHead(self._centers, upsample=True)
        self.temp_head: Optional[TemporaryHead] = None

    @property
    def active_level(self) -> Level:
        return self.temp_head.level if self.temp_head is not None else Level.FINAL

    def level_channels(self, level: Level) -> int:
        if level == Level.PCU:
            return self.config.pcu_channels
        if level == Level.FINAL:
            return self.config.base_channels
        return self.config.dbu_channels[level - 1]

    def attach_temp_head(self, level: Level) -> "TucanNet":
        level = Level(level)
        if level == Level.FINAL:
            raise ValueError("The final stage uses the permanent heads, not a temporary one")
        if self.temp_head is not None:
            raise HeadStateError(f"A temporary head is already attached at level {self.temp_head.level.label}")
        reference = next(self.parameters())
        head = TemporaryHead(level, self.level_channels(level), self._centers)
        self.temp_head = head.to(device=reference.device, dtype=reference.dtype)
        logger.info("Attached temporary head at level %s", level.label)
        return self

    def detach_temp_head(self) -> "TucanNet":
        if self.temp_head is None:
            raise HeadStateError("No temporary head is attached")
        logger.info("Detached temporary head at level %s", self.temp_head.level.label)
        self.temp_head = None
        return self

    def forward(self, lightness: torch.Tensor) -> ForwardOutput:
        """Run on normalized lightness of shape (B, 1, S, S)."""
        size = self.config.plan.input_size
        if lightness.dim() != 4 or lightness.shape[1] != 1 or tuple(lightness.shape[-2:]) != (size, size):
            raise ShapeError(f"Expected lightness of shape (B, 1, {size}, {size}), got {tuple(lightness.shape)}")
        level = self.active_level
        trace: List[int] = []

        m = self.preprocessing(lightness)
        trace.append(m.shape[-1])
        x = m
        features = []
        for block in self.dbd:
            x = block(x)
            features.append(x)
            trace.append(x.shape[-1])

        _, routing = self.pcd(x)
        y = self.pcu(routing)
        trace.append(y.shape[-1])
        if level == Level.PCU:
            return self._temporary_output(y, level, trace, routing)

        for index, block in enumerate(self.dbu):
            y = block(y)
            trace.append(y.shape[-1])
            if level == index + 1:
                return self._temporary_output(y, level, trace, routing)
            skip = self.skips[index](features[self.skip_sources[index]])
            y = torch.cat([skip, y], dim=1)

        n = self.postprocessing(y)
        trace.append(n.shape[-1])
        z_hat = self.quantization_head(n + m)
        ab_hat = self.chroma_head(z_hat)
        trace.append(ab_hat.shape[-1])
        return ForwardOutput(z_hat=z_hat, ab_hat=ab_hat, level=level, trace=trace, routing=routing)

    def _temporary_output(
        self, x: torch.Tensor, level: Level, trace: List[int], routing: RoutingResult
    ) -> ForwardOutput:
        assert self.temp_head is not None
        z_hat, ab_hat = self.temp_head(x)
        return ForwardOutput(z_hat=z_hat, ab_hat=ab_hat, level=level, trace=trace, routing=routing)

    def conv_parameters(self) -> Iterator[nn.Parameter]:
        for module in (self.preprocessing, self.dbd, self.dbu, self.postprocessing):
            yield from module.parameters()

    def capsule_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.pcd.parameters()
        yield from self.pcu.parameters()

    def head_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.quantization_head.parameters()
        yield from self.chroma_head.parameters()

    def backbone_state(self) -> Dict[str, torch.Tensor]:
        return {name: value for name, value in self.state_dict().items() if not name.startswith("temp_head.")}

    def backbone_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, value in sorted(self.backbone_state().items()):
            digest.update(name.encode("utf-8"))
            digest.update(value.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def build(config: NetworkConfig, bins: BinTable) -> TucanNet:
    model = TucanNet(config, bins.centers)
    logger.info(
        "Built %s network: input %d, Q=%d, %d trainable parameters",
        config.preset, config.plan.input_size, config.num_bins, count_parameters(model),
    )
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(parameter.numel() for parameter in model.parameters() if parameter.requires_grad)


@dataclass(frozen=True)
class PlanRow:
    stage: str
    output: str
    size: int
    channels: int
    level: Optional[Level] = None


def freeze_plan_report(config: NetworkConfig) -> List[PlanRow]:
    """Per-stage shape and channel table for a validated config."""
    config.validate()
    plan = config.plan
    rows = [PlanRow("preprocessing", "M", plan.pre_out, config.base_channels)]
    for index, size in enumerate(plan.dbd_sizes):
        rows.append(PlanRow(f"DBD{index + 1}", f"D{index + 1}", size, config.dbd_channels[index]))
    rows.append(PlanRow("PCD+PCU", "X", plan.pcd_size, config.pcu_channels, Level.PCU))
    for index, size in enumerate(plan.dbu_sizes):
        rows.append(PlanRow(f"DBU{index + 1}", f"Y{index + 1}", size, config.dbu_channels[index], Level(index + 1)))
    rows.append(PlanRow("postprocessing", "N", plan.post_out, config.base_channels))
    rows.append(PlanRow("chroma", "ab", plan.head_out, 2, Level.FINAL))
    return rows


def format_plan_report(config: NetworkConfig) -> str:
    rows = freeze_plan_report(config)
    lines = [f"{'stage':<16}{'output':<8}{'size':>9}{'channels':>10}  level"]
    for row in rows:
        shape = f"{row.size}x{row.size}"
        level = row.level.label if row.level is not None else ""
        lines.append(f"{row.stage:<16}{row.output:<8}{shape:>9}{row.channels:>10}  {level}".rstrip())
    lines.append(
        f"Q={config.num_bins}  k={config.capsule_dim}  k_hat={config.entity_dim}  "
        f"capsules={config.capsule_groups * config.plan.pcd_size ** 2} -> {config.output_capsules}"
    )
    return "\n".join(lines)