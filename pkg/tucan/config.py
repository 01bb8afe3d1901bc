from __future__ import annotations

import os
from pathlib import Path
from typing import Dict, Iterator, Literal, Mapping, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

DATA_ROOT_ENV = "TUCAN_DATA_ROOT"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NetworkSection(_Section):
    preset: Literal["canonical", "toy"] = Field(
        "canonical", description="Shape plan: canonical 224 input or the 64-pixel toy plan"
    )
    capsule_dim: int = Field(8, ge=1, description="k, primary-capsule conv filters and capsule vector size")
    entity_dim: int = Field(16, ge=1, description="k-hat, size of each routed entity vector")
    output_capsules: int = Field(10, ge=1, description="Number of entity capsules produced by routing")
    capsule_groups: int = Field(8, ge=1, description="Capsule groups per spatial position of the PCD grid")
    routing_iterations: int = Field(3, ge=1, description="Routing-by-agreement iterations")
    base_channels: Optional[int] = Field(None, ge=1, description="Channels after preprocessing (preset default when unset)")
    max_channels: Optional[int] = Field(None, ge=1, description="Channel cap down the encoder (preset default when unset)")
    bn_eps: float = Field(1e-5, gt=0, description="BatchNorm epsilon")


class QuantizationSection(_Section):
    grid_size: float = Field(10.0, gt=0, description="Chroma units per bin edge; other values rebuild the gamut table")
    bins_file: Optional[Path] = Field(None, description="Bin table file or .npy center list; packaged table when unset")
    neighbors: int = Field(5, ge=1, description="Nearest bins used by soft-encoding")
    sigma: float = Field(5.0, gt=0, description="Gaussian kernel width of soft-encoding, chroma units")
    rebalance_lambda: float = Field(0.5, ge=0.0, le=1.0, description="Mix between smoothed prior and uniform")
    prior_sigma: float = Field(5.0, ge=0.0, description="Gaussian smoothing of the empirical prior, 0 disables")
    prior_samples: int = Field(10000, ge=1, description="Images used to fit the prior")


class TrainSection(_Section):
    scheme: Literal["end_to_end", "progressive", "finetune"] = Field(
        "end_to_end", description="Training scheme"
    )
    epochs: Optional[int] = Field(None, ge=1, description="Epochs (end_to_end: 40, finetune: 35; ignored by progressive)")
    batch_size: int = Field(32, ge=1, description="Images per optimizer step")
    lr: float = Field(2e-3, gt=0, description="Adam learning rate for end_to_end and progressive")
    rho: int = Field(10, ge=1, description="Epochs per progressive level")
    xi: int = Field(20, ge=1, description="Epochs of the final progressive stage")
    levels: int = Field(5, ge=1, le=5, description="Progressive levels trained before the final stage")
    conv_lr: float = Field(2e-4, gt=0, description="Fine-tuning learning rate of DBD/DBU and pre/post blocks")
    capsule_lr: float = Field(2e-3, gt=0, description="Fine-tuning learning rate of PCD/PCU")
    head_group: Literal["conv", "capsule"] = Field(
        "capsule", description="Fine-tuning parameter group that receives the output heads"
    )
    seed: int = Field(0, description="Seed for weights, shuffling and previews")
    checkpoint_every: int = Field(1, ge=1, description="Epochs between checkpoints")
    device: str = Field("cpu", description="torch device")
    prefetch: int = Field(2, ge=0, description="Batches collated ahead of the training loop, 0 disables")
    previews: bool = Field(True, description="Write decoded previews at the end of each progressive level")


class DataSection(_Section):
    root: Optional[Path] = Field(None, description=f"Dataset directory (falls back to ${DATA_ROOT_ENV})")
    split_manifest: Optional[Path] = Field(None, description="Text file listing one relative image path per line")
    limit: Optional[int] = Field(None, ge=1, description="Use at most this many images")
    cache: bool = Field(True, description="Keep decoded samples and encodings in memory; false decodes per batch")


class OutputSection(_Section):
    dir: Path = Field(Path("runs"), description="Directory that receives run folders")


class Settings(_Section):
    network: NetworkSection = Field(default_factory=NetworkSection)
    quantization: QuantizationSection = Field(default_factory=QuantizationSection)
    train: TrainSection = Field(default_factory=TrainSection)
    data: DataSection = Field(default_factory=DataSection)
    output: OutputSection = Field(default_factory=OutputSection)


def _load_values(config_path: Optional[Path]) -> Dict[str, str]:
    if config_path is None:
        return {}
    if not config_path.is_file():
        raise ConfigError(f"Config file not found: {config_path}")
    values: Dict[str, str] = {}
    for key, value in dotenv_values(config_path).items():
        if value is None:
            raise ConfigError(f"Config key without value: {key}", key=key)
        values[key] = value
    return values


def parse_overrides(pairs: Optional[list[str]]) -> Dict[str, str]:
    """Turn ``key=value`` strings from the command line into a mapping."""
    overrides: Dict[str, str] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override must look like key=value: {pair}", key=pair)
        overrides[key.strip()] = value.strip()
    return overrides


def _nest(values: Mapping[str, str]) -> Dict[str, object]:
    nested: Dict[str, object] = {}
    for key, value in values.items():
        section, sep, name = key.partition(".")
        if not sep:
            raise ConfigError(f"Unknown config key: {key}", key=key)
        bucket = nested.setdefault(section, {})
        if not isinstance(bucket, dict):
            raise ConfigError(f"Unknown config key: {key}", key=key)
        bucket[name] = value
    return nested


def load_settings(
    config_path: Optional[Path] = None,
    overrides: Optional[Mapping[str, str]] = None,
) -> Settings:
    """Load settings from a flat ``section.key = value`` file plus overrides."""

    values = _load_values(config_path)
    if overrides:
        values.update(overrides)

    nested = _nest(values)
    data_section = nested.setdefault("data", {})
    env_root = os.environ.get(DATA_ROOT_ENV)
    if isinstance(data_section, dict) and "root" not in data_section and env_root:
        data_section["root"] = env_root

    try:
        return Settings.model_validate(nested)
    except ValidationError as error:
        first = error.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"{key}: {first['msg']}", key=key) from error


def schema_entries() -> Iterator[Tuple[str, object, str]]:
    """Yield ``(key, default, description)`` for every documented config key."""
    for section_name, section_field in Settings.model_fields.items():
        section_model = section_field.default_factory  # type: ignore[assignment]
        for name, field in section_model.model_fields.items():  # type: ignore[union-attr]
            yield f"{section_name}.{name}", field.default, field.description or ""


def format_schema() -> str:
    lines = []
    current = None
    for key, default, description in schema_entries():
        section = key.split(".", 1)[0]
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"# [{section}]")
            current = section
        shown = "" if default is None else default
        lines.append(f"{key} = {shown}    # {description}")
    return "\n".join(lines)
