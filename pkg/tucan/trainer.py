"""Training loops: end-to-end, progressive growing and split-rate fine-tuning."""
from __future__ import annotations

import random
import time
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .artifacts import ArtifactManager, RunPaths
from .checkpoints import Checkpoint, CheckpointStore, restore_model, save_checkpoint
from .colorspace import BinTable, LabImage, decode_expectation, denormalize_lightness, lab_to_rgb
from .config import TrainSection
from .datapipe import SampleRecord, batches, collate, prefetch, upsample_chroma
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .logging_config import get_logger, log_section
from .losses import combined_loss
from .tucan_net import TucanNet
from .types import EpochRecord, Level, RunManifest, RunStatus, TrainScheme

logger = get_logger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PREVIEW_COUNT = 2
TEMP_HEAD_GROUP = "temp_head"


@dataclass(frozen=True)
class TrainPlan:
    scheme: TrainScheme
    epochs: int = 40
    batch_size: int = 32
    base_lr: float = 2e-3
    rho: int = 10
    xi: int = 20
    levels: int = 5
    split_lr: Optional[Tuple[float, float]] = None
    head_group: str = "capsule"
    seed: int = 0
    checkpoint_every: int = 1
    device: str = "cpu"
    prefetch: int = 2
    previews: bool = True

    @classmethod
    def end_to_end(cls, **overrides) -> "TrainPlan":
        return cls(scheme=TrainScheme.END_TO_END, **overrides)

    @classmethod
    def progressive(cls, **overrides) -> "TrainPlan":
        return cls(scheme=TrainScheme.PROGRESSIVE, **overrides)

    @classmethod
    def finetune(cls, **overrides) -> "TrainPlan":
        overrides.setdefault("epochs", 35)
        overrides.setdefault("split_lr", (2e-4, 2e-3))
        return cls(scheme=TrainScheme.FINETUNE, **overrides)

    @classmethod
    def from_settings(cls, section: TrainSection, scheme: Optional[str] = None) -> "TrainPlan":
        chosen = TrainScheme(scheme or section.scheme)
        common = dict(
            batch_size=section.batch_size,
            base_lr=section.lr,
            rho=section.rho,
            xi=section.xi,
            levels=section.levels,
            head_group=section.head_group,
            seed=section.seed,
            checkpoint_every=section.checkpoint_every,
            device=section.device,
            prefetch=section.prefetch,
            previews=section.previews,
        )
        if section.epochs is not None:
            common["epochs"] = section.epochs
        if chosen == TrainScheme.FINETUNE:
            return cls.finetune(split_lr=(section.conv_lr, section.capsule_lr), **common)
        return cls(scheme=chosen, **common)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], **runtime) -> "TrainPlan":
        """Rebuild a plan from :meth:`to_dict`; ``runtime`` sets device, prefetch and previews."""
        try:
            scheme = TrainScheme(data["scheme"])
            common = dict(
                batch_size=int(data["batch_size"]),
                seed=int(data["seed"]),
                checkpoint_every=int(data["checkpoint_every"]),
                **runtime,
            )
            if scheme == TrainScheme.PROGRESSIVE:
                return cls(
                    scheme=scheme,
                    rho=int(data["rho"]),
                    xi=int(data["xi"]),
                    levels=int(data["levels"]),
                    base_lr=float(data["lr"]),
                    **common,
                )
            common["epochs"] = int(data["total_epochs"])
            if scheme == TrainScheme.FINETUNE:
                split_lr = (float(data["conv_lr"]), float(data["capsule_lr"]))
                return cls(scheme=scheme, split_lr=split_lr, head_group=str(data["head_group"]), **common)
            return cls(scheme=scheme, base_lr=float(data["lr"]), **common)
        except (KeyError, TypeError, ValueError) as error:
            raise CheckpointError(f"Stored training plan is incomplete or invalid: {error!r}") from error

    @property
    def total_epochs(self) -> int:
        if self.scheme == TrainScheme.PROGRESSIVE:
            return self.levels * self.rho + self.xi
        return self.epochs

    def to_dict(self) -> Dict[str, object]:
        data: Dict[str, object] = {
            "scheme": self.scheme.value,
            "total_epochs": self.total_epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "optimizer": "adam",
            "adam_betas": list(ADAM_BETAS),
            "adam_eps": ADAM_EPS,
        }
        if self.scheme == TrainScheme.PROGRESSIVE:
            data.update(rho=self.rho, xi=self.xi, levels=self.levels, lr=self.base_lr)
        elif self.scheme == TrainScheme.FINETUNE and self.split_lr is not None:
            data.update(conv_lr=self.split_lr[0], capsule_lr=self.split_lr[1], head_group=self.head_group)
        else:
            data.update(lr=self.base_lr)
        return data


@dataclass(frozen=True)
class Phase:
    level: Level
    start: int
    end: int

    @property
    def is_final(self) -> bool:
        return self.level == Level.FINAL


def schedule(epoch: int, plan: TrainPlan) -> Phase:
    """Map a 0-based epoch to its training phase."""
    total = plan.total_epochs
    if not 0 <= epoch < total:
        raise ValueError(f"Epoch {epoch} outside [0, {total})")
    if plan.scheme != TrainScheme.PROGRESSIVE:
        return Phase(Level.FINAL, 0, total)
    grown = plan.levels * plan.rho
    if epoch < grown:
        index = epoch // plan.rho
        return Phase(Level(index), index * plan.rho, (index + 1) * plan.rho)
    return Phase(Level.FINAL, grown, total)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


def build_optimizer(model: TucanNet, plan: TrainPlan) -> torch.optim.Adam:
    """Adam over the permanent parameters, split into named groups for fine-tuning."""
    if plan.split_lr is None:
        params = list(model.conv_parameters()) + list(model.capsule_parameters()) + list(model.head_parameters())
        groups = [{"name": "all", "params": params, "lr": plan.base_lr}]
    else:
        conv_lr, capsule_lr = plan.split_lr
        conv = list(model.conv_parameters())
        capsule = list(model.capsule_parameters())
        heads = list(model.head_parameters())
        if plan.head_group == "conv":
            conv += heads
        else:
            capsule += heads
        groups = [
            {"name": "conv", "params": conv, "lr": conv_lr},
            {"name": "capsule", "params": capsule, "lr": capsule_lr},
        ]
    return torch.optim.Adam(groups, betas=ADAM_BETAS, eps=ADAM_EPS)


def _temp_head_lr(plan: TrainPlan) -> float:
    if plan.split_lr is None:
        return plan.base_lr
    return plan.split_lr[1] if plan.head_group == "capsule" else plan.split_lr[0]


def _drop_group(optimizer: torch.optim.Optimizer, name: str) -> None:
    for index, group in enumerate(optimizer.param_groups):
        if group.get("name") == name:
            for parameter in group["params"]:
                optimizer.state.pop(parameter, None)
            del optimizer.param_groups[index]
            return


class ColorizationTrainer:
    """Owns one model for the duration of a run and streams checkpoints."""

    def __init__(
        self,
        model: TucanNet,
        bins: BinTable,
        records: Sequence[SampleRecord],
        plan: TrainPlan,
        artifact_manager: ArtifactManager,
        run_paths: RunPaths,
        start_epoch: int = 0,
        optimizer_state: Optional[dict] = None,
    ) -> None:
        if not records:
            raise ValueError("Training needs at least one sample")
        self.model = model.to(plan.device)
        self.bins = bins
        self.records = list(records)
        self.plan = plan
        self.start_epoch = start_epoch
        self._artifact_manager = artifact_manager
        self._run_paths = run_paths
        self._store = CheckpointStore(run_paths.checkpoints_dir)
        self.optimizer = build_optimizer(self.model, plan)
        if self.model.temp_head is not None:
            self._add_temp_group()
        if optimizer_state is not None:
            self.optimizer.load_state_dict(optimizer_state)
        self.manifest = RunManifest(
            run_id=run_paths.run_id,
            plan=plan.to_dict(),
            config_fingerprint=model.config.fingerprint(),
            bins_fingerprint=bins.fingerprint(),
            total_epochs=plan.total_epochs,
        )

    @property
    def history(self) -> List[EpochRecord]:
        return self.manifest.epochs

    def run(self) -> Iterator[Checkpoint]:
        plan = self.plan
        log_section(logger, "Training run", {
            "run_id": self._run_paths.run_id,
            "scheme": plan.scheme.value,
            "epochs": f"{self.start_epoch} -> {plan.total_epochs}",
            "batch_size": plan.batch_size,
            "samples": len(self.records),
            "device": plan.device,
        })
        self.manifest.status = RunStatus.RUNNING
        self._persist_manifest()

        for epoch in range(self.start_epoch, plan.total_epochs):
            phase = schedule(epoch, plan)
            self._enter_phase(phase)
            record = self._train_epoch(epoch, phase)
            self.manifest.epochs.append(record)
            logger.progress(  # type: ignore[attr-defined]
                "Epoch %d/%d [%s] L_q=%.4f L_c=%.4f total=%.4f",
                epoch + 1, plan.total_epochs, phase.level.label, record.l_q, record.l_c, record.total,
            )

            if plan.scheme == TrainScheme.PROGRESSIVE and plan.previews and not phase.is_final and epoch + 1 == phase.end:
                self._write_previews(phase.level)

            last = epoch + 1 == plan.total_epochs
            path = None
            if last or (epoch + 1) % plan.checkpoint_every == 0:
                path = save_checkpoint(
                    self._store.next_path(epoch + 1), self.model, self.bins, epoch + 1, self.manifest.plan, self.optimizer
                )
                self.manifest.checkpoints.append(str(path))
            if last:
                self.manifest.status = RunStatus.COMPLETE
            self._persist_manifest()
            if path is not None:
                yield self._as_checkpoint(path, epoch + 1)

        if self.start_epoch >= plan.total_epochs:
            self.manifest.status = RunStatus.COMPLETE
            self._persist_manifest()

    def _as_checkpoint(self, path, epoch: int) -> Checkpoint:
        return Checkpoint(
            path=path,
            model_state={name: value.detach().clone() for name, value in self.model.state_dict().items()},
            optimizer_state=None,
            epoch=epoch,
            level=self.model.active_level,
            network_config=self.model.config,
            bins=self.bins,
            plan=self.manifest.plan,
            config_fingerprint=self.model.config.fingerprint(),
            bins_fingerprint=self.bins.fingerprint(),
        )

    def _add_temp_group(self) -> None:
        assert self.model.temp_head is not None
        self.optimizer.add_param_group({
            "name": TEMP_HEAD_GROUP,
            "params": list(self.model.temp_head.parameters()),
            "lr": _temp_head_lr(self.plan),
        })

    def _enter_phase(self, phase: Phase) -> None:
        current = self.model.active_level
        if current == phase.level:
            return
        checksum = self.model.backbone_checksum()
        if self.model.temp_head is not None:
            _drop_group(self.optimizer, TEMP_HEAD_GROUP)
            self.model.detach_temp_head()
        if not phase.is_final:
            self.model.attach_temp_head(phase.level)
            self._add_temp_group()
        z_size, ab_size = self.model.config.plan.target_sizes(phase.level)
        log_section(logger, f"Growth {current.label} -> {phase.level.label}", {
            "epochs": f"[{phase.start}, {phase.end})",
            "targets": f"Z {z_size}x{z_size}, ab {ab_size}x{ab_size}",
            "backbone_checksum": checksum[:16],
        })
        logger.progress("Level %s: heads at %dx%d", phase.level.label, ab_size, ab_size)  # type: ignore[attr-defined]

    def _batches(self, epoch: int, phase: Phase) -> Iterator[tuple]:
        z_size, ab_size = self.model.config.plan.target_sizes(phase.level)
        for group in batches(self.records, self.plan.batch_size, self.plan.seed, epoch):
            yield collate(group, z_size, ab_size)

    def _train_epoch(self, epoch: int, phase: Phase) -> EpochRecord:
        self.model.train()
        device = torch.device(self.plan.device)
        sums = {"l_q": 0.0, "l_c": 0.0, "total": 0.0}
        seen = 0
        count = 0
        started = time.perf_counter()
        for lightness, targets in prefetch(self._batches(epoch, phase), self.plan.prefetch):
            lightness = lightness.to(device)
            targets = targets.to(device)
            output = self.model(lightness)
            losses = combined_loss(output, targets)
            if not torch.isfinite(losses.total):
                self._diverged(epoch, losses.to_dict())
            self.optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            self.optimizer.step()

            size = lightness.shape[0]
            for key, value in losses.to_dict().items():
                sums[key] += value * size
            seen += size
            count += 1
        return EpochRecord(
            epoch=epoch,
            level=phase.level,
            l_q=sums["l_q"] / seen,
            l_c=sums["l_c"] / seen,
            total=sums["total"] / seen,
            batches=count,
            duration_seconds=time.perf_counter() - started,
        )

    def _diverged(self, epoch: int, losses: Dict[str, float]) -> None:
        path = save_checkpoint(
            self._store.diagnostic_path(epoch),
            self.model,
            self.bins,
            epoch,
            self.manifest.plan,
            self.optimizer,
            diagnostic=True,
        )
        self.manifest.status = RunStatus.FAILED
        self._persist_manifest()
        logger.error("Non-finite loss at epoch %d: %s", epoch, losses)
        raise TrainingDivergedError(f"Non-finite loss at epoch {epoch}: {losses}", checkpoint_path=path)

    @torch.no_grad()
    def _write_previews(self, level: Level) -> None:
        self.model.eval()
        sample = [record.loaded() for record in self.records[:PREVIEW_COUNT]]
        lightness = torch.from_numpy(np.stack([record.lightness for record in sample]))[:, None]
        output = self.model(lightness.to(self.plan.device))
        distributions = output.z_hat.permute(0, 2, 3, 1).double().cpu().numpy()
        size = self.model.config.plan.input_size
        for index, (record, distribution) in enumerate(zip(sample, distributions)):
            ab = decode_expectation(distribution, self.bins)
            ab = upsample_chroma(ab, size, size)
            rgb = lab_to_rgb(LabImage(L=denormalize_lightness(record.lightness.astype(np.float64)), ab=ab))
            path = self._artifact_manager.persist_preview(self._run_paths, level.label, index, rgb)
            self.manifest.previews.append(str(path))
        self.model.train()

    def _persist_manifest(self) -> None:
        self._artifact_manager.write_manifest(self._run_paths, self.manifest)


def _check_scheme(plan: TrainPlan, expected: TrainScheme) -> None:
    if plan.scheme != expected:
        raise ValueError(f"Plan scheme is {plan.scheme.value}, expected {expected.value}")


def train_end_to_end(
    model: TucanNet,
    bins: BinTable,
    records: Sequence[SampleRecord],
    plan: TrainPlan,
    artifact_manager: ArtifactManager,
    run_paths: RunPaths,
) -> Iterator[Checkpoint]:
    _check_scheme(plan, TrainScheme.END_TO_END)
    return ColorizationTrainer(model, bins, records, plan, artifact_manager, run_paths).run()


def train_progressive(
    model: TucanNet,
    bins: BinTable,
    records: Sequence[SampleRecord],
    plan: TrainPlan,
    artifact_manager: ArtifactManager,
    run_paths: RunPaths,
) -> Iterator[Checkpoint]:
    _check_scheme(plan, TrainScheme.PROGRESSIVE)
    return ColorizationTrainer(model, bins, records, plan, artifact_manager, run_paths).run()


def finetune(
    checkpoint: Optional[Checkpoint],
    records: Sequence[SampleRecord],
    plan: TrainPlan,
    artifact_manager: ArtifactManager,
    run_paths: RunPaths,
) -> Iterator[Checkpoint]:
    """Continue training a checkpointed model with split learning rates."""
    _check_scheme(plan, TrainScheme.FINETUNE)
    if checkpoint is None:
        raise CheckpointError("Fine-tuning needs a checkpoint to start from")
    if plan.split_lr is None:
        raise ValueError("Fine-tuning needs split learning rates")
    model = restore_model(checkpoint)
    if model.temp_head is not None:
        model.detach_temp_head()
    return ColorizationTrainer(model, checkpoint.bins, records, plan, artifact_manager, run_paths).run()


# Train keys whose value is fixed by a stored plan, mapped to their plan field
_STORED_PLAN_KEYS = {
    "scheme": "scheme",
    "epochs": "total_epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "rho": "rho",
    "xi": "xi",
    "levels": "levels",
    "conv_lr": "conv_lr",
    "capsule_lr": "capsule_lr",
    "head_group": "head_group",
    "seed": "seed",
    "checkpoint_every": "checkpoint_every",
}


def resume_plan(checkpoint: Checkpoint, section: TrainSection) -> TrainPlan:
    """The plan of the run that wrote ``checkpoint``.

    Keys set explicitly in ``section`` must agree with the stored plan; only
    device, prefetch and previews are taken from ``section``.
    """
    stored = checkpoint.plan
    plan = TrainPlan.from_dict(stored, device=section.device, prefetch=section.prefetch, previews=section.previews)
    for name in sorted(section.model_fields_set & _STORED_PLAN_KEYS.keys()):
        field = _STORED_PLAN_KEYS[name]
        if field not in stored or (name == "epochs" and plan.scheme == TrainScheme.PROGRESSIVE):
            continue
        requested = getattr(section, name)
        if requested != stored[field]:
            raise ConfigError(
                f"train.{name}={requested} conflicts with the checkpoint's plan ({field}={stored[field]})",
                key=f"train.{name}",
            )
    return plan


def resume(
    checkpoint: Checkpoint,
    records: Sequence[SampleRecord],
    plan: Optional[TrainPlan],
    artifact_manager: ArtifactManager,
    run_paths: RunPaths,
) -> Iterator[Checkpoint]:
    """Continue an interrupted run at the checkpoint's stored epoch.

    Without ``plan`` the checkpoint's own plan is used.
    """
    if plan is None:
        plan = TrainPlan.from_dict(checkpoint.plan)
    model = restore_model(checkpoint)
    if checkpoint.epoch < plan.total_epochs:
        logger.info(
            "Resuming at epoch %d, phase %s", checkpoint.epoch, schedule(checkpoint.epoch, plan).level.label
        )
    trainer = ColorizationTrainer(
        model,
        checkpoint.bins,
        records,
        plan,
        artifact_manager,
        run_paths,
        start_epoch=checkpoint.epoch,
        optimizer_state=checkpoint.optimizer_state,
    )
    return trainer.run()
