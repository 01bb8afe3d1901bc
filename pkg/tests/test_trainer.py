from __future__ import annotations

import json
from pathlib import Path
from typing import List, Tuple

import pytest
import torch

from conftest import TOY_SIZE, write_warm_images
from tucan.artifacts import ArtifactManager, RunPaths
from tucan.checkpoints import load_checkpoint, save_checkpoint
from tucan.colorspace import BinTable, SoftEncoder, canonical_bins
from tucan.config import TrainSection
from tucan.datapipe import SampleRecord, load_records, scan_dataset
from tucan.errors import CheckpointError, ConfigError, TrainingDivergedError
from tucan.evalkit import GrayColorizer, ModelColorizer, evaluate
from tucan.trainer import (
    ColorizationTrainer,
    TrainPlan,
    build_optimizer,
    finetune,
    resume,
    resume_plan,
    schedule,
    seed_everything,
    train_end_to_end,
    train_progressive,
)
from tucan.tucan_net import NetworkConfig, TucanNet, build
from tucan.types import Level, RunStatus, TrainScheme


def test_canonical_plans() -> None:
    end_to_end = TrainPlan.end_to_end()
    assert (end_to_end.total_epochs, end_to_end.batch_size, end_to_end.base_lr) == (40, 32, 2e-3)

    progressive = TrainPlan.progressive()
    assert (progressive.rho, progressive.xi, progressive.total_epochs) == (10, 20, 70)

    tuned = TrainPlan.finetune()
    assert tuned.total_epochs == 35
    assert tuned.split_lr == (2e-4, 2e-3)
    assert tuned.to_dict()["conv_lr"] == 2e-4


def test_plan_from_settings() -> None:
    section = TrainSection(scheme="progressive", rho=2, xi=3, levels=3, batch_size=8)
    plan = TrainPlan.from_settings(section)
    assert plan.scheme == TrainScheme.PROGRESSIVE
    assert plan.total_epochs == 9
    tuned = TrainPlan.from_settings(section, scheme="finetune")
    assert tuned.total_epochs == 35 and tuned.batch_size == 8


def test_progressive_schedule() -> None:
    plan = TrainPlan.progressive()
    assert schedule(0, plan).level == Level.PCU
    assert schedule(9, plan).level == Level.PCU
    assert schedule(10, plan).level == Level.UP1
    assert schedule(49, plan).level == Level.UP4
    for epoch in range(50, 70):
        phase = schedule(epoch, plan)
        assert phase.is_final and (phase.start, phase.end) == (50, 70)
    for bad in (-1, 70):
        with pytest.raises(ValueError):
            schedule(bad, plan)

    levels = [schedule(epoch, plan).level for epoch in range(70)]
    changes = [epoch for epoch in range(1, 70) if levels[epoch] != levels[epoch - 1]]
    assert changes == [10, 20, 30, 40, 50]
    assert all(schedule(epoch, TrainPlan.end_to_end()).is_final for epoch in range(40))


def test_optimizer_groups_for_split_rates(toy_model: TucanNet) -> None:
    optimizer = build_optimizer(toy_model, TrainPlan.finetune())
    groups = {group["name"]: group for group in optimizer.param_groups}
    assert groups["conv"]["lr"] == 2e-4 and groups["capsule"]["lr"] == 2e-3
    conv_ids = {id(p) for p in groups["conv"]["params"]}
    capsule_ids = {id(p) for p in groups["capsule"]["params"]}
    assert {id(p) for p in toy_model.dbd.parameters()} <= conv_ids
    assert {id(p) for p in toy_model.dbu.parameters()} <= conv_ids
    assert {id(p) for p in toy_model.pcd.parameters()} <= capsule_ids
    assert {id(p) for p in toy_model.pcu.parameters()} <= capsule_ids
    assert {id(p) for p in toy_model.head_parameters()} <= capsule_ids

    moved = build_optimizer(toy_model, TrainPlan.finetune(head_group="conv"))
    conv_ids = {id(p) for p in moved.param_groups[0]["params"]}
    assert {id(p) for p in toy_model.head_parameters()} <= conv_ids


def test_capsules_move_further_than_convs_under_equal_gradients(toy_model: TucanNet) -> None:
    optimizer = build_optimizer(toy_model, TrainPlan.finetune())
    conv = [p.detach().clone() for p in toy_model.conv_parameters()]
    capsule = [p.detach().clone() for p in toy_model.capsule_parameters()]
    for parameter in toy_model.parameters():
        parameter.grad = torch.ones_like(parameter)
    optimizer.step()

    def mean_step(before, after) -> float:
        total = sum(float((a - b).abs().sum()) for a, b in zip(after, before))
        return total / sum(b.numel() for b in before)

    conv_step = mean_step(conv, [p.detach() for p in toy_model.conv_parameters()])
    capsule_step = mean_step(capsule, [p.detach() for p in toy_model.capsule_parameters()])
    assert conv_step == pytest.approx(2e-4, rel=1e-3)
    assert capsule_step == pytest.approx(2e-3, rel=1e-3)


def _small_plan(scheme: str, **overrides) -> TrainPlan:
    defaults = dict(epochs=2, batch_size=4, prefetch=0)
    defaults.update(overrides)
    return TrainPlan(scheme=TrainScheme(scheme), **defaults)


def test_end_to_end_run_writes_manifest_and_checkpoints(
    toy_model: TucanNet,
    small_bins: BinTable,
    records: List[SampleRecord],
    run_artifacts: Tuple[ArtifactManager, RunPaths],
) -> None:
    manager, run_paths = run_artifacts
    checkpoints = list(train_end_to_end(toy_model, small_bins, records, _small_plan("end_to_end"), manager, run_paths))
    assert [checkpoint.epoch for checkpoint in checkpoints] == [1, 2]
    assert all(checkpoint.level == Level.FINAL for checkpoint in checkpoints)

    manifest = json.loads(run_paths.manifest_path.read_text(encoding="utf-8"))
    assert manifest["status"] == RunStatus.COMPLETE.value
    assert manifest["plan"]["total_epochs"] == 2
    assert [epoch["batches"] for epoch in manifest["epochs"]] == [3, 3]
    assert len(manifest["checkpoints"]) == 2
    assert Path(manifest["checkpoints"][-1]).name == "ckpt_002_e2.pt"


def test_seeded_runs_are_reproducible(
    toy_config: NetworkConfig,
    small_bins: BinTable,
    records: List[SampleRecord],
    tmp_path: Path,
) -> None:
    histories = []
    for attempt in range(2):
        manager = ArtifactManager(tmp_path / f"runs{attempt}")
        seed_everything(3)
        model = build(toy_config, small_bins)
        trainer = ColorizationTrainer(model, small_bins, records, _small_plan("end_to_end", seed=3, prefetch=2), manager, manager.create_run("r"))
        list(trainer.run())
        histories.append([(record.l_q, record.l_c) for record in trainer.history])
    assert histories[0] == histories[1]


def test_progressive_run_swaps_heads_and_writes_previews(
    toy_model: TucanNet,
    small_bins: BinTable,
    records: List[SampleRecord],
    run_artifacts: Tuple[ArtifactManager, RunPaths],
) -> None:
    manager, run_paths = run_artifacts
    plan = _small_plan("progressive", levels=2, rho=1, xi=1)
    checkpoints = list(train_progressive(toy_model, small_bins, records, plan, manager, run_paths))
    assert [checkpoint.level for checkpoint in checkpoints] == [Level.PCU, Level.UP1, Level.FINAL]
    assert toy_model.temp_head is None

    manifest = json.loads(run_paths.manifest_path.read_text(encoding="utf-8"))
    assert [epoch["level"] for epoch in manifest["epochs"]] == ["PCU", "1stUP", "final"]
    names = sorted(Path(path).name for path in manifest["previews"])
    assert names == ["preview_1stUP_0.png", "preview_1stUP_1.png", "preview_PCU_0.png", "preview_PCU_1.png"]
    assert all(Path(path).is_file() for path in manifest["previews"])


def test_growth_keeps_backbone_and_resets_temp_optimizer_state(
    toy_model: TucanNet,
    small_bins: BinTable,
    records: List[SampleRecord],
    run_artifacts: Tuple[ArtifactManager, RunPaths],
) -> None:
    manager, run_paths = run_artifacts
    plan = _small_plan("progressive", levels=2, rho=1, xi=1)
    trainer = ColorizationTrainer(toy_model, small_bins, records, plan, manager, run_paths)
    trainer._enter_phase(schedule(0, plan))
    trainer._train_epoch(0, schedule(0, plan))
    checksum = toy_model.backbone_checksum()
    trainer._enter_phase(schedule(1, plan))
    assert toy_model.backbone_checksum() == checksum
    assert toy_model.active_level == Level.UP1

    names = [group["name"] for group in trainer.optimizer.param_groups]
    assert names == ["all", "temp_head"]
    fresh = trainer.optimizer.param_groups[1]["params"]
    assert all(parameter not in trainer.optimizer.state for parameter in fresh)
    assert any(parameter in trainer.optimizer.state for parameter in trainer.optimizer.param_groups[0]["params"])


def test_non_finite_loss_aborts_with_diagnostic_checkpoint(
    toy_model: TucanNet,
    small_bins: BinTable,
    records: List[SampleRecord],
    run_artifacts: Tuple[ArtifactManager, RunPaths],
) -> None:
    manager, run_paths = run_artifacts
    with torch.no_grad():
        toy_model.chroma_head.conv.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as excinfo:
        list(train_end_to_end(toy_model, small_bins, records, _small_plan("end_to_end"), manager, run_paths))
    assert excinfo.value.checkpoint_path is not None and excinfo.value.checkpoint_path.is_file()
    assert load_checkpoint(excinfo.value.checkpoint_path).diagnostic
    manifest = json.loads(run_paths.manifest_path.read_text(encoding="utf-8"))
    assert manifest["status"] == RunStatus.FAILED.value


def test_scheme_mismatch_and_missing_checkpoint(
    toy_model: TucanNet,
    small_bins: BinTable,
    records: List[SampleRecord],
    run_artifacts: Tuple[ArtifactManager, RunPaths],
) -> None:
    manager, run_paths = run_artifacts
    with pytest.raises(ValueError):
        train_progressive(toy_model, small_bins, records, _small_plan("end_to_end"), manager, run_paths)
    with pytest.raises(CheckpointError):
        finetune(None, records, TrainPlan.finetune(epochs=1), manager, run_paths)


def test_finetune_and_resume_continue_from_checkpoints(
    toy_model: TucanNet,
    small_bins: BinTable,
    records: List[SampleRecord],
    tmp_path: Path,
) -> None:
    manager = ArtifactManager(tmp_path / "runs")
    plan = _small_plan("progressive", levels=2, rho=1, xi=1)
    first = list(train_progressive(toy_model, small_bins, records, plan, manager, manager.create_run("grow")))
    stored = load_checkpoint(first[0].path)
    assert (stored.epoch, stored.level) == (1, Level.PCU)

    resumed_run = manager.create_run("resumed")
    resumed = list(resume(stored, records, plan, manager, resumed_run))
    assert [checkpoint.level for checkpoint in resumed] == [Level.UP1, Level.FINAL]
    manifest = json.loads(resumed_run.manifest_path.read_text(encoding="utf-8"))
    assert [epoch["epoch"] for epoch in manifest["epochs"]] == [1, 2]

    tuned = list(
        finetune(load_checkpoint(first[1].path), records, TrainPlan.finetune(epochs=1, batch_size=4, prefetch=0), manager, manager.create_run("tune"))
    )
    assert len(tuned) == 1 and tuned[0].level == Level.FINAL
    assert tuned[0].plan["capsule_lr"] == 2e-3


def test_plan_rebuilds_from_its_stored_form() -> None:
    for plan in (
        _small_plan("end_to_end", epochs=3, seed=5),
        TrainPlan.progressive(levels=2, rho=3, xi=4, checkpoint_every=2, prefetch=0),
        TrainPlan.finetune(epochs=6, split_lr=(1e-4, 1e-3), head_group="conv", prefetch=0),
    ):
        rebuilt = TrainPlan.from_dict(plan.to_dict(), prefetch=0)
        assert rebuilt == plan
    with pytest.raises(CheckpointError):
        TrainPlan.from_dict({"scheme": "progressive", "batch_size": 4})


def test_resume_plan_keeps_stored_values_and_rejects_conflicts(
    toy_model: TucanNet, small_bins: BinTable, tmp_path: Path
) -> None:
    stored_plan = TrainPlan.progressive(levels=2, rho=2, xi=1, batch_size=4, prefetch=0)
    path = save_checkpoint(tmp_path / "grow.pt", toy_model, small_bins, 1, stored_plan.to_dict())
    checkpoint = load_checkpoint(path)

    plan = resume_plan(checkpoint, TrainSection(prefetch=0))
    assert plan == stored_plan
    assert resume_plan(checkpoint, TrainSection(scheme="progressive", rho=2, epochs=9, prefetch=0)) == stored_plan
    for clash, key in ((dict(scheme="end_to_end"), "train.scheme"), (dict(xi=5), "train.xi"), (dict(seed=1), "train.seed")):
        with pytest.raises(ConfigError) as excinfo:
            resume_plan(checkpoint, TrainSection(**clash))
        assert excinfo.value.key == key

    untracked = load_checkpoint(save_checkpoint(tmp_path / "bare.pt", toy_model, small_bins, 1, {}))
    with pytest.raises(CheckpointError):
        resume_plan(untracked, TrainSection())


@pytest.fixture(scope="module")
def smoke_records(tmp_path_factory: pytest.TempPathFactory) -> List[SampleRecord]:
    directory = tmp_path_factory.mktemp("smoke")
    write_warm_images(directory, 200, seed=11)
    return load_records(scan_dataset(directory), SoftEncoder(canonical_bins()), TOY_SIZE)


@pytest.mark.slow
def test_smoke_end_to_end_training_learns(smoke_records: List[SampleRecord], tmp_path: Path) -> None:
    bins = canonical_bins()
    seed_everything(0)
    model = build(NetworkConfig.toy(bins.Q), bins)
    manager = ArtifactManager(tmp_path / "runs")
    trainer = ColorizationTrainer(
        model, bins, smoke_records, _small_plan("end_to_end", epochs=5, batch_size=8, checkpoint_every=5), manager, manager.create_run("smoke")
    )
    list(trainer.run())
    first, last = trainer.history[0].total, trainer.history[-1].total
    assert last <= 0.8 * first

    trained = evaluate(ModelColorizer(model, name="toy"), smoke_records, "smoke")
    gray = evaluate(GrayColorizer(), smoke_records, "smoke")
    assert trained.mean_psnr > gray.mean_psnr


@pytest.mark.slow
def test_smoke_progressive_levels_each_improve(smoke_records: List[SampleRecord], tmp_path: Path) -> None:
    bins = canonical_bins()
    seed_everything(0)
    model = build(NetworkConfig.toy(bins.Q), bins)
    manager = ArtifactManager(tmp_path / "runs")
    plan = _small_plan("progressive", levels=3, rho=2, xi=2, batch_size=8, checkpoint_every=8)
    trainer = ColorizationTrainer(model, bins, smoke_records[:100], plan, manager, manager.create_run("grow"))
    list(trainer.run())
    history = trainer.history
    assert [record.level for record in history] == [
        Level.PCU, Level.PCU, Level.UP1, Level.UP1, Level.UP2, Level.UP2, Level.FINAL, Level.FINAL,
    ]
    for start in range(0, 8, 2):
        assert history[start + 1].total < history[start].total
