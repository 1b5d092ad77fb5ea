import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import json
import shutil

import pytest
import torch

import backend.trainer as trainer
from backend.distill_objects.checkpoint import load_checkpoint
from backend.distill_objects.config import FilterConfig
from backend.distill_objects.enums import EmptyPseudoPolicy, Stage, Strategy
from backend.distill_objects.errors import ConfigError, DivergenceError, NonFiniteLossError
from backend.distill_objects.metrics_log import read_metrics
from backend.distill_objects.segmodel import init_model
from backend.distill_objects.teacher_updates import params_hash
from backend.trainer import (
    build_context,
    build_schedule,
    distill_stage,
    guided_burnin_stage,
    run_pipeline,
    run_steps,
    step_generators,
    train_teacher_stage,
    TrainState,
)


# -----------------------------------------------------------------------------
# Schedules
# -----------------------------------------------------------------------------
@pytest.mark.parametrize("strategy,expected", [
    (Strategy.GUIDED, (30, 30, 100)),
    (Strategy.STANDARD_BURNIN, (0, 30, 100)),
    (Strategy.FIXED_TEACHER, (30, 100, 100)),
    (Strategy.NO_BURNIN, (0, 0, 100)),
    (Strategy.SUPERVISED_ONLY, (0, 100, 100)),
])
def test_build_schedule(tiny_train_config, strategy, expected):
    config = tiny_train_config.model_copy(update={"strategy": strategy, "total_iters": 100,
                                                  "burn_in_iters": None, "teacher_iters": None})
    schedule = build_schedule(config, 0.1)
    assert (schedule.teacher_iters, schedule.burn_in_iters, schedule.total_iters) == expected
    assert schedule.end == expected[0] + 100


def test_schedule_stages_and_teacher_use(tiny_train_config):
    schedule = build_schedule(tiny_train_config, 0.5)
    assert [schedule.stage_at(s) for s in range(6)] == [
        Stage.TEACHER_PRETRAIN, Stage.TEACHER_PRETRAIN, Stage.BURN_IN, Stage.BURN_IN, Stage.DISTILL, Stage.DISTILL,
    ]
    assert schedule.uses_teacher(Stage.BURN_IN)

    standard = build_schedule(tiny_train_config.model_copy(update={"strategy": Strategy.STANDARD_BURNIN}), 0.5)
    assert not standard.uses_teacher(Stage.BURN_IN)
    assert standard.uses_teacher(Stage.DISTILL)


def test_step_generators_depend_on_seed_and_step():
    a_np, a_torch = step_generators(0, 5)
    b_np, b_torch = step_generators(0, 5)
    c_np, _ = step_generators(0, 6)

    assert a_np.integers(1 << 30) == b_np.integers(1 << 30)
    assert torch.equal(torch.rand(3, generator=a_torch), torch.rand(3, generator=b_torch))
    assert step_generators(0, 5)[0].integers(1 << 30) != c_np.integers(1 << 30)


# -----------------------------------------------------------------------------
# Context
# -----------------------------------------------------------------------------
def test_build_context_rejects_class_mismatch(tiny_dataset, tiny_train_config):
    train, _ = tiny_dataset
    model = tiny_train_config.model.model_copy(update={"num_classes": 2})
    with pytest.raises(ConfigError):
        build_context(tiny_train_config.model_copy(update={"model": model}), train)


def test_build_context_prediction_size(tiny_dataset, tiny_train_config):
    train, val = tiny_dataset
    ctx = build_context(tiny_train_config, train, val)
    assert ctx.pred_size == (16, 16)
    assert ctx.labeled_fraction == 0.5
    assert ctx.device == torch.device("cpu")


# -----------------------------------------------------------------------------
# Stages
# -----------------------------------------------------------------------------
def test_supervised_only_never_loads_unlabeled_images(tiny_dataset, tiny_train_config):
    train, _ = tiny_dataset
    config = tiny_train_config.model_copy(update={"strategy": Strategy.SUPERVISED_ONLY})
    ctx = build_context(config, train)

    state = run_steps(ctx, TrainState(), 0, ctx.schedule.end)

    assert state.iteration == 4
    assert state.teacher is None
    assert ctx.store.labeled_loads > 0
    assert ctx.store.unlabeled_loads == 0
    assert all(r["stage"] == "burn_in" for r in state.history)


def test_guided_burnin_leaves_teacher_untouched(tiny_dataset, tiny_train_config):
    train, _ = tiny_dataset
    ctx = build_context(tiny_train_config, train)

    teacher = train_teacher_stage(ctx)
    before = params_hash(teacher)
    student = guided_burnin_stage(ctx, teacher)

    assert params_hash(teacher) == before
    assert params_hash(student) != before
    assert ctx.store.unlabeled_loads > 0
    assert not any(p.requires_grad for p in teacher.parameters())


def test_fixed_teacher_stays_frozen_for_the_whole_run(tiny_dataset, tiny_train_config):
    train, _ = tiny_dataset
    config = tiny_train_config.model_copy(update={"strategy": Strategy.FIXED_TEACHER, "burn_in_iters": None})
    ctx = build_context(config, train)
    assert ctx.schedule.distill_start == ctx.schedule.end

    teacher = train_teacher_stage(ctx)
    before = params_hash(teacher)
    guided_burnin_stage(ctx, teacher)
    assert params_hash(teacher) == before


def test_distillation_starts_from_a_copy_of_the_student(tiny_dataset, tiny_train_config):
    train, _ = tiny_dataset
    config = tiny_train_config.model_copy(update={"strategy": Strategy.STANDARD_BURNIN, "burn_in_iters": 4})
    ctx = build_context(config, train)
    student = init_model(config.model, 7)

    state = distill_stage(ctx, student)

    assert state.teacher is not student
    assert params_hash(state.teacher) == params_hash(student)
    assert state.stage == Stage.DISTILL


def one_distill_step_config(config, **update):
    return config.model_copy(update={"strategy": Strategy.STANDARD_BURNIN, "total_iters": 4,
                                     "burn_in_iters": 3, **update})


def test_distill_step_with_ema_one_keeps_the_entry_teacher(tiny_dataset, tiny_train_config):
    train, _ = tiny_dataset
    ctx = build_context(one_distill_step_config(tiny_train_config, ema_alpha=1.0), train)
    student = init_model(ctx.config.model, 7)
    entry = params_hash(student)

    state = distill_stage(ctx, student)

    assert state.iteration == ctx.schedule.end == ctx.schedule.distill_start + 1
    assert params_hash(state.teacher) == entry
    assert params_hash(state.student) != entry


def test_distill_step_with_ema_zero_copies_the_student(tiny_dataset, tiny_train_config):
    train, _ = tiny_dataset
    ctx = build_context(one_distill_step_config(tiny_train_config, ema_alpha=0.0), train)
    student = init_model(ctx.config.model, 7)
    entry = params_hash(student)

    state = distill_stage(ctx, student)

    assert params_hash(state.student) != entry
    assert params_hash(state.teacher) == params_hash(state.student)


def test_distill_step_without_learning_rate_changes_nothing(tiny_dataset, tiny_train_config, monkeypatch):
    train, _ = tiny_dataset
    real_build_optimizer = trainer.build_optimizer

    def frozen_optimizer(model, config):
        optimizer = real_build_optimizer(model, config)
        for group in optimizer.param_groups:
            group["lr"] = 0.0
        return optimizer

    monkeypatch.setattr(trainer, "build_optimizer", frozen_optimizer)
    ctx = build_context(one_distill_step_config(tiny_train_config, ema_alpha=0.5), train)
    student = init_model(ctx.config.model, 7)
    entry = params_hash(student)

    state = distill_stage(ctx, student)

    assert params_hash(state.student) == entry
    assert params_hash(state.teacher) == entry


def test_pseudo_target_policies(tiny_dataset, tiny_train_config, images64):
    train, _ = tiny_dataset
    teacher = init_model(tiny_train_config.model, 0)
    strict = FilterConfig(alpha_C=1.0, alpha_S=0.0)

    skip_ctx = build_context(tiny_train_config.model_copy(update={"filter": strict}), train)
    targets, stats = trainer._pseudo_targets(skip_ctx, teacher, images64)
    assert targets == [None, None]
    assert stats == {"pseudo_count": 0, "pseudo_mean_score": 0.0, "pseudo_skip_rate": 1.0}

    no_object = tiny_train_config.model_copy(update={"filter": strict,
                                                     "empty_pseudo_policy": EmptyPseudoPolicy.NO_OBJECT})
    targets, _ = trainer._pseudo_targets(build_context(no_object, train), teacher, images64)
    assert [len(t) for t in targets] == [0, 0]


def test_repeated_non_finite_losses_raise(tiny_dataset, tiny_train_config, monkeypatch):
    train, _ = tiny_dataset

    def broken(*args, **kwargs):
        raise NonFiniteLossError("loss is nan")

    monkeypatch.setattr(trainer, "total_loss", broken)
    ctx = build_context(tiny_train_config, train)

    with pytest.raises(DivergenceError) as excinfo:
        run_steps(ctx, TrainState(), 0, ctx.schedule.end)
    assert excinfo.value.iteration == 3
    assert excinfo.value.consecutive == 3


# -----------------------------------------------------------------------------
# Full pipeline
# -----------------------------------------------------------------------------
def test_run_pipeline_writes_run_directory(tiny_dataset, tiny_train_config, tmp_path):
    train, val = tiny_dataset
    run_dir = tmp_path / "run"

    result = run_pipeline(tiny_train_config, train, val, run_dir)

    for name in ("config.json", "metrics.jsonl", "final_report.json", "last.ckpt", "best.ckpt",
                 "ckpt_2.ckpt", "ckpt_4.ckpt", "ckpt_6.ckpt"):
        assert (run_dir / name).exists(), name

    report = json.loads((run_dir / "final_report.json").read_text())
    assert report == result.report
    assert report["iterations"] == 6
    assert report["strategy"] == "guided"
    assert 0.0 <= report["final_map"] <= 1.0
    assert report["best_map"] >= report["final_map"]

    records = read_metrics(run_dir / "metrics.jsonl")
    assert [r["iter"] for r in records] == [1, 2, 3, 4, 5, 6]
    assert [r["stage"] for r in records] == ["teacher_pretrain"] * 2 + ["burn_in"] * 2 + ["distill"] * 2
    assert "val_mask_AP" in records[3] and "val_mask_AP" not in records[1]


def test_resume_repeats_the_uninterrupted_run(tiny_dataset, tiny_train_config, tmp_path):
    train, val = tiny_dataset
    config = tiny_train_config.model_copy(update={"deterministic": True})
    run_dir = tmp_path / "run"

    full = run_pipeline(config, train, val, run_dir)
    expected = read_metrics(run_dir / "metrics.jsonl")

    shutil.copy(run_dir / "ckpt_4.ckpt", run_dir / "last.ckpt")
    resumed = run_pipeline(config, train, val, run_dir, resume=True)
    records = read_metrics(run_dir / "metrics.jsonl")

    assert records == expected

    for name, value in full.state.student.state_dict().items():
        assert torch.equal(value, resumed.state.student.state_dict()[name])
    assert resumed.report["iterations"] == 6


def test_resume_keeps_skip_counters(tiny_dataset, tiny_train_config, tmp_path, monkeypatch):
    train, val = tiny_dataset
    config = tiny_train_config.model_copy(update={"deterministic": True})
    run_dir = tmp_path / "run"
    real_total_loss = trainer.total_loss
    calls = []

    def fails_once(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise NonFiniteLossError("loss is nan")
        return real_total_loss(*args, **kwargs)

    monkeypatch.setattr(trainer, "total_loss", fails_once)
    full = run_pipeline(config, train, val, run_dir)
    expected = read_metrics(run_dir / "metrics.jsonl")
    assert full.report["skipped_steps"] == 1
    assert expected[1]["skipped"] is True

    counters = load_checkpoint(run_dir / "ckpt_4.ckpt")["counters"]
    assert counters["skipped_steps"] == 1
    assert counters["consecutive_failures"] == 0

    monkeypatch.setattr(trainer, "total_loss", real_total_loss)
    shutil.copy(run_dir / "ckpt_4.ckpt", run_dir / "last.ckpt")
    resumed = run_pipeline(config, train, val, run_dir, resume=True)

    assert resumed.report["skipped_steps"] == 1
    assert resumed.state.consecutive_failures == 0
    assert read_metrics(run_dir / "metrics.jsonl") == expected
    assert resumed.report["best_iteration"] == full.report["best_iteration"]


def test_resume_keeps_a_running_failure_streak(tiny_dataset, tiny_train_config, tmp_path, monkeypatch):
    train, _ = tiny_dataset
    config = tiny_train_config.model_copy(update={"divergence_patience": 3})
    run_dir = tmp_path / "run"
    real_total_loss = trainer.total_loss
    calls = []

    def fails_late(*args, **kwargs):
        calls.append(1)
        if len(calls) >= 2:
            raise NonFiniteLossError("loss is nan")
        return real_total_loss(*args, **kwargs)

    monkeypatch.setattr(trainer, "total_loss", fails_late)

    with pytest.raises(DivergenceError):
        run_pipeline(config, train, None, run_dir)

    counters = load_checkpoint(run_dir / "ckpt_2.ckpt")["counters"]
    assert counters == {"skipped_steps": 1, "consecutive_failures": 1, "best_iteration": 0}

    # One more failure after resuming completes the streak of three.
    shutil.copy(run_dir / "ckpt_2.ckpt", run_dir / "last.ckpt")
    with pytest.raises(DivergenceError) as excinfo:
        run_pipeline(config, train, None, run_dir, resume=True)
    assert excinfo.value.iteration == 4
    assert excinfo.value.consecutive == 3


@pytest.mark.slow
def test_supervised_only_learns_something(tiny_dataset, tiny_train_config):
    train, val = tiny_dataset
    config = tiny_train_config.model_copy(update={"strategy": Strategy.SUPERVISED_ONLY, "total_iters": 500,
                                                  "burn_in_iters": None, "learning_rate": 1e-3})

    result = run_pipeline(config, train, val)

    losses = [r["loss_total"] for r in result.history if "loss_total" in r]
    assert sum(losses[-20:]) / 20 < sum(losses[:20]) / 20
    assert result.report["final_map"] is not None
