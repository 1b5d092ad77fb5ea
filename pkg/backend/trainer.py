"""
Distillation Training Engine

This file runs the teacher-student training protocol on a synthetic dataset:
- Teacher pre-training: a fresh model is trained on labeled data only,
- Guided burn-in: a fresh student learns from labeled data and from pseudo-labels produced
  by the frozen pre-trained teacher on unlabeled data,
- Distillation: the student is copied into the teacher, and from then on the teacher
  follows the student through an exponential moving average of its weights.

`run_pipeline` dispatches on `Strategy`, which also covers the baselines: a labeled-only
burn-in followed by distillation, a teacher that stays fixed for the whole run, a run that
starts distilling straight away, and purely supervised training.

All stages share one global step counter. Every random choice of a step (batch indices,
augmentations, point sampling) is derived from (seed, step), so a run resumed from a
checkpoint repeats the uninterrupted run exactly. Each step is logged to a JSON-lines
metrics log, validation mask-AP is computed every evaluation interval, and checkpoints
(`ckpt_<iter>.ckpt`, `last.ckpt`, `best.ckpt`) are written to the run directory.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from backend.distill_objects.augment import labeled_view, make_views, to_tensor_image
from backend.distill_objects.checkpoint import load_checkpoint, restore_model, save_checkpoint
from backend.distill_objects.config import TrainConfig, save_train_config
from backend.distill_objects.enums import EmptyPseudoPolicy, EvalModel, Stage, Strategy
from backend.distill_objects.errors import (
    ConfigError,
    DivergenceError,
    FingerprintMismatchError,
    NonFiniteLossError,
)
from backend.distill_objects.evalmetrics import APReport, evaluate_map, predictions_to_instances
from backend.distill_objects.matchloss import SetCriterion, TargetSet, prepare_targets
from backend.distill_objects.metrics_log import MetricsLogger, read_metrics
from backend.distill_objects.pseudolabel import filter_batch
from backend.distill_objects.segmodel import MaskClassifier, copy_params, forward, init_model
from backend.distill_objects.synthdata import DatasetManifest, SampleStore
from backend.distill_objects.teacher_updates import ema_update, freeze, params_hash, total_loss

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CONFIG_FILE = "config.json"
REPORT_FILE = "final_report.json"
LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"


@dataclass(frozen=True)
class Schedule:
    """
    Global step layout of a run.

    Steps [0, teacher_iters) pre-train the teacher; the student then trains for total_iters
    steps, the first burn_in_iters of which are burn-in.
    """

    strategy: Strategy
    teacher_iters: int
    burn_in_iters: int
    total_iters: int

    @property
    def student_start(self) -> int:
        return self.teacher_iters

    @property
    def distill_start(self) -> int:
        return self.teacher_iters + self.burn_in_iters

    @property
    def end(self) -> int:
        return self.teacher_iters + self.total_iters

    def stage_at(self, step: int) -> Stage:
        if step < self.teacher_iters:
            return Stage.TEACHER_PRETRAIN
        if step < self.distill_start:
            return Stage.BURN_IN
        return Stage.DISTILL

    def uses_teacher(self, stage: Stage) -> bool:
        """Whether student steps of this stage learn from teacher pseudo-labels."""

        if stage == Stage.DISTILL:
            return True
        if stage == Stage.BURN_IN:
            return self.strategy in (Strategy.GUIDED, Strategy.FIXED_TEACHER)
        return False


def build_schedule(config: TrainConfig, labeled_fraction: float) -> Schedule:
    """
    Resolves the step layout of a strategy.

    Parameters:
        config (TrainConfig): Budget and strategy.
        labeled_fraction (float): Share of labeled training images, for the burn-in rule.

    Returns:
        Schedule
    """

    strategy = config.strategy
    total = config.total_iters
    burn_in = config.resolve_burn_in(labeled_fraction)

    if strategy == Strategy.GUIDED:
        return Schedule(strategy, config.resolve_teacher_iters(burn_in), burn_in, total)
    if strategy == Strategy.STANDARD_BURNIN:
        return Schedule(strategy, 0, burn_in, total)
    if strategy == Strategy.FIXED_TEACHER:
        return Schedule(strategy, config.resolve_teacher_iters(burn_in), total, total)
    if strategy == Strategy.NO_BURNIN:
        return Schedule(strategy, 0, 0, total)
    if strategy == Strategy.SUPERVISED_ONLY:
        return Schedule(strategy, 0, total, total)

    raise ConfigError(f"unknown strategy {strategy!r}")


@dataclass
class TrainState:
    """
    Mutable state of a run. During teacher pre-training the model being trained is the
    teacher and student is None; afterwards the optimizer belongs to the student.
    """

    student: Optional[MaskClassifier] = None
    teacher: Optional[MaskClassifier] = None
    optimizer: Optional[torch.optim.Optimizer] = None
    iteration: int = 0
    stage: Optional[Stage] = None
    best_map: float = -1.0
    best_iteration: int = 0
    skipped_steps: int = 0
    consecutive_failures: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class RunContext:
    config: TrainConfig
    store: SampleStore
    schedule: Schedule
    labeled_fraction: float
    device: torch.device
    val_store: Optional[SampleStore] = None
    run_dir: Optional[Path] = None
    metrics: Optional[MetricsLogger] = None

    def __post_init__(self):
        height, width = self.store.manifest.scene_config.image_size
        stride = self.config.model.output_stride
        self.pred_size = (height // stride, width // stride)
        self.criterion = SetCriterion(self.config.weights, self.config.points)


@dataclass
class PipelineResult:
    state: TrainState
    history: List[Dict[str, Any]]
    report: Dict[str, Any]


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def configure_determinism(config: TrainConfig) -> None:
    if config.deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


def step_generators(seed: int, step: int) -> Tuple[np.random.Generator, torch.Generator]:
    """Independent numpy and torch streams for one (seed, step) pair."""

    sequence = np.random.SeedSequence([seed, step])
    numpy_seed, torch_seed = sequence.generate_state(2, dtype=np.uint64)

    generator = torch.Generator()
    generator.manual_seed(int(torch_seed) & 0x7FFFFFFFFFFFFFFF)

    return np.random.default_rng(int(numpy_seed)), generator


def build_context(config: TrainConfig, manifest: DatasetManifest,
                  val_manifest: Optional[DatasetManifest] = None,
                  run_dir: Optional[Path] = None) -> RunContext:
    """Checks the manifest against the config and wires stores, schedule and device together."""

    if not manifest.labeled_ids:
        raise ConfigError("the training manifest has no labeled samples")
    if len(manifest.class_names) != config.model.num_classes:
        raise ConfigError(
            f"manifest has {len(manifest.class_names)} classes, model expects {config.model.num_classes}"
        )

    height, width = manifest.scene_config.image_size
    if height % 16 or width % 16:
        raise ConfigError(f"image size {height}x{width} is not a multiple of 16")

    fraction = manifest.labeled_fraction
    if fraction is None:
        fraction = len(manifest.labeled_ids) / manifest.total

    metrics = MetricsLogger(Path(run_dir) / METRICS_FILE) if run_dir is not None else None

    return RunContext(
        config=config,
        store=SampleStore(manifest),
        schedule=build_schedule(config, fraction),
        labeled_fraction=fraction,
        device=resolve_device(config.device),
        val_store=SampleStore(val_manifest) if val_manifest is not None else None,
        run_dir=Path(run_dir) if run_dir is not None else None,
        metrics=metrics,
    )


def build_optimizer(model: MaskClassifier, config: TrainConfig) -> torch.optim.Optimizer:
    """AdamW with a separate learning rate for the backbone."""

    groups = [
        {"params": list(model.backbone_parameters()),
         "lr": config.learning_rate * config.backbone_lr_multiplier},
        {"params": model.head_parameters(), "lr": config.learning_rate},
    ]

    return torch.optim.AdamW(groups, lr=config.learning_rate, weight_decay=config.weight_decay)


def _draw(rng: np.random.Generator, population: int, size: int) -> np.ndarray:
    return rng.choice(population, size=size, replace=population < size)


def _labeled_batch(ctx: RunContext, rng: np.random.Generator) -> Tuple[torch.Tensor, List[TargetSet]]:
    images, targets = [], []

    for index in _draw(rng, ctx.store.num_labeled, ctx.config.labeled_per_step):
        sample = ctx.store.labeled(int(index))
        view, instances = labeled_view(sample.image, sample.instances, rng, ctx.config.augment)
        images.append(view)
        targets.append(prepare_targets(instances, ctx.pred_size, ctx.device))

    return torch.stack(images).to(ctx.device), targets


def _unlabeled_batch(ctx: RunContext, rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    teacher_views, student_views = [], []

    for index in _draw(rng, ctx.store.num_unlabeled, ctx.config.unlabeled_per_step):
        pair = make_views(ctx.store.unlabeled(int(index)).image, rng, ctx.config.augment)
        teacher_views.append(pair.teacher_view)
        student_views.append(pair.student_view)

    return torch.stack(teacher_views).to(ctx.device), torch.stack(student_views).to(ctx.device)


def _pseudo_targets(ctx: RunContext, teacher: MaskClassifier, views: torch.Tensor):
    with torch.no_grad():
        teacher_preds = forward(teacher, views)

    pseudo = filter_batch(teacher_preds, ctx.config.filter)
    targets: List[Optional[TargetSet]] = []

    for labels in pseudo:
        if len(labels) > 0 or ctx.config.empty_pseudo_policy == EmptyPseudoPolicy.NO_OBJECT:
            targets.append(labels.to_targets())
        else:
            targets.append(None)

    scores = torch.cat([p.source_scores for p in pseudo]) if pseudo else torch.zeros(0)
    stats = {
        "pseudo_count": int(sum(len(p) for p in pseudo)),
        "pseudo_mean_score": float(scores.mean()) if scores.numel() else 0.0,
        "pseudo_skip_rate": float(sum(len(p) == 0 for p in pseudo)) / max(1, len(pseudo)),
    }

    if stats["pseudo_count"] == 0:
        logger.debug("No pseudo-labels survived the filter in this batch")

    return targets, stats


def train_step(ctx: RunContext, state: TrainState, step: int, stage: Stage) -> Optional[Dict[str, Any]]:
    """
    One optimisation step of whichever model the stage trains.

    Labeled images get the weak view; with a teacher, unlabeled images go through the
    teacher (weak view) and the student (strong view), and the labeled and student views
    share one forward pass. Distillation steps end with the EMA update.

    Returns:
        dict | None: Metrics of the step, or None when the step was skipped for a
        non-finite loss.
    """

    config = ctx.config
    rng, generator = step_generators(config.seed, step)

    model = state.teacher if stage == Stage.TEACHER_PRETRAIN else state.student
    with_teacher = (stage != Stage.TEACHER_PRETRAIN and ctx.schedule.uses_teacher(stage)
                    and config.lambda_u > 0 and ctx.store.num_unlabeled > 0)

    images, sup_targets = _labeled_batch(ctx, rng)
    num_labeled = images.shape[0]
    record: Dict[str, Any] = {"iter": step + 1, "stage": stage.value}
    unsup_targets = None

    if with_teacher:
        teacher_views, student_views = _unlabeled_batch(ctx, rng)
        unsup_targets, stats = _pseudo_targets(ctx, state.teacher, teacher_views)
        record.update(stats)
        images = torch.cat([images, student_views])

    model.train()
    preds = forward(model, images)

    sup = ctx.criterion(preds.slice(0, num_labeled), sup_targets, generator)
    record.update({f"sup_{k}": v for k, v in sup.breakdown.items()})

    unsup_total = None
    if unsup_targets is not None:
        unsup = ctx.criterion(preds.slice(num_labeled, images.shape[0]), unsup_targets, generator)
        record.update({f"unsup_{k}": v for k, v in unsup.breakdown.items()})
        if unsup.num_images > 0:
            unsup_total = unsup.total

    try:
        loss = total_loss(sup.total, unsup_total, config.lambda_u)
    except NonFiniteLossError as exc:
        state.skipped_steps += 1
        state.consecutive_failures += 1
        logger.warning("Skipping step %d: %s", step + 1, exc)

        if state.consecutive_failures >= config.divergence_patience:
            raise DivergenceError(step + 1, state.consecutive_failures) from exc

        state.optimizer.zero_grad(set_to_none=True)
        return None

    state.consecutive_failures = 0
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()

    if stage == Stage.DISTILL:
        ema_update(state.teacher, state.student, config.ema_alpha)

    record["loss_total"] = float(loss.detach())

    return record


def _enter_stage(ctx: RunContext, state: TrainState, stage: Stage) -> None:
    """Builds or hands over models when the run crosses a stage boundary."""

    config = ctx.config

    if stage == Stage.TEACHER_PRETRAIN:
        if state.teacher is None:
            state.teacher = init_model(config.model, config.seed).to(ctx.device)
            state.optimizer = build_optimizer(state.teacher, config)
    else:
        if state.stage == Stage.TEACHER_PRETRAIN and state.teacher is not None:
            freeze(state.teacher)

        if state.teacher is None and ctx.schedule.uses_teacher(Stage.BURN_IN):
            state.teacher = freeze(init_model(config.model, config.seed).to(ctx.device))

        if state.student is None:
            state.student = init_model(config.model, config.seed + 1).to(ctx.device)
            state.optimizer = build_optimizer(state.student, config)
        elif state.optimizer is None:
            state.optimizer = build_optimizer(state.student, config)

        if stage == Stage.DISTILL:
            state.teacher = freeze(copy_params(state.student))

    logger.info("Entering stage %s at iteration %d", stage.value, state.iteration)
    state.stage = stage


def _ensure_student(ctx: RunContext, state: TrainState) -> None:
    if state.student is None:
        _enter_stage(ctx, state, Stage.BURN_IN)


def evaluate_model(model: MaskClassifier, store: SampleStore, config: TrainConfig,
                   device: Optional[torch.device] = None) -> APReport:
    """
    Mask-AP of a model on every labeled image of a store.

    Parameters:
        model (MaskClassifier): Evaluated in eval mode; its previous mode is restored.
        store (SampleStore): Validation store (all ids labeled).
        config (TrainConfig): Evaluation batch size, score floor and image cap.
        device (torch.device | None): Defaults to the model's device.

    Returns:
        APReport
    """

    device = device or next(model.parameters()).device
    eval_cfg = config.evaluation
    count = store.num_labeled if eval_cfg.max_images is None else min(store.num_labeled, eval_cfg.max_images)
    was_training = model.training
    model.eval()

    predictions, ground_truth = {}, {}

    with torch.no_grad():
        for start in range(0, count, eval_cfg.batch_size):
            samples = [store.labeled(i) for i in range(start, min(count, start + eval_cfg.batch_size))]
            images = torch.stack([to_tensor_image(s.image) for s in samples])
            preds = forward(model, images.to(device))

            for index, sample in enumerate(samples):
                predictions[sample.sample_id] = predictions_to_instances(
                    preds[index], eval_cfg.score_floor, image_size=tuple(sample.image.shape[:2])
                )
                ground_truth[sample.sample_id] = sample.instances

    model.train(was_training)

    return evaluate_map(predictions, ground_truth)


def _eval_target(ctx: RunContext, state: TrainState) -> MaskClassifier:
    if ctx.config.evaluation.model == EvalModel.TEACHER and state.teacher is not None \
            and state.stage != Stage.TEACHER_PRETRAIN:
        return state.teacher
    return state.student


def _checkpoint(ctx: RunContext, state: TrainState, name: str) -> None:
    if ctx.run_dir is None:
        return

    rng, _ = step_generators(ctx.config.seed, state.iteration)
    save_checkpoint(
        ctx.run_dir / name,
        student=state.student,
        teacher=state.teacher,
        optimizer=state.optimizer,
        iteration=state.iteration,
        stage=state.stage.value if state.stage else "",
        train_config=ctx.config.model_dump(mode="json"),
        rng={"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()},
        best_map=state.best_map,
        history_len=len(state.history),
        counters={"skipped_steps": state.skipped_steps,
                  "consecutive_failures": state.consecutive_failures,
                  "best_iteration": state.best_iteration},
    )


def run_steps(ctx: RunContext, state: TrainState, start: int, stop: int) -> TrainState:
    """
    Runs global steps [start, stop), handling stage transitions, logging, periodic
    evaluation and checkpointing.
    """

    config = ctx.config
    progress = tqdm(total=max(0, stop - start), desc=config.strategy.value,
                    disable=None if config.progress_bar else True, leave=False)

    for step in range(start, stop):
        stage = ctx.schedule.stage_at(step)

        if stage != state.stage:
            _enter_stage(ctx, state, stage)

        record = train_step(ctx, state, step, stage)
        state.iteration = step + 1
        progress.update(1)

        is_student = stage != Stage.TEACHER_PRETRAIN
        evaluate = (is_student and ctx.val_store is not None
                    and state.iteration % config.evaluation.interval == 0)
        log_now = state.iteration % config.log_interval == 0 or evaluate

        if record is None:
            record = {"iter": state.iteration, "stage": stage.value, "skipped": True}

        if evaluate:
            report = evaluate_model(_eval_target(ctx, state), ctx.val_store, config, ctx.device)
            record["val_mask_AP"] = report.mAP

            if report.mAP > state.best_map:
                state.best_map = report.mAP
                state.best_iteration = state.iteration
                _checkpoint(ctx, state, BEST_CKPT)

        if log_now:
            record["skipped_steps"] = state.skipped_steps
            state.history.append(record)
            if ctx.metrics is not None:
                ctx.metrics.append(record)
            logger.info(
                "[%s] iter %d/%d loss %.4f%s",
                stage.value, state.iteration, ctx.schedule.end, record.get("loss_total", float("nan")),
                f" val mask-AP {100 * record['val_mask_AP']:.1f}" if "val_mask_AP" in record else "",
            )

        if state.iteration % config.ckpt_interval == 0:
            _checkpoint(ctx, state, f"ckpt_{state.iteration}.ckpt")
            _checkpoint(ctx, state, LAST_CKPT)

    progress.close()

    return state


def train_teacher_stage(ctx: RunContext) -> MaskClassifier:
    """
    Trains a fresh model on labeled data for the teacher budget of the schedule.

    Returns:
        MaskClassifier: The teacher, frozen; the random initialisation when the budget is 0.
    """

    state = TrainState()
    _enter_stage(ctx, state, Stage.TEACHER_PRETRAIN)
    run_steps(ctx, state, 0, ctx.schedule.teacher_iters)

    return freeze(state.teacher)


def guided_burnin_stage(ctx: RunContext, teacher: MaskClassifier) -> MaskClassifier:
    """
    Trains a fresh student with pseudo-labels from the frozen teacher for the burn-in
    budget. The teacher's parameters are not modified.

    Returns:
        MaskClassifier: The student; its initialisation when the budget is 0.
    """

    state = TrainState(teacher=freeze(teacher), stage=Stage.TEACHER_PRETRAIN,
                       iteration=ctx.schedule.student_start)
    _enter_stage(ctx, state, Stage.BURN_IN)
    run_steps(ctx, state, ctx.schedule.student_start, ctx.schedule.distill_start)

    return state.student


def distill_stage(ctx: RunContext, student: MaskClassifier) -> TrainState:
    """
    Copies the student into the teacher, then trains the student on labeled data plus
    teacher pseudo-labels while the teacher tracks it by EMA, until the end of the schedule.
    """

    state = TrainState(student=student, stage=Stage.BURN_IN, iteration=ctx.schedule.distill_start)
    _enter_stage(ctx, state, Stage.DISTILL)
    run_steps(ctx, state, ctx.schedule.distill_start, ctx.schedule.end)

    return state


def _restore(ctx: RunContext, path: Path) -> TrainState:
    payload = load_checkpoint(path)

    if payload["fingerprint"] != ctx.config.model.fingerprint():
        raise FingerprintMismatchError(
            f"checkpoint {path} was written for a different architecture ({payload['fingerprint']})"
        )

    stage = Stage(payload["stage"]) if payload["stage"] else None
    state = TrainState(iteration=payload["iteration"], stage=stage, best_map=payload["best_map"])
    counters = payload.get("counters") or {}
    state.skipped_steps = counters.get("skipped_steps", 0)
    state.consecutive_failures = counters.get("consecutive_failures", 0)
    state.best_iteration = counters.get("best_iteration", 0)

    if payload["student"] is not None:
        state.student = restore_model(payload, "student").to(ctx.device)
    if payload["teacher"] is not None:
        state.teacher = restore_model(payload, "teacher").to(ctx.device)

    trained = state.teacher if stage == Stage.TEACHER_PRETRAIN else state.student
    if stage != Stage.TEACHER_PRETRAIN and state.teacher is not None:
        freeze(state.teacher)

    if trained is not None and payload["optimizer"] is not None:
        state.optimizer = build_optimizer(trained, ctx.config)
        state.optimizer.load_state_dict(payload["optimizer"])

    torch.set_rng_state(payload["rng"]["torch"])

    if ctx.metrics is not None:
        ctx.metrics.truncate_after(state.iteration)
        state.history = read_metrics(ctx.metrics.path)

    logger.info("Resumed from %s at iteration %d (%s)", path, state.iteration, payload["stage"])

    return state


def run_pipeline(config: TrainConfig, manifest: DatasetManifest,
                 val_manifest: Optional[DatasetManifest] = None,
                 run_dir: Optional[Path] = None, resume: bool = False) -> PipelineResult:
    """
    Runs one complete training run for config.strategy.

    Parameters:
        config (TrainConfig): Protocol hyper-parameters.
        manifest (DatasetManifest): Training split.
        val_manifest (DatasetManifest | None): Validation data for periodic mask-AP.
        run_dir (Path | None): Output directory; nothing is written when None.
        resume (bool): Continue from run_dir/last.ckpt when it exists.

    Returns:
        PipelineResult: Final TrainState, the metrics history and the final report.
    """

    configure_determinism(config)
    ctx = build_context(config, manifest, val_manifest, run_dir)
    schedule = ctx.schedule

    if ctx.run_dir is not None:
        ctx.run_dir.mkdir(parents=True, exist_ok=True)
        save_train_config(config, ctx.run_dir / CONFIG_FILE)

    last = ctx.run_dir / LAST_CKPT if ctx.run_dir is not None else None

    if resume and last is not None and last.exists():
        state = _restore(ctx, last)
    else:
        state = TrainState()
        if ctx.metrics is not None and ctx.metrics.path.exists():
            ctx.metrics.path.unlink()

    logger.info(
        "Running %s: %d teacher iterations, %d burn-in, %d total (labeled fraction %.3f)",
        schedule.strategy.value, schedule.teacher_iters, schedule.burn_in_iters,
        schedule.total_iters, ctx.labeled_fraction,
    )

    run_steps(ctx, state, state.iteration, schedule.end)
    _ensure_student(ctx, state)

    final_map = None
    if ctx.val_store is not None:
        final_map = evaluate_model(_eval_target(ctx, state), ctx.val_store, config, ctx.device).mAP
        if final_map > state.best_map:
            state.best_map = final_map
            state.best_iteration = state.iteration
            _checkpoint(ctx, state, BEST_CKPT)

    _checkpoint(ctx, state, LAST_CKPT)

    report = {
        "strategy": config.strategy.value,
        "labeled_fraction": ctx.labeled_fraction,
        "seed": config.seed,
        "iterations": state.iteration,
        "teacher_iters": schedule.teacher_iters,
        "burn_in_iters": schedule.burn_in_iters,
        "total_iters": schedule.total_iters,
        "final_map": final_map,
        "best_map": state.best_map if state.best_map >= 0 else None,
        "best_iteration": state.best_iteration,
        "skipped_steps": state.skipped_steps,
        "teacher_hash": params_hash(state.teacher) if state.teacher is not None else None,
    }

    if ctx.run_dir is not None:
        (ctx.run_dir / REPORT_FILE).write_text(json.dumps(report, indent=2))

    return PipelineResult(state=state, history=state.history, report=report)
