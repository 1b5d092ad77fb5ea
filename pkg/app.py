"""
Guided Distillation Command-Line Application

This module is the entry point of the semi-supervised instance segmentation pipeline.
It provides commands for generating synthetic shape datasets, training models with the
guided teacher-student protocol (or one of its baselines), evaluating checkpoints,
running the ablation sweeps and drawing figures of finished runs.

Key features include:
  - `gen-data` writes a labeled/unlabeled training split and an all-labeled validation set.
  - `train` runs one training run per seed and records the results in `results.db`.
  - `evaluate` computes the mask-AP report of a checkpoint on a dataset split.
  - `ablate` sweeps the burn-in strategy, augmentation or unlabeled loss weight over seeds.
  - `plot` draws AP-vs-labels and training-curve figures.

Exit codes: 0 on success, 1 for usage errors, 2 when a run aborts.

Usage:
    python app.py gen-data --total 1000 --labeled-fraction 0.05 --seed 0
    python app.py train --strategy guided --seed 0 --seed 1
"""

import csv
import hashlib
import json
import logging
import multiprocessing
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np
from dotenv import load_dotenv

from backend.distill_objects.checkpoint import load_checkpoint, restore_model
from backend.distill_objects.config import (
    ExperimentSpec,
    SceneConfig,
    TrainConfig,
    load_train_config,
)
from backend.distill_objects.enums import AblationAxis, AugmentMode, EvalModel, PlotKind, Strategy
from backend.distill_objects.errors import ConfigError, DivergenceError, GDistillError
from backend.distill_objects.synthdata import (
    MANIFEST_NAME,
    SampleStore,
    build_dataset,
    load_manifest,
    save_manifest,
    split_dataset,
)
from backend.plotting import load_reports, plot_ablation, plot_ap_vs_labels, plot_training_curves
from backend.trainer import REPORT_FILE, evaluate_model, resolve_device, run_pipeline
from models import Experiment, RunResult, get_or_create_experiment, open_results_store, record_run

load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

TRAIN_DIR = "train"
VAL_DIR = "val"

DEFAULT_SEEDS = (0,)
DEFAULT_OUTPUT_DIR = Path("runs")

# Offset between the training and validation generator seeds
VAL_SEED_OFFSET = 1_000_000

LAMBDA_U_GRID = (0.0, 0.1, 0.5, 2.0, 5.0)

AUGMENTATION_GRID = (
    AugmentMode.OURS,
    AugmentMode.POLITE_TEACHER_CUTOUT,
    AugmentMode.SAME_AS_TEACHER,
)

# Reference arm of the augmentation sweep: no unlabeled branch at all
SUPERVISED_ARM = ("none", {"strategy": Strategy.SUPERVISED_ONLY.value})


class ExitCodeGroup(click.Group):
    """
    Click group with a fixed exit-code contract: usage errors exit with 1, errors raised
    while a command runs exit with 2. Messages go to stderr on a single line.
    """

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False

        try:
            result = super().main(*args, **kwargs)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(1)
        except click.ClickException as exc:
            # click's own UsageError exits with 2, which is reserved for aborted runs
            exc.show()
            sys.exit(1)
        except (GDistillError, RuntimeError, OSError, ValueError) as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(2)

        sys.exit(result if isinstance(result, int) else 0)


def configure_logging(verbose: int) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


# Options shared by the group and the subcommands that use them. A flag given after the
# subcommand wins over the same flag given before it.
config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
                             default=None, help="TrainConfig JSON document (defaults: parameters.json values).")
seed_option = click.option("--seed", "seeds", type=int, multiple=True,
                           help="Seed; repeat for several runs (default 0).")
output_option = click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path),
                             default=None, help="Root of run directories (default runs).")
data_root_option = click.option("--data-root", type=click.Path(file_okay=False, path_type=Path),
                                envvar="GDISTILL_DATA_ROOT", default=Path("data"), show_default=True,
                                help="Dataset root (env GDISTILL_DATA_ROOT).")
resume_option = click.option("--resume", is_flag=True, help="Continue runs from their last checkpoint.")
overwrite_option = click.option("--overwrite", is_flag=True, help="Replace existing outputs.")
deterministic_option = click.option("--deterministic", is_flag=True,
                                    help="Use deterministic torch algorithms.")
verbose_option = click.option("-v", "--verbose", count=True, help="Debug logging.")


@dataclass(frozen=True)
class GlobalOptions:
    """Flags given to the group itself, before the subcommand name."""

    config_path: Optional[Path] = None
    seeds: Tuple[int, ...] = ()
    output_dir: Optional[Path] = None
    resume: bool = False
    overwrite: bool = False
    deterministic: bool = False

    def config(self, config_path: Optional[Path]) -> Optional[Path]:
        return config_path if config_path is not None else self.config_path

    def seed_list(self, seeds: Tuple[int, ...]) -> List[int]:
        return list(seeds or self.seeds or DEFAULT_SEEDS)

    def output(self, output_dir: Optional[Path]) -> Path:
        return output_dir or self.output_dir or DEFAULT_OUTPUT_DIR


@click.group(cls=ExitCodeGroup)
@config_option
@seed_option
@output_option
@resume_option
@overwrite_option
@deterministic_option
@click.pass_context
def cli(ctx, config_path, seeds, output_dir, resume, overwrite, deterministic):
    """Semi-supervised instance segmentation with guided distillation."""

    ctx.obj = GlobalOptions(config_path=config_path, seeds=tuple(seeds), output_dir=output_dir,
                            resume=resume, overwrite=overwrite, deterministic=deterministic)


def _manifest_digest(root: Path) -> str:
    return hashlib.sha256((root / MANIFEST_NAME).read_bytes()).hexdigest()[:16]


def _prepare_dir(path: Path, overwrite: bool, resume: bool = False) -> None:
    """Refuses to reuse a non-empty directory unless --overwrite (wipe) or --resume (keep)."""

    if path.exists() and any(path.iterdir()):
        if overwrite:
            shutil.rmtree(path)
        elif not resume:
            raise click.UsageError(f"{path} already exists; pass --overwrite to replace it")


def _load_splits(data_root: Path):
    train = load_manifest(data_root / TRAIN_DIR)
    val_root = data_root / VAL_DIR
    val = load_manifest(val_root) if (val_root / MANIFEST_NAME).exists() else None

    if val is None:
        logger.warning("No validation split under %s; runs will not be evaluated", data_root)

    return train, val


@cli.command("gen-data")
@click.option("--total", type=click.IntRange(min=2), default=1000, show_default=True,
              help="Training images (labeled + unlabeled).")
@click.option("--labeled-fraction", type=click.FloatRange(0.0, 1.0, min_open=True), default=0.1,
              show_default=True, help="Share of training images that keep their labels.")
@click.option("--val-total", type=click.IntRange(min=2), default=200, show_default=True,
              help="Validation images.")
@click.option("--image-size", type=click.IntRange(min=32), default=128, show_default=True,
              help="Square image side, a multiple of 16.")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=None,
              help="Generator and split seed (default: the first global --seed, else 0).")
@data_root_option
@overwrite_option
@verbose_option
@click.pass_obj
def cmd_gen_data(options, total, labeled_fraction, val_total, image_size, workers, seed, data_root,
                 overwrite, verbose):
    """Generate a synthetic shapes dataset with a labeled/unlabeled split."""

    configure_logging(verbose)

    if seed is None:
        seed = options.seed_list(())[0]
    if seed < 0:
        raise click.BadParameter("must be non-negative", param_hint="--seed")
    overwrite = overwrite or options.overwrite

    if image_size % 16:
        raise click.BadParameter("must be a multiple of 16", param_hint="--image-size")
    if int(labeled_fraction * total + 1e-9) == 0:
        raise click.BadParameter(f"leaves no labeled image out of {total}", param_hint="--labeled-fraction")

    _prepare_dir(data_root, overwrite)

    scene = SceneConfig(image_size=(image_size, image_size))

    full = build_dataset(total, seed, scene, data_root / TRAIN_DIR, workers=workers)
    train = split_dataset(full, labeled_fraction, split_seed=seed)
    save_manifest(train)

    val = build_dataset(val_total, seed + VAL_SEED_OFFSET, scene, data_root / VAL_DIR, workers=workers)

    click.echo(
        f"train: {len(train.labeled_ids)} labeled / {len(train.unlabeled_ids)} unlabeled "
        f"(manifest {_manifest_digest(data_root / TRAIN_DIR)}), val: {val.total} labeled, "
        f"classes: {', '.join(train.class_names)}"
    )


def _train_overrides(**values) -> Dict[str, Any]:
    overrides = {k: v for k, v in values.items() if v is not None and k != "augment_mode"}

    if values.get("augment_mode") is not None:
        overrides["augment"] = {"mode": values["augment_mode"]}

    return overrides


def run_arm(job: Dict[str, Any]) -> Tuple[Dict[str, Any], str]:
    """
    Runs one (config, seed) training run; top-level so sweep workers can pickle it.

    Returns:
        tuple: (final report, "finished" | "diverged")
    """

    config = TrainConfig.model_validate(job["config"])
    train, val = _load_splits(Path(job["data_root"]))

    try:
        result = run_pipeline(config, train, val, Path(job["run_dir"]), resume=job["resume"])
    except DivergenceError as exc:
        logger.error("Run %s diverged: %s", job["run_dir"], exc)
        report = {"strategy": config.strategy.value, "seed": config.seed,
                  "labeled_fraction": train.labeled_fraction or len(train.labeled_ids) / train.total,
                  "iterations": exc.iteration, "final_map": None, "best_map": None}
        return report, "diverged"

    return result.report, "finished"


@cli.command("train")
@config_option
@seed_option
@output_option
@data_root_option
@click.option("--name", default=None, help="Experiment name (default: the strategy).")
@click.option("--strategy", type=click.Choice([s.value for s in Strategy]), default=None)
@click.option("--total-iters", type=click.IntRange(min=0), default=None)
@click.option("--burn-in-iters", type=click.IntRange(min=0), default=None)
@click.option("--lambda-u", type=click.FloatRange(min=0.0), default=None)
@click.option("--augment-mode", type=click.Choice([m.value for m in AugmentMode]), default=None)
@click.option("--device", default=None, help="auto, cpu or cuda.")
@resume_option
@overwrite_option
@deterministic_option
@verbose_option
@click.pass_obj
def cmd_train(options, config_path, seeds, output_dir, data_root, name, strategy, total_iters, burn_in_iters,
              lambda_u, augment_mode, device, resume, overwrite, deterministic, verbose):
    """Train one run per seed and record the results."""

    configure_logging(verbose)

    config_path = options.config(config_path)
    output_dir = options.output(output_dir)
    resume = resume or options.resume
    overwrite = overwrite or options.overwrite
    deterministic = deterministic or options.deterministic

    overrides = _train_overrides(strategy=strategy, total_iters=total_iters, burn_in_iters=burn_in_iters,
                                 lambda_u=lambda_u, augment_mode=augment_mode, device=device,
                                 deterministic=deterministic or None)
    base = load_train_config(config_path, overrides)
    spec = ExperimentSpec(name=name or base.strategy.value, config_path=config_path,
                          dataset_path=data_root, seeds=options.seed_list(seeds), output_dir=output_dir)

    for seed in spec.seeds:
        _prepare_dir(spec.run_dir(seed), overwrite, resume)

    session_factory = open_results_store(output_dir)

    for seed in spec.seeds:
        config = base.model_copy(update={"seed": seed})
        run_dir = spec.run_dir(seed)
        report, status = run_arm({"config": config.model_dump(mode="json"), "data_root": str(data_root),
                                  "run_dir": str(run_dir), "resume": resume})

        with session_factory() as session:
            experiment = get_or_create_experiment(session, spec.name, str(data_root),
                                                  json.dumps(config.model_dump(mode="json")))
            record_run(session, experiment, report, run_dir, status)
            session.commit()

        if status == "diverged":
            raise DivergenceError(report["iterations"], base.divergence_patience)

        final = report.get("final_map")
        click.echo(f"{spec.name} seed {seed}: "
                   f"{'mask-AP %.1f' % (100 * final) if final is not None else 'no validation split'} "
                   f"({report['iterations']} iterations, {run_dir})")


@cli.command("evaluate")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@data_root_option
@click.option("--split", type=click.Choice([VAL_DIR, TRAIN_DIR]), default=VAL_DIR, show_default=True)
@click.option("--model", "model_key", type=click.Choice([m.value for m in EvalModel]),
              default=EvalModel.STUDENT.value, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Also write the report to this JSON file.")
@click.option("--device", default="auto", show_default=True)
@verbose_option
def cmd_evaluate(checkpoint_path, data_root, split, model_key, out_path, device, verbose):
    """Compute the mask-AP report of a checkpoint on the labeled images of a split."""

    configure_logging(verbose)

    payload = load_checkpoint(checkpoint_path)
    model = restore_model(payload, model_key)
    config = TrainConfig.model_validate(payload["train_config"]) if payload.get("train_config") else TrainConfig()

    store = SampleStore(load_manifest(data_root / split))
    target = resolve_device(device)
    report = evaluate_model(model.to(target), store, config, target)

    document = report.model_dump_json(indent=2)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(document)

    click.echo(document)


def ablation_arms(axis: AblationAxis) -> List[Tuple[str, Dict[str, Any]]]:
    """(arm label, config overrides) of every arm of a sweep, in sweep order."""

    if axis == AblationAxis.LAMBDA_U:
        return [(f"{value:g}", {"lambda_u": value}) for value in LAMBDA_U_GRID]
    if axis == AblationAxis.BURNIN_STRATEGY:
        return [(strategy.value, {"strategy": strategy.value}) for strategy in Strategy]
    if axis == AblationAxis.AUGMENTATION:
        arms = [(mode.value, {"augment": {"mode": mode.value}}) for mode in AUGMENTATION_GRID]
        return arms + [SUPERVISED_ARM]

    raise ConfigError(f"unknown ablation axis {axis!r}")


def summarise_arms(session, axis: AblationAxis, names: List[Tuple[str, str]]) -> List[Dict[str, Any]]:
    """mean ± std (population, over seeds) of the final mAP of each arm's finished runs."""

    rows = []

    for arm, name in names:
        experiment = session.query(Experiment).filter_by(name=name).one()
        runs = session.query(RunResult).filter_by(experiment_id=experiment.id).order_by(RunResult.seed).all()
        values = [r.final_map for r in runs if r.status == "finished" and r.final_map is not None]

        rows.append({
            "axis": axis.value,
            "arm": arm,
            "mean": float(np.mean(values)) if values else None,
            "std": float(np.std(values)) if values else None,
            "n": len(values),
            "diverged": sum(r.status == "diverged" for r in runs),
        })

    return rows


@cli.command("ablate")
@click.option("--axis", type=click.Choice([a.value for a in AblationAxis]), required=True)
@config_option
@seed_option
@output_option
@data_root_option
@click.option("--total-iters", type=click.IntRange(min=0), default=None)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
              help="Runs executed in parallel processes.")
@click.option("--device", default=None)
@resume_option
@overwrite_option
@deterministic_option
@verbose_option
@click.pass_obj
def cmd_ablate(options, axis, config_path, seeds, output_dir, data_root, total_iters, jobs, device,
               resume, overwrite, deterministic, verbose):
    """Sweep one ablation axis over seeds and tabulate mean ± std mask-AP."""

    configure_logging(verbose)

    config_path = options.config(config_path)
    seeds = options.seed_list(seeds)
    output_dir = options.output(output_dir)
    resume = resume or options.resume
    overwrite = overwrite or options.overwrite
    deterministic = deterministic or options.deterministic

    axis = AblationAxis(axis)
    base_overrides = _train_overrides(total_iters=total_iters, device=device, deterministic=deterministic or None)
    arms = ablation_arms(axis)
    work, names = [], []

    for arm, overrides in arms:
        config = load_train_config(config_path, {**base_overrides, **overrides})
        spec = ExperimentSpec(name=f"ablate_{axis.value}_{arm}", config_path=config_path,
                              dataset_path=data_root, seeds=seeds, output_dir=output_dir)
        names.append((arm, spec.name))

        for seed in spec.seeds:
            run_dir = spec.run_dir(seed)
            _prepare_dir(run_dir, overwrite, resume)
            work.append((arm, spec.name, run_dir, {
                "config": config.model_copy(update={"seed": seed}).model_dump(mode="json"),
                "data_root": str(data_root), "run_dir": str(run_dir), "resume": resume,
            }))

    logger.info("Ablation %s: %d arms x %d seeds, %d parallel jobs", axis.value, len(arms), len(seeds), jobs)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=multiprocessing.get_context("spawn")) as pool:
            outcomes = list(pool.map(run_arm, [job for *_, job in work]))
    else:
        outcomes = [run_arm(job) for *_, job in work]

    session_factory = open_results_store(output_dir)

    with session_factory() as session:
        for (arm, name, run_dir, job), (report, status) in zip(work, outcomes):
            experiment = get_or_create_experiment(session, name, str(data_root), json.dumps(job["config"]),
                                                  axis=axis.value, arm=arm)
            record_run(session, experiment, report, run_dir, status)
        session.commit()

        rows = summarise_arms(session, axis, names)

    stem = output_dir / f"results_{axis.value}"
    with open(f"{stem}.csv", "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["axis", "arm", "mean", "std", "n", "diverged"])
        writer.writeheader()
        writer.writerows(rows)
    Path(f"{stem}.json").write_text(json.dumps(rows, indent=2))
    plot_ablation(axis, rows, Path(f"{stem}.png"))

    for row in rows:
        value = "diverged" if row["mean"] is None else f"{100 * row['mean']:.1f} ± {100 * row['std']:.1f}"
        click.echo(f"{row['arm']:>24}  {value}  (n={row['n']})")


def _metrics_path(path: Path) -> Path:
    return path if path.is_file() else path / "metrics.jsonl"


@cli.command("plot")
@click.option("--kind", type=click.Choice([k.value for k in PlotKind]), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.argument("runs", nargs=-1, type=click.Path(exists=True, path_type=Path))
@verbose_option
def cmd_plot(kind, out_path, runs, verbose):
    """Draw a figure from run directories or metrics logs."""

    configure_logging(verbose)

    if not runs:
        raise click.UsageError("at least one run directory or metrics log is required")

    if PlotKind(kind) == PlotKind.AP_VS_LABELS:
        reports = load_reports(run.parent if run.is_file() else run for run in runs)
        if not reports:
            raise click.UsageError(f"none of the given runs has a {REPORT_FILE}")
        plot_ap_vs_labels(reports, out_path)
    else:
        plot_training_curves([_metrics_path(run) for run in runs], out_path)

    click.echo(f"Saved {out_path}")


if __name__ == "__main__":
    cli()
