"""
Figures for finished runs.

- `plot_ap_vs_labels`: validation mask-AP against the labeled fraction, one curve per strategy,
  log-scaled x axis,
- `plot_training_curves`: supervised/unsupervised loss and pseudo-label count traces from a
  metrics log,
- `plot_ablation`: mean ± std bars (categorical axes) or a line (lambda_u) for a sweep.

matplotlib runs on the non-interactive Agg backend; every function writes a PNG and returns its path.
"""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from backend.distill_objects.enums import AblationAxis  # noqa: E402
from backend.distill_objects.metrics_log import read_metrics  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_reports(run_dirs: Iterable[PathLike]) -> List[Dict]:
    """Reads `final_report.json` of every run directory; directories without one are skipped."""

    reports = []

    for run_dir in run_dirs:
        path = Path(run_dir) / "final_report.json"
        if not path.is_file():
            logger.warning("No final report in %s, skipping", run_dir)
            continue
        reports.append(json.loads(path.read_text()))

    return reports


def _run_map(report: Dict) -> float:
    value = report.get("final_map")
    if value is None:
        value = report.get("best_map")
    return float(value) if value is not None else float("nan")


def ap_table(reports: Sequence[Dict]) -> Dict[str, Dict[float, List[float]]]:
    """strategy -> labeled fraction -> mAP of each seed."""

    table: Dict[str, Dict[float, List[float]]] = defaultdict(lambda: defaultdict(list))

    for report in reports:
        fraction = round(float(report["labeled_fraction"]), 6)
        table[report["strategy"]][fraction].append(_run_map(report))

    return table


def plot_ap_vs_labels(reports: Sequence[Dict], out_path: PathLike) -> Path:
    """
    One curve per strategy of mean mask-AP (×100) against the labeled fraction, with the
    seed standard deviation as error bars.

    Parameters:
        reports (list): Final reports of the runs to plot.
        out_path (Path): Destination PNG.

    Returns:
        Path: out_path.
    """

    if not reports:
        raise ValueError("no runs to plot")

    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(6, 4.5))

    for strategy, by_fraction in sorted(ap_table(reports).items()):
        fractions = sorted(by_fraction)
        means = [100.0 * np.nanmean(by_fraction[f]) for f in fractions]
        stds = [100.0 * np.nanstd(by_fraction[f]) for f in fractions]
        ax.errorbar(fractions, means, yerr=stds, marker="o", capsize=3, label=strategy)

    ax.set_xscale("log")
    ax.set_xlabel("Labeled fraction")
    ax.set_ylabel("Mask AP")
    ax.set_title("Mask AP vs. labeled data")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()

    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)

    logger.info("Saved plot %s", out_path)

    return out_path


def _trace(records: Sequence[Dict], key: str):
    points = [(r["iter"], r[key]) for r in records if r.get(key) is not None]
    return [p[0] for p in points], [p[1] for p in points]


def plot_training_curves(metrics_paths: Sequence[PathLike], out_path: PathLike) -> Path:
    """
    Loss and pseudo-label traces of one or more metrics logs: supervised and unsupervised
    total loss on the left, pseudo-label count per batch on the right.
    """

    if not metrics_paths:
        raise ValueError("no metrics logs to plot")

    out_path = Path(out_path)
    fig, (loss_ax, pseudo_ax) = plt.subplots(1, 2, figsize=(12, 4.5))

    for metrics_path in metrics_paths:
        metrics_path = Path(metrics_path)
        records = read_metrics(metrics_path)
        label = metrics_path.parent.name or metrics_path.stem

        if not records:
            logger.warning("Metrics log %s is empty", metrics_path)
            continue

        loss_ax.plot(*_trace(records, "sup_loss_total"), label=f"{label} sup")

        unsup = _trace(records, "unsup_loss_total")
        if unsup[0]:
            loss_ax.plot(*unsup, linestyle="--", label=f"{label} unsup")

        pseudo = _trace(records, "pseudo_count")
        if pseudo[0]:
            pseudo_ax.plot(*pseudo, label=label)

    loss_ax.set_xlabel("Iteration")
    loss_ax.set_ylabel("Loss")
    loss_ax.set_title("Training loss")
    loss_ax.legend()

    pseudo_ax.set_xlabel("Iteration")
    pseudo_ax.set_ylabel("Pseudo-labels per batch")
    pseudo_ax.set_title("Pseudo-labels")
    if pseudo_ax.get_legend_handles_labels()[0]:
        pseudo_ax.legend()

    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)

    logger.info("Saved plot %s", out_path)

    return out_path


def plot_ablation(axis: AblationAxis, rows: Sequence[Dict], out_path: PathLike) -> Path:
    """
    Sweep results as a bar chart, or as a line over the loss weight for the lambda_u axis.

    Parameters:
        axis (AblationAxis): Swept axis.
        rows (list): {"arm", "mean", "std", "n"} per arm, mAP in [0, 1], in sweep order.
        out_path (Path): Destination PNG.
    """

    out_path = Path(out_path)
    labels = [str(row["arm"]) for row in rows]
    means = np.array([100.0 * row["mean"] if row["mean"] is not None else np.nan for row in rows])
    stds = np.array([100.0 * row["std"] if row["std"] is not None else 0.0 for row in rows])

    fig, ax = plt.subplots(figsize=(7, 4.5))

    if axis == AblationAxis.LAMBDA_U:
        ax.errorbar([float(label) for label in labels], means, yerr=stds, marker="o", capsize=3)
        ax.set_xlabel("Unlabeled loss weight")
    else:
        positions = np.arange(len(labels))
        ax.bar(positions, means, yerr=stds, capsize=3)
        ax.set_xticks(positions)
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_xlabel(axis.value.replace("_", " ").capitalize())

    ax.set_ylabel("Mask AP")
    ax.set_title(f"Ablation: {axis.value}")
    ax.grid(True, axis="y", alpha=0.3)

    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)

    logger.info("Saved plot %s", out_path)

    return out_path
