"""
COCO-style mask-AP.

For every class present in the ground truth and every IoU threshold 0.50:0.05:0.95,
detections of that class are visited in descending score order and each one matches the
unmatched same-class ground truth instance of its image with the highest IoU at or above
the threshold. Precision is made monotone and read off at 101 recall points (0, 0.01, ...,
1). mAP is the mean over classes and thresholds.

Score ties are broken by image id and then by a digest of the mask bytes, so the report
depends only on the set of detections, not on the order they were listed in.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from .segmodel import PredictionSet, upsample_masks
from .synthdata import InstanceSet

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0


@dataclass
class ScoredInstance:
    mask: np.ndarray
    class_id: int
    score: float


class APReport(BaseModel):
    mAP: float
    per_class_AP: Dict[int, float]
    per_threshold_AP: Dict[str, float]
    instance_counts: Dict[str, int]

    def summary(self) -> str:
        """mAP ×100, one decimal."""

        return f"mask-AP {100.0 * self.mAP:.1f}"


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a ∩ b| / |a ∪ b| of two equally shaped masks; undefined (ValueError) when both are empty."""

    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)

    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")

    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")

    return float(np.logical_and(a, b).sum() / union)


def _iou_matrix(dets: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))

    d = np.stack(dets).reshape(len(dets), -1).astype(np.float64)
    g = np.stack(gts).reshape(len(gts), -1).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter

    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


@torch.no_grad()
def predictions_to_instances(preds: PredictionSet, score_floor: float,
                             image_size: Optional[Tuple[int, int]] = None) -> List[ScoredInstance]:
    """
    Decodes per-image predictions into scored instances.

    Each query gives one instance: class = argmax over real classes, mask = sigmoid >= 0.5,
    score = class probability × mean sigmoid inside the mask. Empty masks and scores below
    score_floor are dropped; overlapping instances are all kept.

    Parameters:
        preds (PredictionSet): Per-image predictions.
        score_floor (float): Minimum score.
        image_size (tuple | None): Upsample the masks to (H, W) first.

    Returns:
        list[ScoredInstance]
    """

    logits = preds.mask_logits
    if image_size is not None:
        logits = upsample_masks(logits, image_size)

    probs = preds.class_probs()[:, :-1]
    class_scores, classes = probs.max(dim=-1)
    sigmoid = logits.float().sigmoid()
    masks = sigmoid >= 0.5
    areas = masks.flatten(1).sum(-1)
    mask_scores = (sigmoid * masks).flatten(1).sum(-1) / areas.clamp(min=1)
    scores = class_scores.float() * mask_scores

    instances = []
    for q in range(masks.shape[0]):
        if areas[q] == 0 or scores[q] < score_floor:
            continue
        instances.append(ScoredInstance(mask=masks[q].cpu().numpy(), class_id=int(classes[q]),
                                        score=float(scores[q])))

    return instances


def _mask_digest(mask: np.ndarray) -> str:
    return hashlib.sha1(np.packbits(np.asarray(mask, dtype=bool)).tobytes()).hexdigest()


def _average_precision(tp: np.ndarray, num_gt: int) -> float:
    if len(tp) == 0:
        return 0.0

    tp_sum = np.cumsum(tp)
    fp_sum = np.cumsum(~tp)
    recall = tp_sum / num_gt
    precision = (tp_sum / (tp_sum + fp_sum)).tolist()

    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]

    indices = np.searchsorted(recall, RECALL_POINTS, side="left")
    interpolated = [precision[i] if i < len(precision) else 0.0 for i in indices]

    return float(np.mean(interpolated))


def evaluate_map(predictions: Mapping[str, Sequence[ScoredInstance]],
                 ground_truth: Mapping[str, InstanceSet],
                 thresholds: Sequence[float] = IOU_THRESHOLDS) -> APReport:
    """
    Mask-AP of per-image predictions against per-image ground truth.

    Parameters:
        predictions (dict): image id -> scored instances.
        ground_truth (dict): image id -> InstanceSet; same ids as predictions.
        thresholds (list): IoU thresholds to average over.

    Returns:
        APReport: mAP, per-class AP (classes present in the ground truth), per-threshold AP
        and instance counts.
    """

    if set(predictions) != set(ground_truth):
        missing = sorted(set(ground_truth) ^ set(predictions))
        raise ValueError(f"prediction and ground-truth image ids differ: {missing[:5]}")

    image_ids = sorted(ground_truth)
    gt_classes = sorted({int(c) for gid in image_ids for c in ground_truth[gid].classes})
    num_predictions = sum(len(predictions[i]) for i in image_ids)
    counts = {"images": len(image_ids), "ground_truth": sum(len(ground_truth[i]) for i in image_ids),
              "predictions": num_predictions}

    if not gt_classes:
        return APReport(mAP=0.0, per_class_AP={}, per_threshold_AP={f"{t:.2f}": 0.0 for t in thresholds},
                        instance_counts=counts)

    table = np.zeros((len(thresholds), len(gt_classes)))

    for col, class_id in enumerate(gt_classes):
        gts = {i: [m for m, c in zip(ground_truth[i].masks, ground_truth[i].classes) if c == class_id]
               for i in image_ids}
        num_gt = sum(len(v) for v in gts.values())

        dets = [(inst, image_id) for image_id in image_ids for inst in predictions[image_id]
                if inst.class_id == class_id]
        dets.sort(key=lambda d: (-d[0].score, d[1], _mask_digest(d[0].mask)))

        ious = {}
        for image_id in image_ids:
            own = [inst.mask for inst, i in dets if i == image_id]
            ious[image_id] = _iou_matrix(own, gts[image_id])

        for row, threshold in enumerate(thresholds):
            matched = {i: np.zeros(len(gts[i]), dtype=bool) for i in image_ids}
            seen = {i: 0 for i in image_ids}
            tp = np.zeros(len(dets), dtype=bool)

            for d, (_, image_id) in enumerate(dets):
                local = seen[image_id]
                seen[image_id] += 1
                candidates = ious[image_id][local] if len(gts[image_id]) else np.zeros(0)

                best, best_iou = -1, threshold
                for g, iou in enumerate(candidates):
                    if not matched[image_id][g] and iou >= best_iou and (best < 0 or iou > best_iou):
                        best, best_iou = g, iou

                if best >= 0:
                    matched[image_id][best] = True
                    tp[d] = True

            table[row, col] = _average_precision(tp, num_gt)

    return APReport(
        mAP=float(table.mean()),
        per_class_AP={c: float(table[:, k].mean()) for k, c in enumerate(gt_classes)},
        per_threshold_AP={f"{t:.2f}": float(table[r].mean()) for r, t in enumerate(thresholds)},
        instance_counts=counts,
    )
