"""
Bipartite matching and the set-prediction loss.

Targets (ground truth or pseudo-labels) are matched one-to-one to predicted queries by the
Hungarian algorithm on a cost of
    -p(class) + BCE(mask) + lambda_D * Dice(mask),
with mask terms estimated on sampled points. Matched queries are then trained with binary
cross-entropy and Dice on importance-sampled points, and every query with a weighted
categorical cross-entropy whose target is "no object" for the unmatched ones.

Per-image tensors: mask logits (K, H', W'), class logits (K, C+1), target masks (n, H', W')
with values in {0, 1}, target classes (n,). Random point draws come from a
`torch.Generator` owned by the caller.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .augment import resize_instances
from .config import LossWeights, PointConfig
from .errors import CapacityError
from .segmodel import PredictionSet
from .synthdata import InstanceSet

logger = logging.getLogger(__name__)

# Points drawn per pair when estimating the matching cost
MATCH_POINTS = 1024


@dataclass
class TargetSet:
    """Targets of one image at prediction resolution."""

    masks: Tensor
    classes: Tensor

    def __len__(self) -> int:
        return int(self.classes.shape[0])


@dataclass
class MatchResult:
    """(target index, prediction index) pairs sorted by target, plus the unmatched queries."""

    pairs: List[Tuple[int, int]]
    unmatched_predictions: List[int]
    total_cost: float = 0.0

    @property
    def target_indices(self) -> List[int]:
        return [k for k, _ in self.pairs]

    @property
    def prediction_indices(self) -> List[int]:
        return [q for _, q in self.pairs]


@dataclass
class PointSample:
    coordinates: Tensor
    values_pred: Tensor
    values_target: Tensor


@dataclass
class LossOutput:
    total: Tensor
    breakdown: Dict[str, float]
    num_images: int
    matches: List[Optional[MatchResult]] = field(default_factory=list)


def prepare_targets(instances: InstanceSet, size: Tuple[int, int], device=None) -> TargetSet:
    """Resizes an InstanceSet to prediction resolution and converts it to tensors."""

    resized = resize_instances(instances, size)

    if len(resized) == 0:
        return TargetSet(masks=torch.zeros((0, *size), device=device),
                         classes=torch.zeros(0, dtype=torch.long, device=device))

    masks = torch.from_numpy(np.stack(resized.masks).astype(np.float32)).to(device)
    classes = torch.tensor(resized.classes, dtype=torch.long, device=device)

    return TargetSet(masks=masks, classes=classes)


def point_sample(maps: Tensor, coordinates: Tensor, mode: str = "bilinear") -> Tensor:
    """
    Samples (M, H, W) maps at (M, P, 2) normalised (u, v) coordinates in [0, 1]^2;
    returns (M, P).
    """

    grid = (2.0 * coordinates - 1.0).to(maps.dtype)[:, None]
    sampled = F.grid_sample(maps[:, None], grid, mode=mode, align_corners=False)

    return sampled[:, 0, 0]


def sample_points(resolution: Tuple[int, int], pred_logits: Tensor, n_points: int,
                  oversample_ratio: float, importance_fraction: float,
                  generator: Optional[torch.Generator] = None) -> Tensor:
    """
    Importance sampling of mask points.

    Draws n_points × oversample_ratio uniform candidates, keeps the
    importance_fraction × n_points candidates whose logits are closest to 0 and fills the
    rest with fresh uniform points.

    Parameters:
        resolution (tuple): (H', W') of the logit maps.
        pred_logits (Tensor): (M, H', W') or (H', W') logits driving the uncertainty.
        n_points (int): Points per map.
        oversample_ratio (float): Candidate multiplier, at least 1.
        importance_fraction (float): Share of points chosen by uncertainty.
        generator (torch.Generator | None): CPU random stream.

    Returns:
        Tensor: (M, n_points, 2) coordinates, or (n_points, 2) for a single map.
    """

    single = pred_logits.dim() == 2
    logits = pred_logits[None] if single else pred_logits
    height, width = resolution

    if tuple(logits.shape[-2:]) != (height, width):
        raise ValueError(f"logits of shape {tuple(logits.shape)} do not match resolution {resolution}")

    count = logits.shape[0]
    num_uncertain = int(importance_fraction * n_points)
    num_random = n_points - num_uncertain

    parts = []

    if num_uncertain > 0:
        num_candidates = max(num_uncertain, int(math.ceil(n_points * oversample_ratio)))
        candidates = torch.rand(count, num_candidates, 2, generator=generator).to(logits.device)
        uncertainty = -point_sample(logits.detach(), candidates).abs()
        chosen = uncertainty.topk(num_uncertain, dim=1).indices
        parts.append(torch.gather(candidates, 1, chosen[..., None].expand(-1, -1, 2)))

    if num_random > 0:
        parts.append(torch.rand(count, num_random, 2, generator=generator).to(logits.device))

    coordinates = torch.cat(parts, dim=1)

    return coordinates[0] if single else coordinates


def dice_loss(pred_sigmoid: Tensor, target: Tensor, eps: float = 1.0) -> Tensor:
    """1 - 2·Σ(p·t) / (Σp + Σt + eps) over the last dimension."""

    numerator = 2.0 * (pred_sigmoid * target).sum(-1)
    denominator = pred_sigmoid.sum(-1) + target.sum(-1) + eps

    return 1.0 - numerator / denominator


def _pair_costs(pred_logits: Tensor, target_values: Tensor, lambda_D: float) -> Tensor:
    """(K, P) logits vs (n, P) targets -> (K, n) mean BCE + lambda_D · Dice."""

    points = pred_logits.shape[-1]
    positive = F.softplus(-pred_logits)
    negative = F.softplus(pred_logits)
    bce = (positive @ target_values.T + negative @ (1.0 - target_values).T) / points

    probs = pred_logits.sigmoid()
    numerator = 2.0 * probs @ target_values.T
    denominator = probs.sum(-1)[:, None] + target_values.sum(-1)[None, :] + 1.0
    dice = 1.0 - numerator / denominator

    return bce + lambda_D * dice


@torch.no_grad()
def build_cost_matrix(preds: PredictionSet, targets: TargetSet, weights: LossWeights,
                      points: Optional[int] = MATCH_POINTS,
                      generator: Optional[torch.Generator] = None) -> Tensor:
    """
    K×n matching cost of one image.

    cost(q, k) = -softmax(class_logits_q)[c_k] + BCE(q, k) + lambda_D · Dice(q, k), mask
    terms averaged over `points` uniform points shared by every pair (all pixels when
    points is None).

    Raises:
        CapacityError: n > K.
    """

    num_queries = preds.num_queries
    num_targets = len(targets)

    if num_targets > num_queries:
        raise CapacityError(f"{num_targets} targets but only {num_queries} queries")

    class_cost = -preds.class_probs()[:, targets.classes]

    if points is None:
        pred_values = preds.mask_logits.flatten(1)
        target_values = targets.masks.flatten(1).to(pred_values.dtype)
    else:
        coords = torch.rand(1, points, 2, generator=generator).to(preds.mask_logits.device)
        pred_values = point_sample(preds.mask_logits, coords.expand(num_queries, -1, -1), mode="nearest")
        target_values = point_sample(targets.masks.to(preds.mask_logits.dtype),
                                     coords.expand(num_targets, -1, -1), mode="nearest")

    return class_cost + _pair_costs(pred_values, target_values, weights.lambda_D)


def hungarian_match(cost: Tensor) -> MatchResult:
    """
    Minimum-cost injective assignment of the n targets (columns) to the K predictions (rows).

    Raises:
        CapacityError: n > K.
        ValueError: Non-finite cost entries.
    """

    matrix = np.asarray(cost.detach().cpu().double().numpy() if isinstance(cost, Tensor) else cost,
                        dtype=np.float64)
    num_queries = matrix.shape[0]
    num_targets = matrix.shape[1] if matrix.ndim == 2 else 0

    if num_targets > num_queries:
        raise CapacityError(f"{num_targets} targets but only {num_queries} queries")

    if num_targets == 0:
        return MatchResult(pairs=[], unmatched_predictions=list(range(num_queries)))

    if not np.isfinite(matrix).all():
        raise ValueError("cost matrix contains non-finite entries")

    target_idx, pred_idx = linear_sum_assignment(matrix.T)
    pairs = [(int(k), int(q)) for k, q in zip(target_idx, pred_idx)]
    matched = set(int(q) for q in pred_idx)

    return MatchResult(
        pairs=pairs,
        unmatched_predictions=[q for q in range(num_queries) if q not in matched],
        total_cost=float(matrix[pred_idx, target_idx].sum()),
    )


def sample_pair_points(pred_masks: Tensor, target_masks: Tensor, point_cfg: PointConfig,
                       generator: Optional[torch.Generator] = None) -> PointSample:
    """Point values of matched (pred, target) mask pairs; all pixels in full_pixel mode."""

    if point_cfg.full_pixel:
        height, width = pred_masks.shape[-2:]
        ys, xs = torch.meshgrid(torch.arange(height), torch.arange(width), indexing="ij")
        coords = torch.stack(((xs + 0.5) / width, (ys + 0.5) / height), dim=-1).reshape(-1, 2)
        return PointSample(coordinates=coords, values_pred=pred_masks.flatten(1),
                           values_target=target_masks.flatten(1).to(pred_masks.dtype))

    with torch.no_grad():
        coords = sample_points(tuple(pred_masks.shape[-2:]), pred_masks, point_cfg.n_points,
                               point_cfg.oversample_ratio, point_cfg.importance_fraction, generator)
        values_target = point_sample(target_masks.to(pred_masks.dtype), coords, mode="nearest")

    return PointSample(coordinates=coords, values_pred=point_sample(pred_masks, coords),
                       values_target=values_target)


def supervised_loss(preds: PredictionSet, targets: TargetSet, weights: LossWeights, match: MatchResult,
                    point_cfg: PointConfig,
                    generator: Optional[torch.Generator] = None) -> Tuple[Tensor, Dict[str, Tensor]]:
    """
    Loss of one image and one decoder output.

    mean_k BCE + lambda_D · mean_k Dice over matched pairs, plus lambda_C times the
    weighted-mean cross-entropy over all K queries (weight eos_coef on "no object").
    The class term is divided by the summed class weights of the K queries, not by the
    number of targets n, so one image with many "no object" queries keeps a bounded class loss.

    Returns:
        tuple: Scalar loss and the weighted terms (loss_mask_bce, loss_mask_dice, loss_class).
    """

    num_classes = preds.num_classes
    logits = preds.mask_logits

    if match.pairs:
        pred_idx = torch.tensor(match.prediction_indices, device=logits.device)
        tgt_idx = torch.tensor(match.target_indices, device=logits.device)
        sample = sample_pair_points(logits[pred_idx], targets.masks[tgt_idx], point_cfg, generator)
        bce = F.binary_cross_entropy_with_logits(sample.values_pred, sample.values_target,
                                                 reduction="none").mean(-1).mean()
        dice = dice_loss(sample.values_pred.sigmoid(), sample.values_target).mean()
    else:
        bce = logits.sum() * 0.0
        dice = logits.sum() * 0.0

    target_classes = torch.full((preds.num_queries,), num_classes, dtype=torch.long, device=logits.device)
    if match.pairs:
        target_classes[pred_idx] = targets.classes[tgt_idx].to(logits.device)

    class_weight = torch.ones(num_classes + 1, dtype=preds.class_logits.dtype, device=logits.device)
    class_weight[num_classes] = weights.eos_coef
    ce = F.cross_entropy(preds.class_logits, target_classes, weight=class_weight)

    terms = {
        "loss_mask_bce": bce,
        "loss_mask_dice": weights.lambda_D * dice,
        "loss_class": weights.lambda_C * ce,
    }

    return terms["loss_mask_bce"] + terms["loss_mask_dice"] + terms["loss_class"], terms


class SetCriterion:
    """
    Matching plus loss over a batch, for the final output and every aux output.

    Images whose target is None do not contribute; the loss is the mean over the
    contributing images of the per-image sum over decoder outputs.
    """

    def __init__(self, weights: LossWeights, points: PointConfig, match_points: Optional[int] = MATCH_POINTS):
        self.weights = weights
        self.points = points
        self.match_points = None if points.full_pixel else match_points

    def image_loss(self, preds: PredictionSet, targets: TargetSet,
                   generator: Optional[torch.Generator] = None) -> Tuple[Tensor, Dict[str, Tensor], MatchResult]:
        total, terms, final_match = None, {}, None

        for layer in preds.layers():
            if len(targets) == 0:
                match = hungarian_match(torch.zeros(layer.num_queries, 0))
            else:
                cost = build_cost_matrix(layer, targets, self.weights, self.match_points, generator)
                match = hungarian_match(cost)

            loss, layer_terms = supervised_loss(layer, targets, self.weights, match, self.points, generator)

            total = loss if total is None else total + loss
            for key, value in layer_terms.items():
                terms[key] = value if key not in terms else terms[key] + value
            if final_match is None:
                final_match = match

        return total, terms, final_match

    def __call__(self, preds: PredictionSet, targets: Sequence[Optional[TargetSet]],
                 generator: Optional[torch.Generator] = None) -> LossOutput:
        if len(targets) != len(preds):
            raise ValueError(f"{len(targets)} target sets for {len(preds)} predictions")

        losses, sums, matches = [], {}, []

        for index, target in enumerate(targets):
            if target is None:
                matches.append(None)
                continue

            loss, terms, match = self.image_loss(preds[index], target, generator)
            losses.append(loss)
            matches.append(match)
            for key, value in terms.items():
                sums[key] = sums.get(key, 0.0) + float(value.detach())

        if not losses:
            zero = preds.mask_logits.sum() * 0.0
            breakdown = {"loss_mask_bce": 0.0, "loss_mask_dice": 0.0, "loss_class": 0.0, "loss_total": 0.0}
            return LossOutput(total=zero, breakdown=breakdown, num_images=0, matches=matches)

        total = torch.stack(losses).mean()
        breakdown = {key: value / len(losses) for key, value in sums.items()}
        breakdown["loss_total"] = float(total.detach())

        return LossOutput(total=total, breakdown=breakdown, num_images=len(losses), matches=matches)
