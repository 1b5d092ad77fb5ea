"""
Pseudo-labels from teacher predictions.

A teacher query becomes a pseudo-instance when its highest real-class probability reaches
alpha_C and its soft mask mass (sum of sigmoids at prediction resolution) reaches alpha_S.
Kept queries are hardened: the mask is sigmoid >= 0.5 (logit >= 0) and the class is the
argmax over real classes. An empty result is valid.
"""

import logging
from dataclasses import dataclass
from typing import List

import torch
from torch import Tensor

from .config import FilterConfig
from .matchloss import TargetSet
from .segmodel import PredictionSet

logger = logging.getLogger(__name__)


@dataclass
class PseudoLabelSet:
    """Hard masks (m, H', W') bool, classes (m,) and the max class probability of each source query."""

    masks: Tensor
    classes: Tensor
    source_scores: Tensor

    def __post_init__(self):
        if not (self.masks.shape[0] == self.classes.shape[0] == self.source_scores.shape[0]):
            raise ValueError("pseudo-label masks, classes and scores differ in length")

    def __len__(self) -> int:
        return int(self.classes.shape[0])

    def to_targets(self) -> TargetSet:
        return TargetSet(masks=self.masks.float(), classes=self.classes)


@torch.no_grad()
def encode_one_hot(kept_preds: PredictionSet) -> PseudoLabelSet:
    """Hardens per-image predictions: logit >= 0 masks, argmax over the real classes."""

    real_probs = kept_preds.class_probs()[:, :-1]
    scores, classes = real_probs.max(dim=-1)

    return PseudoLabelSet(masks=kept_preds.mask_logits >= 0, classes=classes, source_scores=scores)


@torch.no_grad()
def filter_predictions(teacher_preds: PredictionSet, cfg: FilterConfig) -> PseudoLabelSet:
    """
    Keeps the queries that pass both thresholds (inclusive) and one-hot encodes them.

    Parameters:
        teacher_preds (PredictionSet): Per-image teacher output.
        cfg (FilterConfig): alpha_C and alpha_S.

    Returns:
        PseudoLabelSet: Possibly empty.
    """

    preds = teacher_preds.detach()
    max_real_prob = preds.class_probs()[:, :-1].max(dim=-1).values
    mask_mass = preds.mask_logits.sigmoid().sum(dim=(-2, -1))

    keep = (max_real_prob >= cfg.alpha_C) & (mask_mass >= cfg.alpha_S)

    return encode_one_hot(PredictionSet(mask_logits=preds.mask_logits[keep],
                                        class_logits=preds.class_logits[keep]))


def filter_batch(teacher_preds: PredictionSet, cfg: FilterConfig) -> List[PseudoLabelSet]:
    return [filter_predictions(teacher_preds[i], cfg) for i in range(len(teacher_preds))]
