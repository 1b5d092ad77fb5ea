"""
Teacher parameter updates and the combined loss.

- `ema_update` moves the teacher towards the student: theta_t = alpha·theta_t + (1-alpha)·theta_s,
- `total_loss` combines the supervised and unsupervised losses: L = L_s + lambda_u·L_u,
- `params_hash` digests a parameter set so stages can assert a frozen teacher.
"""

import hashlib
import logging
from typing import Optional

import torch
from torch import Tensor

from .errors import NonFiniteLossError
from .segmodel import MaskClassifier, check_compatible

logger = logging.getLogger(__name__)


@torch.no_grad()
def ema_update(teacher: MaskClassifier, student: MaskClassifier, alpha: float) -> MaskClassifier:
    """
    Updates every teacher tensor in place to alpha·teacher + (1 - alpha)·student.

    Parameters:
        teacher (MaskClassifier): Updated in place and returned.
        student (MaskClassifier): Source of the new values; not modified.
        alpha (float): Decay in [0, 1].

    Returns:
        MaskClassifier: The teacher.
    """

    check_compatible(teacher, student)

    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {alpha}")

    student_state = student.state_dict()

    for name, value in teacher.state_dict().items():
        source = student_state[name].detach()

        if not value.is_floating_point() or alpha == 0.0:
            value.copy_(source)
        elif alpha != 1.0:
            value.mul_(alpha).add_(source, alpha=1.0 - alpha)

    return teacher


def total_loss(sup_loss: Tensor, unsup_loss: Optional[Tensor], lambda_u: float) -> Tensor:
    """
    L_s + lambda_u·L_u; a missing L_u (no pseudo-labels in the batch) gives L_s.

    Raises:
        NonFiniteLossError: Either term is NaN or infinite.
    """

    if not torch.isfinite(sup_loss).all():
        raise NonFiniteLossError(f"supervised loss is not finite: {float(sup_loss)}")

    if unsup_loss is None:
        return sup_loss

    if not torch.isfinite(unsup_loss).all():
        raise NonFiniteLossError(f"unsupervised loss is not finite: {float(unsup_loss)}")

    return sup_loss + lambda_u * unsup_loss


def params_hash(model: MaskClassifier) -> str:
    digest = hashlib.sha256()

    for name, value in model.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())

    return digest.hexdigest()


def freeze(model: MaskClassifier) -> MaskClassifier:
    """Switches off gradients and puts the model in eval mode; used for every teacher."""

    for param in model.parameters():
        param.requires_grad_(False)

    return model.eval()
