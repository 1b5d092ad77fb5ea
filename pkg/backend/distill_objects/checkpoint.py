"""
Checkpoint archive for training runs.

A checkpoint is a `torch.save` dictionary tagged with FORMAT_TAG. It holds the student and
teacher state dicts, the optimizer state, the architecture fingerprint, the model and train
configs, the global iteration and stage, the RNG states, the best validation mAP so far
and the skip counters of the run.
Files are written to a temporary name and renamed so an interrupted write never leaves a
truncated checkpoint behind.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from .config import ModelConfig
from .errors import CheckpointError, FingerprintMismatchError
from .segmodel import MaskClassifier

logger = logging.getLogger(__name__)

FORMAT_TAG = "gdistill-ckpt-v1"


def save_checkpoint(path: Union[str, Path], *, student: Optional[MaskClassifier],
                    teacher: Optional[MaskClassifier], optimizer: Optional[torch.optim.Optimizer],
                    iteration: int, stage: str, train_config: Dict[str, Any],
                    rng: Dict[str, Any], best_map: float, history_len: int,
                    counters: Optional[Dict[str, int]] = None) -> Path:
    """
    Writes a checkpoint.

    Parameters:
        path: Destination file.
        student, teacher: Models; either may be None (no student during teacher
            pre-training, no teacher in supervised-only runs).
        optimizer: Optimizer of the model being trained, or None.
        iteration (int): Global step the checkpoint was taken after.
        stage (str): Stage value at that step.
        train_config (dict): JSON dump of the TrainConfig.
        rng (dict): RNG states to restore.
        best_map (float): Best validation mAP seen so far.
        history_len (int): Number of metrics records written so far.
        counters (dict | None): Run bookkeeping (skipped steps, consecutive failures,
            best iteration) that a resumed run continues from.

    Returns:
        Path: The written file.
    """

    path = Path(path)
    reference = student if student is not None else teacher

    if reference is None:
        raise CheckpointError("a checkpoint needs a student or a teacher")

    payload = {
        "format": FORMAT_TAG,
        "fingerprint": reference.fingerprint,
        "model_config": reference.config.model_dump(mode="json"),
        "train_config": train_config,
        "student": student.state_dict() if student is not None else None,
        "teacher": teacher.state_dict() if teacher is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": int(iteration),
        "stage": stage,
        "rng": rng,
        "best_map": float(best_map),
        "history_len": int(history_len),
        "counters": {k: int(v) for k, v in (counters or {}).items()},
    }

    tmp_path = path.with_name(path.name + ".tmp")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp_path)
        os.replace(tmp_path, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc

    logger.info("Saved checkpoint %s (iteration %d)", path, iteration)

    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)

    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")

    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if not isinstance(payload, dict) or payload.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} checkpoint")

    return payload


def restore_model(payload: Dict[str, Any], key: str = "student") -> MaskClassifier:
    """Rebuilds the model stored under `key` ("student" or "teacher") of a loaded checkpoint."""

    state = payload.get(key)
    if state is None:
        raise CheckpointError(f"checkpoint has no {key} parameters")

    config = ModelConfig.model_validate(payload["model_config"])

    if config.fingerprint() != payload["fingerprint"]:
        raise FingerprintMismatchError(
            f"checkpoint fingerprint {payload['fingerprint']} does not match its config {config.fingerprint()}"
        )

    model = MaskClassifier(config)
    model.load_state_dict(state)

    return model
