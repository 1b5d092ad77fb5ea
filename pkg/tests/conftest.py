import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import pytest
import torch

from backend.distill_objects.config import (
    EvalConfig,
    ModelConfig,
    PointConfig,
    SceneConfig,
    TrainConfig,
)
from backend.distill_objects.synthdata import build_dataset, split_dataset, save_manifest


# -----------------------------------------------------------------------------
# Small configurations shared by the module tests
# -----------------------------------------------------------------------------
@pytest.fixture
def scene_config():
    return SceneConfig(image_size=(64, 64), instance_range=(1, 3), size_range=(12, 28))


@pytest.fixture
def tiny_model_config():
    return ModelConfig(num_queries=6, num_classes=3, backbone_widths=(8, 8, 16, 16), hidden_dim=16,
                       num_heads=2, ffn_dim=32, decoder_layers=2, aux_layers=1, output_stride=4)


@pytest.fixture
def tiny_train_config(tiny_model_config):
    """A few-step CPU config: batch of 2 (1 labeled + 1 unlabeled), 64 sampled points."""
    return TrainConfig(
        batch_size=2,
        total_iters=4,
        burn_in_iters=2,
        teacher_iters=2,
        ema_alpha=0.5,
        log_interval=1,
        ckpt_interval=2,
        device="cpu",
        progress_bar=False,
        model=tiny_model_config,
        points=PointConfig(n_points=64),
        evaluation=EvalConfig(interval=2, batch_size=4),
    )


@pytest.fixture
def tiny_dataset(tmp_path, scene_config):
    """12 training scenes (6 labeled / 6 unlabeled) and 4 validation scenes."""
    full = build_dataset(12, 0, scene_config, tmp_path / "data" / "train")
    train = split_dataset(full, 0.5, split_seed=0)
    save_manifest(train)
    val = build_dataset(4, 1_000_000, scene_config, tmp_path / "data" / "val")
    return train, val


@pytest.fixture
def images64():
    generator = torch.Generator().manual_seed(0)
    return torch.rand(2, 3, 64, 64, generator=generator)
