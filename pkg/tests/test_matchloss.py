import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import itertools

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy import stats

from backend.distill_objects.config import LossWeights, PointConfig
from backend.distill_objects.errors import CapacityError
from backend.distill_objects.matchloss import (
    SetCriterion,
    TargetSet,
    build_cost_matrix,
    dice_loss,
    hungarian_match,
    prepare_targets,
    sample_points,
    supervised_loss,
)
from backend.distill_objects.segmodel import PredictionSet
from backend.distill_objects.synthdata import InstanceSet

FULL_PIXEL = PointConfig(full_pixel=True)


def random_image(num_queries=4, num_classes=3, size=6, num_targets=2, seed=0, dtype=torch.float32):
    generator = torch.Generator().manual_seed(seed)
    preds = PredictionSet(
        mask_logits=torch.randn(num_queries, size, size, generator=generator, dtype=dtype),
        class_logits=torch.randn(num_queries, num_classes + 1, generator=generator, dtype=dtype),
    )
    targets = TargetSet(
        masks=(torch.rand(num_targets, size, size, generator=generator) > 0.5).to(dtype),
        classes=torch.randint(0, num_classes, (num_targets,), generator=generator),
    )
    return preds, targets


# -----------------------------------------------------------------------------
# Hungarian matching
# -----------------------------------------------------------------------------
def test_hungarian_small_example():
    match = hungarian_match(torch.tensor([[1.0, 9.0], [9.0, 1.0], [5.0, 5.0]]))
    assert match.pairs == [(0, 0), (1, 1)]
    assert match.unmatched_predictions == [2]
    assert match.total_cost == pytest.approx(2.0)


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)

    for _ in range(100):
        num_queries = int(rng.integers(1, 8))
        num_targets = int(rng.integers(0, num_queries + 1))
        cost = rng.normal(size=(num_queries, num_targets))

        match = hungarian_match(torch.from_numpy(cost))

        best = min(
            (sum(cost[q, k] for k, q in enumerate(perm)) for perm in itertools.permutations(range(num_queries), num_targets)),
            default=0.0,
        )
        assert match.total_cost == pytest.approx(best, abs=1e-9)
        assert sorted(match.target_indices) == list(range(num_targets))
        assert len(set(match.prediction_indices)) == num_targets
        assert sorted(match.prediction_indices + match.unmatched_predictions) == list(range(num_queries))


def test_hungarian_without_targets():
    match = hungarian_match(torch.zeros(5, 0))
    assert match.pairs == []
    assert match.unmatched_predictions == [0, 1, 2, 3, 4]


def test_hungarian_errors():
    with pytest.raises(CapacityError):
        hungarian_match(torch.zeros(2, 3))
    with pytest.raises(ValueError):
        hungarian_match(torch.tensor([[float("nan")], [0.0]]))


# -----------------------------------------------------------------------------
# Costs
# -----------------------------------------------------------------------------
def test_dice_of_a_mask_with_itself():
    target = torch.tensor([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
    assert float(dice_loss(target, target)) == pytest.approx(1.0 - 8.0 / 9.0)


def test_full_pixel_cost_matrix_matches_pairwise_loop():
    preds, targets = random_image(num_queries=5, num_targets=3, seed=1)
    weights = LossWeights()

    cost = build_cost_matrix(preds, targets, weights, points=None)
    assert cost.shape == (5, 3)

    probs = preds.class_logits.softmax(-1)
    for q in range(5):
        for k in range(3):
            logits = preds.mask_logits[q].flatten()
            target = targets.masks[k].flatten()
            expected = (-probs[q, targets.classes[k]]
                        + F.binary_cross_entropy_with_logits(logits, target)
                        + weights.lambda_D * dice_loss(logits.sigmoid(), target))
            assert float(cost[q, k]) == pytest.approx(float(expected), abs=1e-5)


def test_cost_matrix_capacity():
    preds, targets = random_image(num_queries=2, num_targets=3)
    with pytest.raises(CapacityError):
        build_cost_matrix(preds, targets, LossWeights(), points=16)


def test_sampled_cost_matrix_is_seeded():
    preds, targets = random_image(seed=2)
    a = build_cost_matrix(preds, targets, LossWeights(), 64, torch.Generator().manual_seed(5))
    b = build_cost_matrix(preds, targets, LossWeights(), 64, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_sample_points_prefers_uncertain_regions():
    logits = torch.zeros(8, 8)
    logits[:, 4:] = 100.0

    coords = sample_points((8, 8), logits, n_points=8, oversample_ratio=10.0, importance_fraction=1.0,
                           generator=torch.Generator().manual_seed(0))
    assert coords.shape == (8, 2)
    assert (coords[:, 0] < 0.5).all()


def test_sample_points_shape_check():
    with pytest.raises(ValueError):
        sample_points((8, 8), torch.zeros(2, 4, 4), 8, 3.0, 0.75)


def test_sample_points_without_importance_is_plain_uniform():
    n_points = 256
    flat = sample_points((8, 8), torch.zeros(8, 8), n_points, 3.0, 0.0, torch.Generator().manual_seed(11))
    peaked = sample_points((8, 8), torch.randn(8, 8) * 50, n_points, 3.0, 0.0, torch.Generator().manual_seed(11))

    expected = torch.rand(1, n_points, 2, generator=torch.Generator().manual_seed(11))[0]
    assert torch.equal(flat, expected)
    assert torch.equal(peaked, expected)


def test_sample_points_cover_the_grid_evenly():
    passed = 0

    for seed in range(5):
        coords = sample_points((16, 16), torch.zeros(16, 16), 4096, 3.0, 0.0, torch.Generator().manual_seed(seed))
        cells = (coords * 4).floor().clamp(max=3).long()
        counts = torch.bincount(cells[:, 1] * 4 + cells[:, 0], minlength=16).numpy()
        passed += stats.chisquare(counts).pvalue > 0.01

    assert passed >= 4


# -----------------------------------------------------------------------------
# Supervised loss
# -----------------------------------------------------------------------------
def test_supervised_loss_closed_form():
    preds, targets = random_image(seed=3, dtype=torch.float64)
    weights = LossWeights(lambda_D=2.0, lambda_C=0.5, eos_coef=0.1)
    match = hungarian_match(build_cost_matrix(preds, targets, weights, points=None))

    loss, terms = supervised_loss(preds, targets, weights, match, FULL_PIXEL)

    bce, dice = [], []
    for k, q in match.pairs:
        logits = preds.mask_logits[q].flatten()
        target = targets.masks[k].flatten()
        bce.append(F.binary_cross_entropy_with_logits(logits, target))
        dice.append(dice_loss(logits.sigmoid(), target))

    target_classes = torch.full((4,), 3, dtype=torch.long)
    for k, q in match.pairs:
        target_classes[q] = targets.classes[k]
    per_query = F.cross_entropy(preds.class_logits, target_classes, reduction="none")
    query_weight = torch.where(target_classes == 3, 0.1, 1.0).double()
    ce = (per_query * query_weight).sum() / query_weight.sum()

    expected = torch.stack(bce).mean() + 2.0 * torch.stack(dice).mean() + 0.5 * ce
    assert float(loss) == pytest.approx(float(expected), abs=1e-6)
    assert float(terms["loss_class"]) == pytest.approx(float(0.5 * ce), abs=1e-6)


def test_supervised_loss_gradients():
    preds, targets = random_image(num_queries=3, size=4, seed=4, dtype=torch.float64)
    weights = LossWeights()
    match = hungarian_match(build_cost_matrix(preds, targets, weights, points=None))

    def loss_fn(mask_logits, class_logits):
        pair = PredictionSet(mask_logits=mask_logits, class_logits=class_logits)
        return supervised_loss(pair, targets, weights, match, FULL_PIXEL)[0]

    inputs = (preds.mask_logits.clone().requires_grad_(True), preds.class_logits.clone().requires_grad_(True))
    assert torch.autograd.gradcheck(loss_fn, inputs)


def test_supervised_loss_without_targets_is_class_only():
    preds, _ = random_image(seed=5)
    empty = TargetSet(masks=torch.zeros(0, 6, 6), classes=torch.zeros(0, dtype=torch.long))
    match = hungarian_match(torch.zeros(4, 0))

    loss, terms = supervised_loss(preds, empty, LossWeights(), match, FULL_PIXEL)

    expected = F.cross_entropy(preds.class_logits, torch.full((4,), 3, dtype=torch.long))
    assert float(loss) == pytest.approx(float(expected), abs=1e-6)
    assert float(terms["loss_mask_bce"]) == 0.0


def test_class_term_is_normalised_by_the_query_weights():
    preds, targets = random_image(num_queries=2, num_targets=1, seed=12, dtype=torch.float64)
    weights = LossWeights(lambda_D=0.0, lambda_C=1.0, eos_coef=0.1)
    match = hungarian_match(build_cost_matrix(preds, targets, weights, points=None))
    (_, matched), = match.pairs
    unmatched, = match.unmatched_predictions

    _, terms = supervised_loss(preds, targets, weights, match, FULL_PIXEL)

    matched_ce = F.cross_entropy(preds.class_logits[matched][None], targets.classes[:1])
    unmatched_ce = F.cross_entropy(preds.class_logits[unmatched][None], torch.tensor([3]))
    expected = (matched_ce + 0.1 * unmatched_ce) / 1.1
    assert float(terms["loss_class"]) == pytest.approx(float(expected), abs=1e-9)
    assert float(terms["loss_class"]) != pytest.approx(float(matched_ce + 0.1 * unmatched_ce), abs=1e-6)


def quadrant_image(level=2.0, size=64):
    """Four queries, each confident on one quadrant, and one target per quadrant."""

    half = size // 2
    masks = torch.zeros(4, size, size, dtype=torch.float64)
    for index, (y, x) in enumerate([(0, 0), (0, half), (half, 0), (half, half)]):
        masks[index, y:y + half, x:x + half] = 1.0

    preds = PredictionSet(mask_logits=level * (2.0 * masks - 1.0),
                          class_logits=torch.zeros(4, 4, dtype=torch.float64))
    targets = TargetSet(masks=masks.clone(), classes=torch.tensor([0, 1, 2, 0]))
    return preds, targets


def test_sampled_mask_loss_agrees_with_full_pixel_loss():
    preds, targets = quadrant_image()
    weights = LossWeights(lambda_D=1.0, lambda_C=0.0)
    match = hungarian_match(build_cost_matrix(preds, targets, weights, points=None))
    assert match.pairs == [(0, 0), (1, 1), (2, 2), (3, 3)]

    full, _ = supervised_loss(preds, targets, weights, match, FULL_PIXEL)
    sampled, _ = supervised_loss(preds, targets, weights, match,
                                 PointConfig(n_points=4096, importance_fraction=0.0),
                                 torch.Generator().manual_seed(0))

    assert float(sampled) == pytest.approx(float(full), abs=0.05)


def test_loss_ignores_query_order():
    preds, targets = random_image(num_queries=5, num_targets=2, seed=13, dtype=torch.float64)
    order = torch.tensor([3, 0, 4, 1, 2])
    shuffled = PredictionSet(mask_logits=preds.mask_logits[order], class_logits=preds.class_logits[order])
    criterion = SetCriterion(LossWeights(), FULL_PIXEL)

    original = criterion(batched(preds), [targets])
    permuted = criterion(batched(shuffled), [targets])

    assert float(permuted.total) == pytest.approx(float(original.total), abs=1e-9)


def test_loss_ignores_target_order():
    preds, targets = random_image(num_queries=5, num_targets=3, seed=14, dtype=torch.float64)
    order = torch.tensor([2, 0, 1])
    shuffled = TargetSet(masks=targets.masks[order], classes=targets.classes[order])
    criterion = SetCriterion(LossWeights(), FULL_PIXEL)

    original = criterion(batched(preds), [targets])
    permuted = criterion(batched(preds), [shuffled])

    assert float(permuted.total) == pytest.approx(float(original.total), abs=1e-9)


# -----------------------------------------------------------------------------
# SetCriterion
# -----------------------------------------------------------------------------
def batched(*images):
    return PredictionSet(mask_logits=torch.stack([p.mask_logits for p in images]),
                         class_logits=torch.stack([p.class_logits for p in images]))


def test_criterion_skips_missing_targets():
    first, targets = random_image(seed=6)
    second, _ = random_image(seed=7)
    criterion = SetCriterion(LossWeights(), FULL_PIXEL)

    both = criterion(batched(first, second), [targets, None])
    alone = criterion(batched(first), [targets])

    assert both.num_images == 1
    assert both.matches[1] is None
    assert float(both.total) == pytest.approx(float(alone.total), abs=1e-6)


def test_criterion_with_no_targets_at_all():
    first, _ = random_image(seed=8)
    out = SetCriterion(LossWeights(), FULL_PIXEL)(batched(first), [None])
    assert out.num_images == 0
    assert float(out.total) == 0.0
    assert out.breakdown["loss_total"] == 0.0


def test_criterion_counts_aux_outputs():
    preds, targets = random_image(seed=9)
    with_aux = PredictionSet(mask_logits=preds.mask_logits[None], class_logits=preds.class_logits[None],
                             aux_outputs=[(preds.mask_logits[None], preds.class_logits[None])])
    criterion = SetCriterion(LossWeights(), FULL_PIXEL)

    single = criterion(batched(preds), [targets])
    doubled = criterion(with_aux, [targets])
    assert float(doubled.total) == pytest.approx(2.0 * float(single.total), abs=1e-5)


def test_criterion_rejects_length_mismatch():
    preds, targets = random_image()
    with pytest.raises(ValueError):
        SetCriterion(LossWeights(), FULL_PIXEL)(batched(preds), [targets, targets])


def test_prepare_targets_resizes_to_prediction_resolution():
    mask = np.zeros((32, 32), dtype=bool)
    mask[0:8, 8:16] = True
    targets = prepare_targets(InstanceSet(masks=[mask], classes=[2]), (8, 8))

    assert targets.masks.shape == (1, 8, 8)
    assert targets.masks.dtype == torch.float32
    assert targets.classes.tolist() == [2]
    assert float(targets.masks.sum()) == 4.0
    assert float(targets.masks[0, 0:2, 2:4].sum()) == 4.0


def test_prepare_targets_empty():
    targets = prepare_targets(InstanceSet(masks=[], classes=[]), (8, 8))
    assert len(targets) == 0
    assert targets.masks.shape == (0, 8, 8)
