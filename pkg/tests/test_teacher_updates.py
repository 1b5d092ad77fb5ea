import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import pytest
import torch

from backend.distill_objects.errors import FingerprintMismatchError, NonFiniteLossError
from backend.distill_objects.segmodel import copy_params, init_model
from backend.distill_objects.teacher_updates import ema_update, freeze, params_hash, total_loss


@pytest.fixture
def pair(tiny_model_config):
    return init_model(tiny_model_config, 0), init_model(tiny_model_config, 1)


def state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


# -----------------------------------------------------------------------------
# EMA
# -----------------------------------------------------------------------------
def test_ema_alpha_zero_copies_student(pair):
    teacher, student = pair
    ema_update(teacher, student, 0.0)
    assert params_hash(teacher) == params_hash(student)


def test_ema_alpha_one_keeps_teacher(pair):
    teacher, student = pair
    before = params_hash(teacher)
    ema_update(teacher, student, 1.0)
    assert params_hash(teacher) == before


def test_ema_half_is_the_average(pair):
    teacher, student = pair
    t0, s0 = state(teacher), state(student)

    ema_update(teacher, student, 0.5)

    for name, value in teacher.state_dict().items():
        assert torch.allclose(value, 0.5 * t0[name] + 0.5 * s0[name], atol=1e-6)
    # student untouched
    assert all(torch.equal(v, s0[k]) for k, v in student.state_dict().items())


def test_ema_repeated_updates_follow_closed_form(pair):
    """n updates against a fixed student leave alpha^n of the starting teacher."""
    teacher, student = pair
    t0, s0 = state(teacher), state(student)
    alpha, steps = 0.9, 10

    for _ in range(steps):
        ema_update(teacher, student, alpha)

    weight = alpha ** steps
    for name, value in teacher.state_dict().items():
        assert torch.allclose(value, weight * t0[name] + (1 - weight) * s0[name], atol=1e-5)


def test_ema_small_step_stays_between_endpoints(pair):
    teacher, student = pair
    t0, s0 = state(teacher), state(student)

    ema_update(teacher, student, 0.9996)

    for name, value in teacher.state_dict().items():
        low = torch.minimum(t0[name], s0[name]) - 1e-6
        high = torch.maximum(t0[name], s0[name]) + 1e-6
        assert ((value >= low) & (value <= high)).all()
        assert torch.allclose(value, t0[name], atol=1e-3)


def test_ema_default_decay_on_constant_tensors(pair):
    teacher, student = (model.double() for model in pair)
    with torch.no_grad():
        for p in teacher.parameters():
            p.fill_(1.0)
        for p in student.parameters():
            p.fill_(0.0)

    ema_update(teacher, student, 0.9996)

    for value in teacher.state_dict().values():
        assert (value == 0.9996).all()


def test_ema_rejects_bad_inputs(pair, tiny_model_config):
    teacher, student = pair
    other = init_model(tiny_model_config.model_copy(update={"num_queries": 7}), 0)

    with pytest.raises(FingerprintMismatchError):
        ema_update(teacher, other, 0.5)
    with pytest.raises(ValueError):
        ema_update(teacher, student, 1.5)
    with pytest.raises(ValueError):
        ema_update(teacher, student, -0.1)


# -----------------------------------------------------------------------------
# Total loss
# -----------------------------------------------------------------------------
def test_total_loss_combines_terms():
    assert float(total_loss(torch.tensor(1.0), torch.tensor(2.0), 0.5)) == pytest.approx(2.0)
    assert float(total_loss(torch.tensor(1.5), None, 4.0)) == pytest.approx(1.5)
    assert float(total_loss(torch.tensor(1.0), torch.tensor(3.0), 0.0)) == pytest.approx(1.0)
    assert float(total_loss(torch.tensor(1.0), torch.tensor(0.5), 2.0)) == 2.0


def test_total_loss_rejects_non_finite_terms():
    with pytest.raises(NonFiniteLossError):
        total_loss(torch.tensor(float("nan")), None, 1.0)
    with pytest.raises(NonFiniteLossError):
        total_loss(torch.tensor(1.0), torch.tensor(float("inf")), 1.0)
    with pytest.raises(ArithmeticError):
        total_loss(torch.tensor(1.0), torch.tensor(float("nan")), 0.0)


# -----------------------------------------------------------------------------
# Hashing and freezing
# -----------------------------------------------------------------------------
def test_params_hash_changes_with_any_parameter(pair):
    teacher, _ = pair
    clone = copy_params(teacher)
    assert params_hash(clone) == params_hash(teacher)

    with torch.no_grad():
        list(clone.parameters())[-1].view(-1)[0] += 1e-3
    assert params_hash(clone) != params_hash(teacher)


def test_freeze_disables_gradients(pair):
    teacher, _ = pair
    teacher.train()
    frozen = freeze(teacher)

    assert frozen is teacher
    assert not frozen.training
    assert not any(p.requires_grad for p in frozen.parameters())
