import math
from dataclasses import replace

import numpy as np
import pytest

from fedsim.local_solver import (
    DeviceProfile,
    ParticipationTimeout,
    draw_step_budget,
    local_solve,
)
from fedsim.models import LossModel, ProximalObjective
from fedsim.numerics import RngStream, l2_norm
from fedsim.data import DataShard
from conftest import random_shard


@pytest.fixture
def profile():
    gen = RngStream(21).generator()
    shard = random_shard(gen, n=30, d=4, c=3)
    return DeviceProfile(
        device_id=0,
        shard=shard,
        rng=RngStream(100, (2, 0)),
        steps_min=1,
        steps_max=20,
        learning_rate=0.05,
    )


@pytest.fixture
def model():
    return LossModel("mlr", d_in=4, n_classes=3)


def center_for(model):
    return np.zeros(model.param_count)


class TestDrawStepBudget:
    def test_degenerate_range(self, profile):
        fixed = replace(profile, steps_min=5, steps_max=5)
        assert all(draw_step_budget(fixed, t) == 5 for t in range(20))

    def test_uniform_mean(self, profile):
        draws = [draw_step_budget(profile, t) for t in range(10_000)]
        assert 9.5 <= np.mean(draws) <= 11.5
        assert min(draws) >= 1 and max(draws) <= 20

    def test_keyed_by_device_and_round_only(self, profile):
        # re-drawing the same (device, round) gives the same budget, so
        # strategies sharing a seed see identical budget sequences
        a = [draw_step_budget(profile, t) for t in range(50)]
        b = [draw_step_budget(profile, t) for t in range(50)]
        assert a == b


class TestLocalSolve:
    def test_zero_steps_full_inexactness(self, model, profile):
        update = local_solve(model, profile, center_for(model), mu=0.5, steps=0)
        np.testing.assert_array_equal(update.w_next, center_for(model))
        assert update.gamma == 1.0
        assert update.steps == 0

    def test_solve_to_optimality_gamma_vanishes(self, model, profile):
        update = local_solve(model, profile, center_for(model), mu=1.0, steps=6000)
        assert update.gamma <= 1e-6

    def test_more_steps_tighter(self, model, profile):
        few = local_solve(model, profile, center_for(model), mu=1.0, round_idx=3, steps=1)
        many = local_solve(model, profile, center_for(model), mu=1.0, round_idx=3, steps=20)
        assert many.gamma <= few.gamma

    def test_gamma_in_unit_range_for_stable_full_batch(self, model, profile):
        # learning rate below 1/(L + mu) keeps plain gradient descent contracting
        for t in range(6):
            update = local_solve(model, profile, center_for(model), mu=1.0, round_idx=t)
            assert 0.0 <= update.gamma <= 1.0 + 1e-9

    def test_delta_consistency(self, model, profile):
        update = local_solve(model, profile, center_for(model), mu=0.3, round_idx=1)
        np.testing.assert_array_equal(update.delta, update.w_next - center_for(model))

    def test_grad_at_center_is_exact(self, model, profile):
        update = local_solve(model, profile, center_for(model), mu=0.3, round_idx=2)
        np.testing.assert_array_equal(
            update.grad_at_center, model.gradient(center_for(model), profile.shard)
        )

    def test_zero_gradient_at_center(self):
        # two balanced classes on all-zero features: the zero parameter vector
        # is exactly stationary (softmax of 0 is exactly one half per class)
        two_class = LossModel("mlr", d_in=4, n_classes=2)
        feats = np.zeros((6, 4))
        labels = np.array([0, 1, 0, 1, 0, 1])
        shard = DataShard(0, feats, labels)
        prof = DeviceProfile(device_id=1, shard=shard, rng=RngStream(3, (2, 1)))
        update = local_solve(two_class, prof, center_for(two_class), mu=0.0, steps=5)
        assert update.gamma == 0.0
        assert l2_norm(update.delta) == 0.0

    def test_timeout_when_deadline_before_comm(self, model, profile):
        slow = replace(profile, comm_delay=10.0)
        with pytest.raises(ParticipationTimeout):
            local_solve(model, slow, center_for(model), mu=0.1, tau=10.0)

    def test_timeout_when_no_step_fits(self, model, profile):
        slow = replace(profile, comm_delay=10.0, step_cost=5.0)
        with pytest.raises(ParticipationTimeout):
            local_solve(model, slow, center_for(model), mu=0.1, tau=12.0)

    def test_elapsed_time_accounting(self, model, profile):
        timed = replace(profile, comm_delay=2.5, step_cost=1.5)
        update = local_solve(model, timed, center_for(model), mu=0.1, tau=math.inf, steps=4)
        assert update.elapsed == 2.5 + 4 * 1.5

    def test_deadline_caps_steps(self, model, profile):
        timed = replace(profile, comm_delay=1.0, step_cost=1.0,
                                 steps_min=20, steps_max=20)
        update = local_solve(model, timed, center_for(model), mu=0.1, tau=4.5)
        assert update.steps == 3

    def test_minibatch_path_runs(self, model, profile):
        sgd = replace(profile, batch_size=5, learning_rate=0.02)
        update = local_solve(model, sgd, center_for(model), mu=0.5, round_idx=7)
        assert update.steps >= 1
        assert np.all(np.isfinite(update.w_next))

    def test_gamma_warning_logged_not_clamped(self, model, profile, caplog):
        # absurd learning rate makes gradient descent diverge; gamma > 1 must
        # be reported raw
        wild = replace(profile, learning_rate=5.0)
        with caplog.at_level("WARNING"):
            update = local_solve(model, wild, center_for(model), mu=0.0, steps=10)
        assert update.gamma > 1.0
        assert any("gamma" in r.message for r in caplog.records)


class TestSolveReducesObjective:
    def test_descent_on_proximal_objective(self, model, profile):
        center = center_for(model)
        prox = ProximalObjective(model, center, mu=1.0)
        update = local_solve(model, profile, center, mu=1.0, steps=20)
        assert prox.value(update.w_next, profile.shard) < prox.value(center, profile.shard)
