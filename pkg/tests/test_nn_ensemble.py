"""
Tests for SGD/SAM updates, sharpness-aware set selection and ensemble training
"""

import numpy as np
import pytest

from flatdiv.core.error_handler import DivergenceError, InvalidParameterError
from flatdiv.models.configs import EnsembleConfig, SharpnessQuery, SyntheticTaskConfig
from flatdiv.services.mlp import MlpModel
from flatdiv.services.nn_ensemble import (
    SharpnessAwareSets,
    evaluate_ensemble,
    generate_task,
    run_epoch,
    sam_epoch,
    sam_update,
    select_sharpness_aware_sets,
    sgd_epoch,
    sgd_update,
    sharpbalance_epoch,
    top_k_indices,
    train_ensemble,
    train_members,
)
from flatdiv.services.numkernel import RngStream
from tests.fixtures import TaskFixtures


def half_square(theta):
    """f(θ) = ½‖θ‖²"""
    return 0.5 * float(theta @ theta), theta.copy()


@pytest.fixture
def tiny_data():
    return generate_task(SyntheticTaskConfig(**TaskFixtures.TINY))


@pytest.fixture
def tiny_members():
    return [MlpModel.initialize(RngStream(i), 5, 8, 3) for i in range(3)]


class TestUpdates:
    """Test single parameter updates"""

    def test_sam_hand_value(self):
        theta, loss = sam_update(np.array([1.0]), half_square, rho=0.1, lr=0.1, weight_decay=0.0)
        assert theta[0] == pytest.approx(0.89)
        assert loss == pytest.approx(0.5)

    def test_zero_radius_is_sgd(self):
        theta = np.array([0.3, -1.2])
        sam_theta, _ = sam_update(theta, half_square, rho=0.0, lr=0.05, weight_decay=1e-3)
        sgd_theta, _ = sgd_update(theta, half_square, lr=0.05, weight_decay=1e-3)
        np.testing.assert_array_equal(sam_theta, sgd_theta)

    def test_zero_gradient_skips_perturbation(self):
        theta, _ = sam_update(np.zeros(3), half_square, rho=0.5, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(theta, np.zeros(3))

    def test_negative_radius(self):
        with pytest.raises(InvalidParameterError):
            sam_update(np.ones(2), half_square, rho=-0.1, lr=0.1, weight_decay=0.0)


class TestSharpnessAwareSets:
    """Test top-k selection and set construction"""

    def test_top_k_ties_go_to_lower_index(self):
        scores = np.array([1.0, 3.0, 3.0, 2.0])
        np.testing.assert_array_equal(top_k_indices(scores, 1), [1])
        np.testing.assert_array_equal(top_k_indices(scores, 3), [1, 2, 3])

    def test_two_members_swap_sets(self, tiny_data, tiny_members):
        sets = select_sharpness_aware_sets(tiny_members[:2], tiny_data.x_train, tiny_data.y_train, 0.4)
        np.testing.assert_array_equal(sets.sam_indices[0], sets.top_indices[1])
        np.testing.assert_array_equal(sets.sam_indices[1], sets.top_indices[0])
        assert sets.top_indices[0].size == 24

    def test_sets_partition_training_data(self, tiny_data, tiny_members):
        sets = select_sharpness_aware_sets(tiny_members, tiny_data.x_train, tiny_data.y_train, 0.2)
        sets.validate(tiny_data.n_train)
        for i in range(3):
            others = np.union1d(sets.top_indices[(i + 1) % 3], sets.top_indices[(i + 2) % 3])
            np.testing.assert_array_equal(sets.sam_indices[i], others)

    def test_validate_rejects_overlap(self):
        sets = SharpnessAwareSets(sam_indices=(np.array([0, 1]),), normal_indices=(np.array([1, 2]),))
        with pytest.raises(InvalidParameterError):
            sets.validate(3)

    def test_rejects_single_member(self, tiny_data, tiny_members):
        with pytest.raises(InvalidParameterError):
            select_sharpness_aware_sets(tiny_members[:1], tiny_data.x_train, tiny_data.y_train, 0.4)

    def test_rejects_fraction_outside_unit_interval(self, tiny_data, tiny_members):
        with pytest.raises(InvalidParameterError):
            select_sharpness_aware_sets(tiny_members, tiny_data.x_train, tiny_data.y_train, 1.0)


class TestEpochs:
    """Test batch scheduling within one epoch"""

    @pytest.fixture
    def config(self):
        return EnsembleConfig(m=2, rho=0.05, hidden=8, epochs=1, batch_size=16, lr=0.05)

    def test_every_sample_visited_once(self, tiny_data, tiny_members, config):
        sets = select_sharpness_aware_sets(tiny_members, tiny_data.x_train, tiny_data.y_train, 0.2)
        result = sharpbalance_epoch(0, tiny_members[0], sets, tiny_data.x_train, tiny_data.y_train,
                                    config, 0.05, RngStream(0))
        np.testing.assert_array_equal(result.visits, np.ones(tiny_data.n_train, dtype=np.int64))
        assert result.sam_batches == -(-sets.sam_indices[0].size // 16)
        assert result.normal_batches == -(-sets.normal_indices[0].size // 16)

    def test_empty_set_is_skipped(self, tiny_data, tiny_members, config):
        result = sgd_epoch(tiny_members[0], tiny_data.x_train, tiny_data.y_train, config, 0.05, RngStream(0))
        assert result.sam_batches == 0
        assert result.normal_batches == 4

    def test_sam_at_zero_radius_matches_sgd(self, tiny_data, tiny_members, config):
        flat = config.model_copy(update={"rho": 0.0})
        sam = sam_epoch(tiny_members[0], tiny_data.x_train, tiny_data.y_train, flat, 0.05, RngStream(3))
        sgd = sgd_epoch(tiny_members[0], tiny_data.x_train, tiny_data.y_train, flat, 0.05, RngStream(3))
        np.testing.assert_array_equal(sam.model.flat_params(), sgd.model.flat_params())

    def test_epoch_deterministic(self, tiny_data, tiny_members, config):
        everything = np.arange(tiny_data.n_train)
        empty = np.array([], dtype=np.int64)
        first = run_epoch(tiny_members[0], everything, empty, tiny_data.x_train, tiny_data.y_train,
                          config, 0.05, RngStream(8))
        second = run_epoch(tiny_members[0], everything, empty, tiny_data.x_train, tiny_data.y_train,
                           config, 0.05, RngStream(8))
        np.testing.assert_array_equal(first.model.flat_params(), second.model.flat_params())

    def test_overflow_becomes_divergence(self, tiny_data, tiny_members, config):
        broken = tiny_members[0].with_flat_params(np.full(tiny_members[0].n_params, np.inf))
        everything = np.arange(tiny_data.n_train)
        empty = np.array([], dtype=np.int64)
        with pytest.raises(DivergenceError) as exc_info:
            run_epoch(broken, empty, everything, tiny_data.x_train, tiny_data.y_train, config, 0.05, RngStream(0))
        assert exc_info.value.details["batches"] == 0
        assert exc_info.value.details["last_loss"] is None


class TestSyntheticTask:
    """Test the toy data generator"""

    def test_shapes_and_severities(self, tiny_data):
        assert tiny_data.x_train.shape == (60, 5)
        assert tiny_data.x_test.shape == (40, 5)
        assert sorted(tiny_data.ood) == [1, 3]
        assert tiny_data.n_classes == 3

    def test_deterministic(self, tiny_data):
        again = generate_task(SyntheticTaskConfig(**TaskFixtures.TINY))
        np.testing.assert_array_equal(again.x_train, tiny_data.x_train)
        np.testing.assert_array_equal(again.ood[3], tiny_data.ood[3])

    def test_higher_severity_moves_further(self, tiny_data):
        shift_1 = np.linalg.norm(tiny_data.ood[1] - tiny_data.x_test)
        shift_3 = np.linalg.norm(tiny_data.ood[3] - tiny_data.x_test)
        assert shift_3 > shift_1


class TestTraining:
    """Test member training and evaluation"""

    def test_sharpbalance_selection_schedule(self, tiny_data):
        config = EnsembleConfig(m=2, optimizer="sharpbalance", rho=0.05, T_d=1, warmup_epochs=1,
                                hidden=8, epochs=3, batch_size=16, lr=0.05)
        members, history, selections = train_members(tiny_data, config, RngStream(0))
        assert len(members) == 2
        assert selections == 2
        warmup = [h for h in history if h["epoch"] == 0]
        assert all(h["normal_batches"] == 0 for h in warmup)
        later = [h for h in history if h["epoch"] == 1]
        assert all(h["normal_batches"] > 0 for h in later)

    def test_divergence_detected(self, tiny_data):
        config = EnsembleConfig(m=2, optimizer="sgd", hidden=8, epochs=1, batch_size=16,
                                divergence_threshold=1e-9)
        with pytest.raises(DivergenceError) as exc_info:
            train_members(tiny_data, config, RngStream(0))
        assert exc_info.value.details["epoch"] == 0

    def test_overflowing_step_size_detected(self, tiny_data):
        config = EnsembleConfig(m=2, optimizer="sam", rho=0.05, hidden=8, epochs=1, batch_size=16, lr=1e300)
        with pytest.raises(DivergenceError) as exc_info:
            train_members(tiny_data, config, RngStream(0))
        assert exc_info.value.details["epoch"] == 0
        assert exc_info.value.details["optimizer"] == "sam"

    def test_member_seeds_pin_initialization(self, tiny_data):
        config = EnsembleConfig(m=2, optimizer="sgd", hidden=8, epochs=1, batch_size=16, member_seeds=[5, 6])
        first, _, _ = train_members(tiny_data, config, RngStream(0))
        second, _, _ = train_members(tiny_data, config, RngStream(99))
        np.testing.assert_array_equal(first[1].flat_params(), second[1].flat_params())

    def test_evaluation_reports_every_metric(self, tiny_data, tiny_members):
        query = SharpnessQuery(**TaskFixtures.FAST_SHARPNESS)
        report = evaluate_ensemble(tiny_members, tiny_data, "probabilities", query,
                                   ["l2_adaptive", "linf_adaptive"], RngStream(1))
        for name in ("id_accuracy", "member_accuracy_mean", "disagreement", "variance_diversity",
                     "kl_diversity", "ood_accuracy_s1", "ood_accuracy_s3", "sharpness_l2_adaptive_mean",
                     "sharpness_linf_adaptive_member2", "train_loss_mean"):
            assert name in report.metrics
        assert report.member_count == 3
        assert report.sample_count == 40
        assert report.metadata["variance_convention"] == "population"

    @pytest.mark.slow
    def test_sgd_learns_separable_task(self):
        task = SyntheticTaskConfig(**TaskFixtures.SEPARABLE)
        config = EnsembleConfig(**TaskFixtures.SMOKE_ENSEMBLE)
        trained = train_ensemble(task, config, RngStream(0), query=SharpnessQuery(**TaskFixtures.FAST_SHARPNESS))
        assert trained.report.metrics["id_accuracy"] > 0.9
        assert trained.report.metadata["optimizer"] == "sgd"
        assert trained.selections == 0
