import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from echub import autodiff as ad
from echub.curriculum import (Schedule, SubjectPartition, alpha, beta, beta_weights,
                              loss_ce, loss_subj, make_partition)
from echub.errors import (ContractError, InfeasiblePartitionError, ParameterError,
                          ShapeError, UnknownSubjectError)


class TestSchedule:
    def test_spot_values(self):
        schedule = Schedule(120)
        assert alpha(schedule.at(0)) == 1.0
        assert alpha(schedule.at(60)) == 0.5
        assert alpha(schedule.at(120)) == 0.0

    def test_every_epoch(self):
        schedule = Schedule(120)
        for epoch in range(121):
            assert alpha(schedule.at(epoch)) == 1.0 - epoch / 120

    def test_outside_training(self):
        with pytest.raises(ContractError):
            alpha(Schedule(10, current_epoch=11))
        with pytest.raises(ContractError):
            alpha(Schedule(10, current_epoch=-1))

    def test_bad_settings(self):
        with pytest.raises(ParameterError):
            Schedule(0)
        with pytest.raises(ParameterError):
            Schedule(10, decay="cosine")


class TestPartition:
    def test_every_subject_in_one_nonempty_subset(self):
        partition = make_partition(range(10), 3, np.random.default_rng(0))
        assert sorted(partition.assignment) == list(range(10))
        assert sum(partition.sizes()) == 10
        assert min(partition.sizes()) >= 1
        assert sorted(s for k in range(3) for s in partition.members(k)) == list(range(10))

    def test_same_rng_same_partition(self):
        a = make_partition([4, 8, 15, 16, 23, 42], 2, np.random.default_rng(5))
        b = make_partition([4, 8, 15, 16, 23, 42], 2, np.random.default_rng(5))
        assert a == b

    def test_infeasible(self):
        with pytest.raises(InfeasiblePartitionError):
            make_partition([1, 2], 3, np.random.default_rng(0))
        with pytest.raises(ParameterError):
            make_partition([1, 2, 3], 1, np.random.default_rng(0))
        with pytest.raises(ParameterError):
            make_partition([1, 1, 2], 2, np.random.default_rng(0))

    def test_k_equals_n_is_one_subject_each(self):
        partition = make_partition(range(5), 5, np.random.default_rng(2))
        assert partition.sizes() == [1] * 5

    def test_empty_subset_rejected(self):
        with pytest.raises(InfeasiblePartitionError):
            SubjectPartition(3, {0: 0, 1: 1, 2: 1})

    def test_unknown_subject(self):
        partition = SubjectPartition(2, {0: 0, 1: 1})
        with pytest.raises(UnknownSubjectError):
            partition.subset_of(7)
        with pytest.raises(LookupError):
            partition.subset_of(7)

    def test_dict_form(self):
        partition = SubjectPartition(2, {3: 0, 1: 1, 2: 0}, seed=9)
        data = partition.to_dict()
        assert data == {"seed": 9, "K": 2, "assignment": {"1": 1, "2": 0, "3": 0}}
        assert SubjectPartition.from_dict(data) == partition

    @settings(max_examples=40, deadline=None)
    @given(st.integers(6, 30), st.data())
    def test_partition_property(self, n, data):
        k = data.draw(st.integers(2, max(2, n // 3)))
        seed = data.draw(st.integers(0, 2 ** 16))
        partition = make_partition(range(n), k, np.random.default_rng(seed))
        assert len(partition.sizes()) == k
        assert all(size > 0 for size in partition.sizes())
        assert sum(partition.sizes()) == n


class TestBeta:
    partition = SubjectPartition(2, {0: 0, 1: 1, 2: 1})

    def test_inside_and_outside(self):
        schedule = Schedule(10, current_epoch=4)
        assert beta(0, 0, self.partition, schedule) == 1.0
        assert beta(1, 0, self.partition, schedule) == 0.6
        assert beta(1, 1, self.partition, schedule) == 1.0
        with pytest.raises(ParameterError):
            beta(0, 2, self.partition, schedule)

    def test_vectorised(self):
        weights = beta_weights(np.array([0, 1, 2, 0]), 1, self.partition, Schedule(4, 1))
        assert_array_equal(weights, [0.75, 1.0, 1.0, 0.75])


def _batch(rng, n_models=2, batch=6, n_classes=3):
    scores = [ad.Tensor(rng.standard_normal((batch, n_classes)), requires_grad=True)
              for _ in range(n_models)]
    labels = np.eye(n_classes)[rng.integers(0, n_classes, size=batch)]
    return scores, labels


class TestSubjectLoss:
    partition = SubjectPartition(2, {0: 0, 1: 1, 2: 1})

    def test_first_epoch_is_plain_cross_entropy(self, rng):
        scores, labels = _batch(rng)
        subjects = np.array([0, 1, 2, 0, 1, 2])
        per_model, total = loss_subj(scores, labels, subjects, self.partition, Schedule(5))
        for k, s in enumerate(scores):
            assert per_model[k].item() == ad.cross_entropy(s, labels).item()
        assert total.item() == loss_ce(scores, labels)[1].item()

    def test_outsiders_vanish_at_the_end(self, rng):
        scores, labels = _batch(rng, batch=4)
        subjects = np.array([1, 2, 1, 2])
        per_model, _ = loss_subj(scores, labels, subjects, self.partition, Schedule(5, 5))
        assert per_model[0].item() == 0.0
        assert per_model[1].item() > 0.0

    def test_weights_scale_per_sample(self, rng):
        scores, labels = _batch(rng, batch=2)
        subjects = np.array([0, 1])
        per_model, _ = loss_subj(scores, labels, subjects, self.partition, Schedule(4, 3))
        ce = ad.cross_entropy_per_sample(scores[0], labels).data
        assert per_model[0].item() == pytest.approx((ce[0] + 0.25 * ce[1]) / 2, rel=1e-12)

    def test_sample_order_does_not_matter(self, rng):
        scores, labels = _batch(rng, batch=6)
        subjects = np.array([0, 1, 2, 2, 1, 0])
        order = rng.permutation(6)
        shuffled = [ad.Tensor(s.data[order]) for s in scores]
        for epoch in (0, 2, 5):
            _, total = loss_subj(scores, labels, subjects, self.partition, Schedule(5, epoch))
            _, moved = loss_subj(shuffled, labels[order], subjects[order], self.partition,
                                 Schedule(5, epoch))
            assert moved.item() == pytest.approx(total.item(), rel=1e-12)

    def test_wrong_number_of_models(self, rng):
        scores, labels = _batch(rng, n_models=3)
        with pytest.raises(ShapeError):
            loss_subj(scores, labels, np.zeros(6, dtype=int), self.partition, Schedule(5))

    def test_labels_must_match_scores(self, rng):
        scores, _ = _batch(rng)
        with pytest.raises(ContractError):
            loss_subj(scores, np.eye(2)[[0, 1, 0, 1, 0, 1]], np.zeros(6, dtype=int),
                      self.partition, Schedule(5))
