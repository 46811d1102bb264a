"""curriculum - subject subsets and the subject-weighted loss

Each of the K models gets a subset S_k of the training subjects. A
trial from a subject in S_k always counts fully towards model k's
cross-entropy; trials from everybody else are weighted by alpha,
which falls linearly from 1 to 0 over training.
"""

import dataclasses
import logging

import numpy as np

from echub import autodiff as ad
from echub.errors import (ContractError, InfeasiblePartitionError, ParameterError,
                          ShapeError, UnknownSubjectError)

log = logging.getLogger(__name__)

# resampling until every subset is non-empty has a vanishing success
# rate once K approaches N; give up rather than spin
MAX_PARTITION_DRAWS = 100000


@dataclasses.dataclass(frozen=True)
class SubjectPartition:
    """Which of the K subsets each subject belongs to"""
    n_subsets: int
    assignment: dict
    seed: int = None

    def __post_init__(self):
        if self.n_subsets < 2:
            raise ParameterError("K >= 2 subsets required, got %d" % self.n_subsets)
        for subject, subset in self.assignment.items():
            if not 0 <= subset < self.n_subsets:
                raise ParameterError("subject %s assigned to subset %s, outside [0, %d)"
                                     % (subject, subset, self.n_subsets))
        sizes = self.sizes()
        if min(sizes) == 0:
            raise InfeasiblePartitionError("subset %d is empty" % sizes.index(0))

    @property
    def n_subjects(self):
        return len(self.assignment)

    def subset_of(self, subject):
        try:
            return self.assignment[subject]
        except KeyError:
            raise UnknownSubjectError("subject %r is not in the partition" % (subject,))

    def members(self, k):
        return sorted(s for s, subset in self.assignment.items() if subset == k)

    def sizes(self):
        sizes = [0] * self.n_subsets
        for subset in self.assignment.values():
            sizes[subset] += 1
        return sizes

    def membership(self, subjects, k):
        """Boolean array: does each subject belong to S_k"""
        return np.array([self.subset_of(int(s)) == k for s in subjects], dtype=bool)

    def to_dict(self):
        return {"seed": self.seed, "K": self.n_subsets,
                "assignment": {str(s): k for s, k in sorted(self.assignment.items())}}

    @classmethod
    def from_dict(cls, data):
        return cls(n_subsets=int(data["K"]),
                   assignment={int(s): int(k) for s, k in data["assignment"].items()},
                   seed=data.get("seed"))


def make_partition(subject_ids, n_subsets, rng, seed=None):
    """Assign every subject to one of K subsets uniformly at random

    Draws are repeated until no subset is empty. 'seed' is only
    recorded alongside the result.
    """
    subject_ids = [int(s) for s in subject_ids]
    if n_subsets < 2:
        raise ParameterError("K >= 2 subsets required, got %d" % n_subsets)
    if len(set(subject_ids)) != len(subject_ids):
        raise ParameterError("subject ids must be unique")
    if n_subsets > len(subject_ids):
        raise InfeasiblePartitionError("cannot split %d subjects into %d non-empty subsets"
                                       % (len(subject_ids), n_subsets))
    for draw in range(MAX_PARTITION_DRAWS):
        labels = rng.integers(0, n_subsets, size=len(subject_ids))
        if len(np.unique(labels)) == n_subsets:
            if draw:
                log.debug("partition accepted after %d redraws", draw)
            return SubjectPartition(n_subsets, dict(zip(subject_ids, labels.tolist())), seed)
    raise InfeasiblePartitionError("no partition of %d subjects into %d non-empty subsets "
                                   "after %d draws" % (len(subject_ids), n_subsets,
                                                       MAX_PARTITION_DRAWS))


def _linear_decay(epoch, n_epochs):
    return 1.0 - epoch / n_epochs


DECAY_FUNCTIONS = {"linear": _linear_decay}


@dataclasses.dataclass(frozen=True)
class Schedule:
    """Training progress; epochs are counted from 0"""
    n_epochs: int
    current_epoch: int = 0
    decay: str = "linear"

    def __post_init__(self):
        if self.n_epochs < 1:
            raise ParameterError("n_epochs must be positive")
        if self.decay not in DECAY_FUNCTIONS:
            raise ParameterError("unknown decay %r (choose from %s)"
                                 % (self.decay, ", ".join(sorted(DECAY_FUNCTIONS))))

    def at(self, epoch):
        return dataclasses.replace(self, current_epoch=epoch)


def alpha(schedule):
    """1 - epoch / N_epochs"""
    if not 0 <= schedule.current_epoch <= schedule.n_epochs:
        raise ContractError("epoch %d outside [0, %d]"
                            % (schedule.current_epoch, schedule.n_epochs))
    return DECAY_FUNCTIONS[schedule.decay](schedule.current_epoch, schedule.n_epochs)


def beta(subject, k, partition, schedule):
    """1 for subjects of S_k, alpha for everyone else"""
    if not 0 <= k < partition.n_subsets:
        raise ParameterError("model index %d outside [0, %d)" % (k, partition.n_subsets))
    return 1.0 if partition.subset_of(subject) == k else alpha(schedule)


def beta_weights(subjects, k, partition, schedule):
    a = alpha(schedule)
    return np.where(partition.membership(subjects, k), 1.0, a)


def _check_batch(scores, labels, subjects):
    labels = np.asarray(labels, dtype=np.float64)
    for s in scores:
        if s.shape != labels.shape:
            raise ContractError("scores %s do not match labels %s" % (s.shape, labels.shape))
    if len(subjects) != labels.shape[0]:
        raise ContractError("%d subjects for a batch of %d" % (len(subjects), labels.shape[0]))
    return labels


def loss_ce(scores, labels):
    """Plain ensemble objective: (per-model CE list, their sum)"""
    labels = _check_batch(scores, labels, np.zeros(np.shape(labels)[0]))
    per_model = [ad.cross_entropy(s, labels) for s in scores]
    return per_model, ad.add_n(per_model)


def loss_subj(scores, labels, subjects, partition, schedule):
    """(per-model beta-weighted CE list, their sum)

    Each model's term is the batch mean of beta(x, k) * CE(x); with
    beta = 1 everywhere it is bit-for-bit the plain CE mean.
    """
    if len(scores) != partition.n_subsets:
        raise ShapeError("%d score sets for a partition into %d subsets"
                         % (len(scores), partition.n_subsets))
    labels = _check_batch(scores, labels, subjects)
    batch = labels.shape[0]
    per_model = []
    for k, s in enumerate(scores):
        weights = beta_weights(subjects, k, partition, schedule)
        per_model.append(ad.weighted_mean(ad.cross_entropy_per_sample(s, labels),
                                          weights, batch))
    return per_model, ad.add_n(per_model)
