"""splits - subject-level evaluation plans

Two protocols, both splitting subjects rather than trials:

  cv     subjects shuffled into n folds; fold i is the test set, fold
         (i + 1) mod n the validation set, the rest is training data
  loso   one subject is the test set; of the others, 20% (at least
         one) validate and the remainder train
"""

import dataclasses

import numpy as np

from echub.errors import ParameterError, UnknownSubjectError

LOSO_VALIDATION_SHARE = 0.2


@dataclasses.dataclass(frozen=True)
class SplitPlan:
    mode: str
    train: tuple
    val: tuple
    test: tuple
    fold_index: int = None
    test_subject: int = None

    def __post_init__(self):
        if self.mode not in ("cv", "loso"):
            raise ParameterError("unknown split mode %r" % (self.mode,))
        groups = [set(self.train), set(self.val), set(self.test)]
        if not all(groups):
            raise ParameterError("train, validation and test sets must all be non-empty")
        if len(groups[0] | groups[1] | groups[2]) != sum(len(g) for g in groups):
            raise ParameterError("train, validation and test sets overlap")

    @property
    def name(self):
        if self.mode == "cv":
            return "cv-fold%d" % self.fold_index
        return "loso-s%d" % self.test_subject

    @property
    def subjects(self):
        return sorted(self.train + self.val + self.test)

    def to_dict(self):
        return {"mode": self.mode, "name": self.name,
                "fold_index": self.fold_index, "test_subject": self.test_subject,
                "train": list(self.train), "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, data):
        return cls(mode=data["mode"], train=tuple(data["train"]), val=tuple(data["val"]),
                   test=tuple(data["test"]), fold_index=data.get("fold_index"),
                   test_subject=data.get("test_subject"))


def _sorted_ints(values):
    return tuple(sorted(int(v) for v in values))


def make_folds(subjects, n_folds, rng):
    """Shuffle once and cut into n nearly equal folds"""
    subjects = [int(s) for s in subjects]
    if n_folds < 3:
        raise ParameterError("cross-validation needs at least 3 folds")
    if len(subjects) < n_folds:
        raise ParameterError("%d subjects cannot fill %d folds" % (len(subjects), n_folds))
    shuffled = rng.permutation(np.asarray(sorted(subjects)))
    return [_sorted_ints(fold) for fold in np.array_split(shuffled, n_folds)]


def split_cv(subjects, n_folds=5, fold_index=0, rng=None):
    """Plan for one fold; the same rng state gives the same folds"""
    if not 0 <= fold_index < n_folds:
        raise ParameterError("fold index %d outside [0, %d)" % (fold_index, n_folds))
    rng = np.random.default_rng(0) if rng is None else rng
    folds = make_folds(subjects, n_folds, rng)
    val_index = (fold_index + 1) % n_folds
    train = [s for i, fold in enumerate(folds) if i not in (fold_index, val_index)
             for s in fold]
    return SplitPlan("cv", _sorted_ints(train), folds[val_index], folds[fold_index],
                     fold_index=fold_index)


def loso_validation_size(n_subjects):
    """max(1, round(0.2 * (N - 1))), halves rounded up"""
    return max(1, int(np.floor(LOSO_VALIDATION_SHARE * (n_subjects - 1) + 0.5)))


def split_loso(subjects, test_subject, rng=None):
    subjects = sorted(int(s) for s in subjects)
    if len(subjects) < 3:
        raise ParameterError("leave-one-subject-out needs at least 3 subjects")
    if test_subject not in subjects:
        raise UnknownSubjectError("test subject %r is not among the subjects" % (test_subject,))
    rng = np.random.default_rng(0) if rng is None else rng
    rest = rng.permutation(np.asarray([s for s in subjects if s != test_subject]))
    n_val = loso_validation_size(len(subjects))
    return SplitPlan("loso", _sorted_ints(rest[n_val:]), _sorted_ints(rest[:n_val]),
                     (int(test_subject),), test_subject=int(test_subject))


def all_plans(mode, subjects, seed=0, n_folds=5):
    """Every plan of a protocol; each one draws from a fresh rng(seed)"""
    if mode == "cv":
        return [split_cv(subjects, n_folds, i, np.random.default_rng(seed))
                for i in range(n_folds)]
    if mode == "loso":
        return [split_loso(subjects, s, np.random.default_rng([seed, int(s)]))
                for s in sorted(subjects)]
    raise ParameterError("unknown split mode %r" % (mode,))
