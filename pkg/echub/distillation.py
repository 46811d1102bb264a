"""distillation - intra-ensemble pseudolabels and the total objective

Model k is pulled towards the softmax of the averaged raw scores of
the other K-1 models. The pseudolabel is detached, so only model k
(and the shared head, through model k's own scores) learns from the
term. Trials of S_k are masked out, and the whole term is ramped in
by (1 - alpha).
"""

import dataclasses
import logging

import numpy as np

from echub import autodiff as ad
from echub.curriculum import alpha, loss_ce, loss_subj
from echub.errors import ConfigError, ContractError, ShapeError

log = logging.getLogger(__name__)

LOSS_MODES = ("ce", "subj", "total")


@dataclasses.dataclass(frozen=True)
class DistillConfig:
    lambda_subj: float
    lambda_distill: float = 0.7

    def __post_init__(self):
        if self.lambda_subj < 0 or self.lambda_distill < 0:
            raise ConfigError("loss weights must be non-negative", stage="lambda")

    @classmethod
    def for_ensemble(cls, n_models, lambda_distill=0.7, lambda_subj=None):
        """lambda_subj defaults to K"""
        return cls(lambda_subj=float(n_models if lambda_subj is None else lambda_subj),
                   lambda_distill=float(lambda_distill))


@dataclasses.dataclass
class LossBreakdown:
    per_model_subj: list
    per_model_distill: list
    total_subj: float
    total_distill: float
    total: float
    alpha: float
    objective: ad.Tensor = dataclasses.field(default=None, repr=False)

    def to_dict(self):
        return {"per_model_subj": list(self.per_model_subj),
                "per_model_distill": list(self.per_model_distill),
                "total_subj": self.total_subj,
                "total_distill": self.total_distill,
                "total": self.total,
                "alpha": self.alpha}


def pseudolabel(scores, k):
    """softmax of the mean raw scores of every model except k, detached"""
    if len(scores) < 2:
        raise ContractError("pseudolabels need K >= 2 models")
    if not 0 <= k < len(scores):
        raise ContractError("model index %d outside [0, %d)" % (k, len(scores)))
    others = [s for i, s in enumerate(scores) if i != k]
    with ad.no_grad():
        target = ad.softmax(ad.mean(others), axis=1)
    return ad.stop_gradient(target)


def loss_distill(scores, subjects, partition, schedule, pseudolabels=None):
    """(per-model masked, ramped distillation CE list, their sum)

    Each model's term is the mean CE over the trials outside S_k only,
    times (1 - alpha); it is exactly 0 when the batch has no such
    trial. 'pseudolabels' replaces the computed targets, eg. to hold
    them fixed while parameters are perturbed.
    """
    if len(scores) < 2:
        raise ContractError("distillation needs K >= 2 models")
    if len(scores) != partition.n_subsets:
        raise ShapeError("%d score sets for a partition into %d subsets"
                         % (len(scores), partition.n_subsets))
    subjects = np.asarray(subjects)
    if subjects.shape[0] == 0:
        raise ContractError("empty batch")
    for s in scores:
        if s.shape[0] != subjects.shape[0]:
            raise ContractError("scores for %d trials, subjects for %d"
                                % (s.shape[0], subjects.shape[0]))
    ramp = 1.0 - alpha(schedule)
    per_model = []
    for k, s in enumerate(scores):
        mask = ~partition.membership(subjects, k)
        count = int(mask.sum())
        if count == 0:
            per_model.append(ad.Tensor(0.0))
            continue
        target = pseudolabel(scores, k) if pseudolabels is None else pseudolabels[k]
        masked = ad.weighted_mean(ad.cross_entropy_per_sample(s, target),
                                  mask.astype(np.float64), count)
        per_model.append(ad.scale(masked, ramp))
    return per_model, ad.add_n(per_model)


def _values(tensors):
    return [t.item() for t in tensors]


def loss_total(scores, labels, subjects, partition, schedule, cfg):
    """lambda_subj * L_subj + lambda_distill * L_distill, with the parts"""
    subj, total_subj = loss_subj(scores, labels, subjects, partition, schedule)
    distill, total_distill = loss_distill(scores, subjects, partition, schedule)
    objective = ad.add(ad.scale(total_subj, cfg.lambda_subj),
                       ad.scale(total_distill, cfg.lambda_distill))
    return LossBreakdown(per_model_subj=_values(subj),
                         per_model_distill=_values(distill),
                         total_subj=total_subj.item(),
                         total_distill=total_distill.item(),
                         total=objective.item(),
                         alpha=alpha(schedule),
                         objective=objective)


def compute_objective(mode, scores, labels, subjects, partition, schedule, cfg):
    """Objective for one batch under a loss mode

    ce    -> sum_k CE_k
    subj  -> lambda_subj * L_subj
    total -> lambda_subj * L_subj + lambda_distill * L_distill

    subj is evaluated as total with lambda_distill = 0: the value is
    the same, the distillation terms are still reported, and the two
    modes then share one graph and one gradient summation order.
    """
    if mode == "total":
        return loss_total(scores, labels, subjects, partition, schedule, cfg)
    if mode == "subj":
        return loss_total(scores, labels, subjects, partition, schedule,
                          dataclasses.replace(cfg, lambda_distill=0.0))
    if mode != "ce":
        raise ConfigError("unknown loss mode %r (choose from %s)"
                          % (mode, ", ".join(LOSS_MODES)), stage="loss_mode")
    per_model, total_ce = loss_ce(scores, labels)
    return LossBreakdown(per_model_subj=_values(per_model),
                         per_model_distill=[0.0] * len(per_model),
                         total_subj=total_ce.item(),
                         total_distill=0.0,
                         total=total_ce.item(),
                         alpha=alpha(schedule),
                         objective=total_ce)
