"""training - SGD, the training loop and evaluation

A run trains one network on the training subjects of a SplitPlan,
checks validation accuracy after every epoch and keeps the weights of
the best epoch (earliest on ties). Those weights are then scored on
the test subjects.

Files written into the run directory:

    metrics.jsonl   one row per batch and one per epoch, no wall clock
    checkpoint.bin  selected weights, see echub.model.save_checkpoint
    manifest.json   config, partition, split, metrics summary, timings
"""

import dataclasses
import datetime
import json
import logging
import os
import time

import numpy as np

from echub import autodiff as ad
from echub.curriculum import Schedule, make_partition
from echub.distillation import LOSS_MODES, DistillConfig, compute_objective
from echub.errors import ConfigError, ContractError
from echub.model import (ExtractorConfig, build_network, fuse_scores,
                         predict_from_scores, save_checkpoint)
from echub.splits import SplitPlan

log = logging.getLogger(__name__)

METHODS = ("ensemble", "single", "posthoc")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 64
    lr_phase1: float = 0.01
    lr_phase2: float = 0.002
    lr_step_epoch: int = None
    momentum: float = 0.9
    weight_decay: float = 0.01
    n_models: int = 3
    lambda_distill: float = 0.7
    lambda_subj: float = None
    loss_mode: str = "total"
    method: str = "ensemble"
    decay: str = "linear"
    seed: int = 0
    extractor: dict = dataclasses.field(default_factory=dict)
    eval_batch_size: int = 256
    workers: int = 1
    n_folds: int = 5

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_phase1", "lr_phase2", "n_models",
                     "eval_batch_size", "workers", "n_folds"):
            if getattr(self, name) <= 0:
                raise ConfigError("%s must be positive" % name, stage=name)
        for name in ("momentum", "weight_decay", "lambda_distill"):
            if getattr(self, name) < 0:
                raise ConfigError("%s must be non-negative" % name, stage=name)
        if self.lambda_subj is not None and self.lambda_subj < 0:
            raise ConfigError("lambda_subj must be non-negative", stage="lambda_subj")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError("loss_mode must be one of %s" % ", ".join(LOSS_MODES),
                              stage="loss_mode")
        if self.method not in METHODS:
            raise ConfigError("method must be one of %s" % ", ".join(METHODS), stage="method")
        if self.method == "ensemble" and self.n_models < 2:
            raise ConfigError("an ensemble needs n_models >= 2", stage="n_models")
        if self.method != "ensemble" and self.loss_mode != "ce":
            raise ConfigError("method %r trains with loss_mode 'ce'" % self.method,
                              stage="loss_mode")
        if self.lr_step_epoch is not None and not 0 <= self.lr_step_epoch <= self.epochs:
            raise ConfigError("lr_step_epoch outside [0, epochs]", stage="lr_step_epoch")

    @property
    def step_epoch(self):
        return self.epochs // 2 if self.lr_step_epoch is None else self.lr_step_epoch

    @property
    def members(self):
        return 1 if self.method == "single" else self.n_models

    def distill_config(self):
        return DistillConfig.for_ensemble(self.n_models, self.lambda_distill, self.lambda_subj)

    def extractor_config(self, channels, samples):
        return ExtractorConfig.from_dict(dict(self.extractor, channels=channels, samples=samples))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = set(f.name for f in dataclasses.fields(cls))
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("unknown training keys: %s" % ", ".join(unknown),
                              stage=unknown[0])
        return cls(**data)


def lr_for_epoch(cfg, epoch):
    return cfg.lr_phase1 if epoch < cfg.step_epoch else cfg.lr_phase2


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=0.01):
    """One in-place SGD step with momentum and L2 weight decay

        v <- momentum * v + (grad + weight_decay * theta)
        theta <- theta - lr * v

    'state' is a list of velocities, filled with zeros on first use.
    A missing gradient counts as zero.
    """
    if len(params) != len(grads):
        raise ContractError("%d parameters but %d gradients" % (len(params), len(grads)))
    if not state:
        state.extend(np.zeros(p.shape) for p in params)
    if len(state) != len(params):
        raise ContractError("optimizer state holds %d velocities for %d parameters"
                            % (len(state), len(params)))
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            grad = np.zeros(param.shape)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape or state[i].shape != param.shape:
            raise ContractError("parameter %d has shape %s, gradient %s"
                                % (i, param.shape, grad.shape))
        state[i] = momentum * state[i] + (grad + weight_decay * param.data)
        param.data = param.data - lr * state[i]
    return state


class SGD(object):
    """Keeps the velocities for a fixed list of parameter tensors"""

    def __init__(self, params, momentum=0.9, weight_decay=0.01):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = []

    def step(self, lr):
        sgd_step(self.params, [p.grad for p in self.params], self.state, lr,
                 self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Evaluation:
    accuracy: float
    confusion: list
    member_accuracies: list
    n_trials: int

    def to_dict(self):
        return dataclasses.asdict(self)


def _confusion(labels, predicted, n_classes):
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predicted), 1)
    return matrix


def evaluate(net, corpus, batch_size=256):
    """Fused accuracy, confusion matrix (rows = true class) and the
    accuracy of every member on its own"""
    n = len(corpus)
    if n == 0:
        return Evaluation(0.0, np.zeros((net.n_classes,) * 2, dtype=int).tolist(),
                          [0.0] * net.n_models, 0)
    fused_pred, member_pred = [], [[] for _ in range(net.n_models)]
    with ad.no_grad():
        for start in range(0, n, batch_size):
            x, _, _ = corpus.batch(np.arange(start, min(n, start + batch_size)))
            scores = net.forward(x, "eval").scores
            fused_pred.append(predict_from_scores(fuse_scores(scores)))
            for k, s in enumerate(scores):
                member_pred[k].append(predict_from_scores(s))
    labels = corpus.labels
    fused_pred = np.concatenate(fused_pred)
    member = [float(np.mean(np.concatenate(p) == labels)) for p in member_pred]
    return Evaluation(accuracy=float(np.mean(fused_pred == labels)),
                      confusion=_confusion(labels, fused_pred, net.n_classes).tolist(),
                      member_accuracies=member, n_trials=n)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunManifest:
    run_id: str
    config: dict
    extractor: dict
    partition: dict
    split: dict
    epochs: list
    best_epoch: int
    val: dict
    test: dict
    n_parameters: int
    checkpoint: str = None
    started: str = None
    wall_clock_seconds: float = None

    @property
    def test_accuracy(self):
        return self.test["accuracy"]

    @property
    def best_val_accuracy(self):
        return self.val["accuracy"]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def batches(order, batch_size):
    """Consecutive slices of 'order'; a final slice of one trial is dropped"""
    out = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out.pop()
    return out


def _mean(values):
    return sum(values) / len(values)


def _epoch_summary(rows):
    n_models = len(rows[0]["per_model_subj"])
    return {"total": _mean([r["total"] for r in rows]),
            "total_subj": _mean([r["total_subj"] for r in rows]),
            "total_distill": _mean([r["total_distill"] for r in rows]),
            "per_model_subj": [_mean([r["per_model_subj"][k] for r in rows])
                               for k in range(n_models)],
            "per_model_distill": [_mean([r["per_model_distill"][k] for r in rows])
                                  for k in range(n_models)]}


class _MetricsWriter(object):

    def __init__(self, directory):
        self.file = open(os.path.join(directory, "metrics.jsonl"), "w") if directory else None

    def write(self, row):
        if self.file is not None:
            self.file.write(json.dumps(row, sort_keys=True) + "\n")
            self.file.flush()

    def close(self):
        if self.file is not None:
            self.file.close()


def fit(cfg, corpus, split, output_dir=None, run_id=None):
    """Train one network on 'split'; returns (network, RunManifest)

    The network carries the selected weights. With 'output_dir' the
    run's files are written there.
    """
    if not isinstance(split, SplitPlan):
        split = SplitPlan.from_dict(split)
    sets = {}
    for name in ("train", "val", "test"):
        sets[name] = corpus.select(getattr(split, name))
        if len(sets[name]) == 0:
            raise ConfigError("the %s set is empty" % name, stage=name)
    if len(sets["train"]) < 2:
        raise ConfigError("need at least two training trials", stage="train")

    run_id = run_id or split.name
    started = datetime.datetime.now().isoformat()
    clock = time.time()
    ext_cfg = cfg.extractor_config(corpus.n_channels, corpus.n_samples)
    net = build_network(ext_cfg, corpus.n_classes, cfg.members, cfg.method, cfg.seed)
    partition = None
    if cfg.method == "ensemble" and cfg.loss_mode != "ce":
        partition = make_partition(split.train, cfg.n_models,
                                   np.random.default_rng([cfg.seed, 1]), seed=cfg.seed)
    mode = cfg.loss_mode if cfg.method == "ensemble" else "ce"
    distill_cfg = cfg.distill_config()
    schedule = Schedule(cfg.epochs, decay=cfg.decay)
    optimizer = SGD(net.parameters(), cfg.momentum, cfg.weight_decay)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    log.info("run %s: %s/%s K=%d, %d train / %d val / %d test trials, %d parameters",
             run_id, cfg.method, mode, net.n_models, len(sets["train"]), len(sets["val"]),
             len(sets["test"]), net.count_parameters())

    if output_dir and not os.path.isdir(output_dir):
        os.makedirs(output_dir)
    metrics = _MetricsWriter(output_dir)
    epochs, best_epoch, best_acc, best_state = [], None, -1.0, None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_for_epoch(cfg, epoch)
            at = schedule.at(epoch)
            rows = []
            order = shuffle_rng.permutation(len(sets["train"]))
            for index, idx in enumerate(batches(order, cfg.batch_size)):
                x, y, subjects = sets["train"].batch(idx)
                optimizer.zero_grad()
                out = net.forward(x, "train")
                breakdown = compute_objective(mode, out.scores, y, subjects, partition, at,
                                              distill_cfg)
                breakdown.objective.backward()
                optimizer.step(lr)
                row = dict(breakdown.to_dict(), type="batch", epoch=epoch, batch=index,
                           size=len(idx))
                metrics.write(row)
                rows.append(row)
            val = evaluate(net, sets["val"], cfg.eval_batch_size)
            summary = dict(_epoch_summary(rows), type="epoch", epoch=epoch, lr=lr,
                           alpha=rows[0]["alpha"], val_accuracy=val.accuracy,
                           val_member_accuracies=val.member_accuracies)
            metrics.write(summary)
            epochs.append(summary)
            log.info("%s epoch %d lr=%g alpha=%.4f loss=%.4f (subj %.4f, distill %.4f) val=%.4f",
                     run_id, epoch, lr, summary["alpha"], summary["total"],
                     summary["total_subj"], summary["total_distill"], val.accuracy)
            if val.accuracy > best_acc:
                best_epoch, best_acc, best_state = epoch, val.accuracy, net.state_dict()
    finally:
        metrics.close()

    net.load_state_dict(best_state)
    val = evaluate(net, sets["val"], cfg.eval_batch_size)
    test = evaluate(net, sets["test"], cfg.eval_batch_size)
    log.info("run %s: best epoch %d, val %.4f, test %.4f (members %s)", run_id, best_epoch,
             val.accuracy, test.accuracy, ", ".join("%.4f" % a for a in test.member_accuracies))

    checkpoint = None
    if output_dir:
        checkpoint = os.path.join(output_dir, "checkpoint.bin")
        save_checkpoint(net, checkpoint)
    manifest = RunManifest(run_id=run_id, config=cfg.to_dict(), extractor=ext_cfg.to_dict(),
                           partition=partition.to_dict() if partition else None,
                           split=split.to_dict(), epochs=epochs, best_epoch=best_epoch,
                           val=val.to_dict(), test=test.to_dict(),
                           n_parameters=net.count_parameters(), checkpoint=checkpoint,
                           started=started, wall_clock_seconds=time.time() - clock)
    if output_dir:
        manifest.save(os.path.join(output_dir, "manifest.json"))
    return net, manifest


def train(cfg, corpus, split, output_dir=None, run_id=None):
    return fit(cfg, corpus, split, output_dir, run_id)[1]
