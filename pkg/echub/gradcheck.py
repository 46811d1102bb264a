"""gradcheck - central finite differences against reverse-mode gradients

Every case builds a few random inputs and a function from tensors to a
scalar. Outputs that are not scalar are contracted with fixed random
weights first. For each input the analytic gradient is compared with

    (f(x + h e_i) - f(x - h e_i)) / 2h,      h = 1e-5

and the error of an input is ||a - n||_inf / max(||a||_inf, ||n||_inf, 1e-8).
Random draws inside a case (dropout masks, pseudolabels) are fixed
per case so that every evaluation sees the same function.
"""

import collections
import dataclasses
import logging

import numpy as np

from echub import autodiff as ad
from echub.curriculum import Schedule, SubjectPartition, loss_subj
from echub.distillation import DistillConfig, loss_distill, pseudolabel
from echub.model import ExtractorConfig, build_network

log = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
MAX_COORDS = 24

CASES = collections.OrderedDict()


def case(name):
    def register(builder):
        CASES[name] = builder
        return builder
    return register


def _contract(out, weights):
    """Scalar sum(weights * out); scalars pass through"""
    if out.ndim == 0:
        return out
    return ad.weighted_mean(out, weights, 1.0)


def _dims(rng, low=2, high=4, n=1):
    return tuple(int(d) for d in rng.integers(low, high + 1, size=n))


def _simplex(rng, shape):
    p = rng.random(shape) + 0.1
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# cases: builder(rng) -> (input arrays, fn(tensors) -> Tensor)
# ---------------------------------------------------------------------------

@case("add")
def _add(rng):
    shape = _dims(rng, n=2)
    return [rng.standard_normal(shape), rng.standard_normal(shape)], \
        lambda t: ad.add(t[0], t[1])


@case("mul")
def _mul(rng):
    shape = _dims(rng, n=2)
    return [rng.standard_normal(shape), rng.standard_normal(shape)], \
        lambda t: ad.mul(t[0], t[1])


@case("scale")
def _scale(rng):
    factor = rng.standard_normal()
    return [rng.standard_normal(_dims(rng, n=2))], lambda t: ad.scale(t[0], factor)


@case("add_n")
def _add_n(rng):
    shape = _dims(rng, n=2)
    return [rng.standard_normal(shape) for _ in range(3)], lambda t: ad.add_n(t)


@case("mean")
def _mean(rng):
    shape = _dims(rng, n=2)
    return [rng.standard_normal(shape) for _ in range(3)], lambda t: ad.mean(t)


@case("reshape")
def _reshape(rng):
    a, b = _dims(rng, n=2)
    return [rng.standard_normal((a, b, 2))], lambda t: ad.flatten(t[0])


@case("weighted_mean")
def _weighted_mean(rng):
    n = _dims(rng, 3, 6)[0]
    weights = rng.random(n)
    return [rng.standard_normal(n)], lambda t: ad.weighted_mean(t[0], weights, n)


@case("log")
def _log(rng):
    return [rng.random(_dims(rng, n=2)) + 0.5], lambda t: ad.log(t[0])


@case("elu")
def _elu(rng):
    x = rng.standard_normal(_dims(rng, n=2))
    x[np.abs(x) < 1e-3] = 0.5
    return [x], lambda t: ad.elu(t[0])


@case("softmax")
def _softmax(rng):
    return [rng.standard_normal(_dims(rng, n=2))], lambda t: ad.softmax(t[0], axis=1)


@case("log_softmax")
def _log_softmax(rng):
    return [rng.standard_normal(_dims(rng, n=2))], lambda t: ad.log_softmax(t[0], axis=1)


@case("cross_entropy")
def _cross_entropy(rng):
    b, c = _dims(rng, n=2)
    target = _simplex(rng, (b, c))
    return [rng.standard_normal((b, c))], lambda t: ad.cross_entropy(t[0], target)


@case("linear")
def _linear(rng):
    b, i, o = _dims(rng, n=3)
    return [rng.standard_normal((b, i)), rng.standard_normal((o, i)), rng.standard_normal(o)], \
        lambda t: ad.linear(t[0], t[1], t[2])


@case("dropout")
def _dropout(rng):
    seed = int(rng.integers(2 ** 31))
    return [rng.standard_normal(_dims(rng, n=2))], \
        lambda t: ad.dropout(t[0], 0.3, "train", np.random.default_rng(seed))


@case("avg_pool_time")
def _avg_pool(rng):
    window = int(rng.integers(2, 4))
    return [rng.standard_normal((2, 2, 1, window * 3 + 1))], \
        lambda t: ad.avg_pool_time(t[0], window)


@case("batch_norm")
def _batch_norm(rng):
    b, f = _dims(rng, 3, 4, n=2)
    return [rng.standard_normal((b, f, 2, 3)), rng.random(f) + 0.5, rng.standard_normal(f)], \
        lambda t: ad.batch_norm(t[0], t[1], t[2], ad.BatchNormState(f), "train")


@case("conv_temporal")
def _conv_temporal(rng):
    b, c = _dims(rng, n=2)
    f = _dims(rng)[0]
    return [rng.standard_normal((b, 1, c, 7)), rng.standard_normal((f, 1, 1, 3))], \
        lambda t: ad.conv_temporal(t[0], t[1])


@case("conv_spatial_depthwise")
def _conv_spatial(rng):
    b, f, c = _dims(rng, n=3)
    return [rng.standard_normal((b, f, c, 5)), rng.standard_normal((2 * f, 1, c, 1))], \
        lambda t: ad.conv_spatial_depthwise(t[0], t[1])


@case("conv_temporal_depthwise")
def _conv_temporal_depthwise(rng):
    b, f = _dims(rng, n=2)
    return [rng.standard_normal((b, f, 1, 7)), rng.standard_normal((f, 1, 1, 3))], \
        lambda t: ad.conv_temporal_depthwise(t[0], t[1])


@case("conv_pointwise")
def _conv_pointwise(rng):
    b, f, g = _dims(rng, n=3)
    return [rng.standard_normal((b, f, 1, 5)), rng.standard_normal((g, f, 1, 1))], \
        lambda t: ad.conv_pointwise(t[0], t[1])


TINY_EXTRACTOR = dict(channels=3, samples=16, temporal_filters=2, depth_multiplier=1,
                      separable_filters=2, temporal_kernel_len=3, separable_kernel_len=3,
                      pool1=2, pool2=2, dropout_p=0.25)


def tiny_problem(rng, n_models=3):
    """Small ensemble, a batch from three subjects and a mid-training schedule"""
    cfg = ExtractorConfig(**TINY_EXTRACTOR)
    net = build_network(cfg, 2, n_models=n_models, seed=int(rng.integers(2 ** 31)))
    batch = rng.standard_normal((6, 1, cfg.channels, cfg.samples))
    labels = np.eye(2)[np.array([0, 1, 0, 1, 1, 0])]
    subjects = np.array([0, 0, 1, 1, 2, 2])
    partition = SubjectPartition(n_models, {0: 0, 1: 1, 2: 2 % n_models})
    schedule = Schedule(4, current_epoch=2)
    return net, batch, labels, subjects, partition, schedule


@case("loss_total")
def _loss_total(rng):
    """Whole objective as a function of every network parameter"""
    net, batch, labels, subjects, partition, schedule = tiny_problem(rng)
    initial = [p.data.copy() for p in net.parameters()]
    dropout_seed = int(rng.integers(2 ** 31))
    distill = DistillConfig.for_ensemble(net.n_models)
    with ad.no_grad():
        scores = _forward_with(net, [ad.Tensor(a) for a in initial], batch, dropout_seed)
        fixed = [pseudolabel(scores, k) for k in range(net.n_models)]

    def objective(tensors):
        scores = _forward_with(net, tensors, batch, dropout_seed)
        _, subj = loss_subj(scores, labels, subjects, partition, schedule)
        _, dist = loss_distill(scores, subjects, partition, schedule, pseudolabels=fixed)
        return ad.add(ad.scale(subj, distill.lambda_subj), ad.scale(dist, distill.lambda_distill))

    return initial, objective


def _forward_with(net, tensors, batch, dropout_seed):
    """Forward pass of 'net' with its parameter tensors replaced by 'tensors'"""
    named = net.named_parameters()
    for (name, _), tensor in zip(named.items(), tensors):
        kind, k, rest = name.split(".", 2)
        if kind == "extractor":
            net.extractors[int(k)].params[rest] = tensor
        else:
            setattr(net.classifiers[int(k)], rest, tensor)
    net.rng = np.random.default_rng(dropout_seed)
    return net.forward(batch, "train").scores


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def relative_error(analytic, numeric):
    a, n = np.max(np.abs(analytic)), np.max(np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric)) / max(a, n, 1e-8))


def check_case(builder, rng, step=STEP, max_coords=MAX_COORDS):
    """Largest relative error over the inputs of one random instance"""
    arrays, fn = builder(rng)
    weights = None

    def scalar(values):
        nonlocal weights
        tensors = [ad.Tensor(v, requires_grad=True) for v in values]
        out = fn(tensors)
        if weights is None:
            weights = rng.standard_normal(out.shape) if out.ndim else np.ones(())
        return _contract(out, weights), tensors

    loss, tensors = scalar(arrays)
    loss.backward()
    worst = 0.0
    for i, array in enumerate(arrays):
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros(array.shape)
        flat = np.arange(array.size)
        if array.size > max_coords:
            flat = np.sort(rng.choice(array.size, size=max_coords, replace=False))
        numeric = np.zeros(len(flat))
        for j, index in enumerate(flat):
            coord = np.unravel_index(index, array.shape)
            probe = [a.copy() for a in arrays]
            probe[i][coord] += step
            up = scalar(probe)[0].item()
            probe[i][coord] -= 2 * step
            down = scalar(probe)[0].item()
            numeric[j] = (up - down) / (2 * step)
        worst = max(worst, relative_error(analytic.reshape(-1)[flat], numeric))
    return worst


@dataclasses.dataclass
class GradcheckReport:
    max_errors: dict
    n_seeds: int
    tolerance: float

    @property
    def failures(self):
        return sorted(name for name, err in self.max_errors.items() if not err < self.tolerance)

    @property
    def passed(self):
        return not self.failures

    def lines(self):
        out = ["%-26s %.3e  %s" % (name, err, "ok" if err < self.tolerance else "FAIL")
               for name, err in self.max_errors.items()]
        out.append("%s (%d seeds, tolerance %g)"
                   % ("PASS" if self.passed else "FAIL", self.n_seeds, self.tolerance))
        return out

    def to_dict(self):
        return {"max_errors": self.max_errors, "n_seeds": self.n_seeds,
                "tolerance": self.tolerance, "passed": self.passed,
                "failures": self.failures}


def gradcheck(n_seeds=20, seed=0, cases=None, tolerance=TOLERANCE):
    """Run every case (or the named ones) for n_seeds random instances"""
    names = list(CASES) if cases is None else list(cases)
    errors = collections.OrderedDict()
    order = list(CASES)
    for name in names:
        worst = 0.0
        for instance in range(n_seeds):
            rng = np.random.default_rng([seed, order.index(name), instance])
            worst = max(worst, check_case(CASES[name], rng))
        errors[name] = worst
        log.debug("gradcheck %s: max relative error %.3e", name, worst)
    return GradcheckReport(errors, n_seeds, tolerance)
