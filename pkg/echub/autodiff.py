"""autodiff - dense float64 tensors with reverse-mode differentiation

Every operation is a Function subclass. Function.apply runs the
forward pass on plain numpy arrays, remembers its input tensors and
whatever it needs for the backward pass, and hands back a Tensor that
points at it. Tensor.backward walks that record in reverse
topological order.

Only the operations the ensemble network and its losses need are
here. There is no general broadcasting: binary operations want
identical shapes, and scaling by a python number is its own operation.
"""

import contextlib
import logging
import threading

import numpy as np

from echub.errors import (ContractError, DegenerateBatchError,
                          ParameterError, ShapeError, ValidationError)

log = logging.getLogger(__name__)

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording anything for backward()"""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor(object):
    """An n-dimensional float64 array that knows where it came from"""

    def __init__(self, data, requires_grad=False, _ctx=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._ctx = _ctx

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = " name=%r" % self.name if self.name else ""
        op = " op=%s" % self._ctx.op if self._ctx is not None else ""
        return "Tensor(shape=%s%s%s requires_grad=%s)" % (
            self.shape, label, op, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(t) into t.grad for every tensor t upstream

        Gradients add onto whatever is already stored in .grad; call
        zero_grad() on the parameters between steps.
        """
        if self.data.ndim != 0:
            raise ContractError("backward() needs a scalar loss, got shape %s"
                                % (self.shape,))
        if not self.requires_grad:
            return

        graph = ComputationGraph(self)
        grads = {id(self): np.ones_like(self.data)}
        for tensor in reversed(graph.tensors):
            grad = grads.get(id(tensor))
            if grad is None or tensor._ctx is None:
                continue
            ctx = tensor._ctx
            for parent, parent_grad in zip(ctx.parents, ctx.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

        for tensor in graph.tensors:
            grad = grads.get(id(tensor))
            if grad is None:
                grad = np.zeros_like(tensor.data)
            if tensor.grad is None:
                tensor.grad = np.array(grad, dtype=np.float64)
            else:
                tensor.grad = tensor.grad + grad


class ComputationGraph(object):
    """Tensors reachable from a root through differentiable operations

    'tensors' is in topological order: a tensor always comes after
    the inputs of the operation that produced it.
    """

    def __init__(self, root):
        self.root = root
        self.tensors = self._topological_order(root)

    @property
    def nodes(self):
        return [t._ctx for t in self.tensors if t._ctx is not None]

    def ops(self):
        return [node.op for node in self.nodes]

    @staticmethod
    def _topological_order(root):
        # iterative post-order; deep networks would blow the recursion limit
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            if tensor._ctx is not None:
                for parent in tensor._ctx.parents:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order


class Function(object):
    """One recorded operation: forward on arrays, backward on gradients"""

    op = None

    def __init__(self):
        self.parents = ()

    @classmethod
    def apply(cls, *tensors, **kwargs):
        ctx = cls()
        ctx.parents = tensors
        data = ctx.forward(*[t.data for t in tensors], **kwargs)
        requires_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(data, requires_grad=requires_grad,
                      _ctx=ctx if requires_grad else None)

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        """Return one gradient (or None) per parent"""
        raise NotImplementedError


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError("%s: shapes %s and %s differ" % (what, a.shape, b.shape),
                         axes=tuple(i for i in range(max(a.ndim, b.ndim))
                                    if i >= min(a.ndim, b.ndim) or a.shape[i] != b.shape[i]))


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

class Add(Function):
    op = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    op = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    op = "scale"

    def forward(self, x, factor):
        self.factor = float(factor)
        return x * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class AddN(Function):
    op = "add_n"

    def forward(self, *arrays):
        total = arrays[0].copy()
        for array in arrays[1:]:
            total = total + array
        return total

    def backward(self, grad):
        return tuple(grad for _ in self.parents)


class MeanN(Function):
    op = "mean"

    def forward(self, *arrays):
        self.count = len(arrays)
        total = arrays[0].copy()
        for array in arrays[1:]:
            total = total + array
        return total / self.count

    def backward(self, grad):
        return tuple(grad / self.count for _ in self.parents)


class Reshape(Function):
    op = "reshape"

    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class WeightedMean(Function):
    op = "weighted_mean"

    def forward(self, x, weights, denominator):
        self.weights = weights
        self.denominator = float(denominator)
        return np.asarray(np.sum(weights * x) / self.denominator)

    def backward(self, grad):
        return (grad * self.weights / self.denominator,)


class Log(Function):
    op = "log"

    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Elu(Function):
    op = "elu"

    def forward(self, x, alpha):
        self.positive = x > 0
        self.alpha = alpha
        self.negative_out = alpha * np.expm1(np.minimum(x, 0.0))
        return np.where(self.positive, x, self.negative_out)

    def backward(self, grad):
        local = np.where(self.positive, 1.0, self.negative_out + self.alpha)
        return (grad * local,)


def _softmax(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def _log_softmax(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


class Softmax(Function):
    op = "softmax"

    def forward(self, x, axis):
        self.axis = axis
        self.y = _softmax(x, axis)
        return self.y

    def backward(self, grad):
        inner = np.sum(grad * self.y, axis=self.axis, keepdims=True)
        return (self.y * (grad - inner),)


class LogSoftmax(Function):
    op = "log_softmax"

    def forward(self, x, axis):
        self.axis = axis
        out = _log_softmax(x, axis)
        self.softmax = np.exp(out)
        return out

    def backward(self, grad):
        total = np.sum(grad, axis=self.axis, keepdims=True)
        return (grad - self.softmax * total,)


class CrossEntropyPerSample(Function):
    op = "cross_entropy"

    def forward(self, scores, target):
        self.target = target
        self.log_probs = _log_softmax(scores, axis=1)
        self.probs = np.exp(self.log_probs)
        return -np.sum(target * self.log_probs, axis=1)

    def backward(self, grad):
        g = grad[:, None]
        row_mass = np.sum(self.target, axis=1, keepdims=True)
        grad_scores = g * (self.probs * row_mass - self.target)
        grad_target = -g * self.log_probs
        return grad_scores, grad_target


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear(Function):
    op = "linear"

    def forward(self, x, weight, bias):
        self.x, self.weight = x, weight
        return x @ weight.T + bias

    def backward(self, grad):
        return grad @ self.weight, grad.T @ self.x, grad.sum(axis=0)


class Dropout(Function):
    op = "dropout"

    def forward(self, x, p, rng):
        self.mask = (rng.random(x.shape) >= p) / (1.0 - p)
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class AvgPoolTime(Function):
    op = "avg_pool_time"

    def forward(self, x, window, stride):
        n_in = x.shape[-1]
        n_out = (n_in - window) // stride + 1
        self.window, self.stride, self.n_in, self.n_out = window, stride, n_in, n_out
        windows = np.lib.stride_tricks.sliding_window_view(x, window, axis=-1)
        return windows[..., ::stride, :][..., :n_out, :].mean(axis=-1)

    def backward(self, grad):
        shape = grad.shape[:-1] + (self.n_in,)
        out = np.zeros(shape)
        share = grad / self.window
        last = self.stride * (self.n_out - 1) + 1
        for offset in range(self.window):
            out[..., offset:offset + last:self.stride] += share
        return (out,)


class BatchNorm(Function):
    op = "batch_norm"

    def forward(self, x, gamma, beta, state, mode):
        self.axes = tuple(i for i in range(x.ndim) if i != 1)
        view = [1] * x.ndim
        view[1] = x.shape[1]
        self.view = tuple(view)
        self.gamma = gamma
        self.mode = mode
        if mode == "train":
            count = x.size // x.shape[1]
            mean = x.mean(axis=self.axes)
            var = x.var(axis=self.axes)
            state.update(mean, var * count / (count - 1))
            self.count = count
        else:
            mean, var = state.running_mean, state.running_var
        self.invstd = 1.0 / np.sqrt(var + state.eps)
        self.xhat = (x - mean.reshape(self.view)) * self.invstd.reshape(self.view)
        return gamma.reshape(self.view) * self.xhat + beta.reshape(self.view)

    def backward(self, grad):
        grad_gamma = np.sum(grad * self.xhat, axis=self.axes)
        grad_beta = np.sum(grad, axis=self.axes)
        dxhat = grad * self.gamma.reshape(self.view)
        invstd = self.invstd.reshape(self.view)
        if self.mode == "train":
            n = self.count
            sum_dxhat = np.sum(dxhat, axis=self.axes, keepdims=True)
            sum_dxhat_xhat = np.sum(dxhat * self.xhat, axis=self.axes, keepdims=True)
            grad_x = invstd / n * (n * dxhat - sum_dxhat - self.xhat * sum_dxhat_xhat)
        else:
            grad_x = dxhat * invstd
        return grad_x, grad_gamma, grad_beta


class ConvTemporal(Function):
    """[B,1,C,T] * [F,1,1,L] -> [B,F,C,T], zero padded, cross-correlation"""
    op = "conv_temporal"

    def forward(self, x, kernels):
        n_time = x.shape[3]
        length = kernels.shape[3]
        pad = length // 2
        self.n_time, self.length, self.pad = n_time, length, pad
        self.xp = np.pad(x[:, 0], ((0, 0), (0, 0), (pad, pad)))
        self.w = kernels[:, 0, 0, :]
        out = np.zeros((x.shape[0], kernels.shape[0], x.shape[2], n_time))
        for tap in range(length):
            out += (self.xp[:, None, :, tap:tap + n_time]
                    * self.w[:, tap][None, :, None, None])
        return out

    def backward(self, grad):
        n_time, length = self.n_time, self.length
        grad_w = np.zeros_like(self.w)
        grad_xp = np.zeros_like(self.xp)
        for tap in range(length):
            window = self.xp[:, :, tap:tap + n_time]
            grad_w[:, tap] = np.tensordot(grad, window, axes=([0, 2, 3], [0, 1, 2]))
            grad_xp[:, :, tap:tap + n_time] += np.tensordot(
                self.w[:, tap], grad, axes=([0], [1]))
        grad_x = grad_xp[:, None, :, self.pad:self.pad + n_time]
        return grad_x, grad_w[:, None, None, :]


class ConvSpatialDepthwise(Function):
    """[B,F,C,T] * [F*D,1,C,1] -> [B,F*D,1,T]; output map o reads input map o // D"""
    op = "conv_spatial_depthwise"

    def forward(self, x, kernels):
        self.depth = kernels.shape[0] // x.shape[1]
        self.in_shape = x.shape
        self.xr = np.repeat(x, self.depth, axis=1)
        self.w = kernels[:, 0, :, 0]
        return np.einsum("oc,boct->bot", self.w, self.xr)[:, :, None, :]

    def backward(self, grad):
        g = grad[:, :, 0, :]
        grad_w = np.einsum("bot,boct->oc", g, self.xr)
        grad_xr = np.einsum("bot,oc->boct", g, self.w)
        b, f, c, t = self.in_shape
        grad_x = grad_xr.reshape(b, f, self.depth, c, t).sum(axis=2)
        return grad_x, grad_w[:, None, :, None]


class ConvTemporalDepthwise(Function):
    """[B,M,H,T] * [M,1,1,L] -> [B,M,H,T]: one temporal kernel per map"""
    op = "conv_temporal_depthwise"

    def forward(self, x, kernels):
        n_time = x.shape[3]
        length = kernels.shape[3]
        pad = length // 2
        self.n_time, self.length, self.pad = n_time, length, pad
        self.xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (pad, pad)))
        self.w = kernels[:, 0, 0, :]
        out = np.zeros(x.shape)
        for tap in range(length):
            out += self.xp[..., tap:tap + n_time] * self.w[:, tap][None, :, None, None]
        return out

    def backward(self, grad):
        n_time = self.n_time
        grad_w = np.zeros_like(self.w)
        grad_xp = np.zeros_like(self.xp)
        for tap in range(self.length):
            window = self.xp[..., tap:tap + n_time]
            grad_w[:, tap] = np.einsum("bmht,bmht->m", grad, window)
            grad_xp[..., tap:tap + n_time] += grad * self.w[:, tap][None, :, None, None]
        grad_x = grad_xp[..., self.pad:self.pad + n_time]
        return grad_x, grad_w[:, None, None, :]


class ConvPointwise(Function):
    """[B,M,H,T] * [F,M,1,1] -> [B,F,H,T]"""
    op = "conv_pointwise"

    def forward(self, x, kernels):
        self.x = x
        self.w = kernels[:, :, 0, 0]
        return np.tensordot(self.w, x, axes=([1], [1])).transpose(1, 0, 2, 3)

    def backward(self, grad):
        grad_x = np.tensordot(self.w, grad, axes=([0], [1])).transpose(1, 0, 2, 3)
        grad_w = np.tensordot(grad, self.x, axes=([0, 2, 3], [0, 2, 3]))
        return grad_x, grad_w[:, :, None, None]


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

class BatchNormState(object):
    """Running moments of one batch-norm layer"""

    def __init__(self, n_features, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.momentum = momentum
        self.eps = eps

    def update(self, mean, var):
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * mean
        self.running_var = (1.0 - m) * self.running_var + m * var


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ParameterError("mode must be 'train' or 'eval', not %r" % (mode,))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return Add.apply(a, b)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return Mul.apply(a, b)


def scale(x, factor):
    return Scale.apply(_as_tensor(x), factor=factor)


def add_n(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("add_n needs at least one tensor")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "add_n")
    return AddN.apply(*tensors)


def mean(tensors):
    """Elementwise mean of a list of same-shaped tensors"""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("mean needs at least one tensor")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "mean")
    return MeanN.apply(*tensors)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def flatten(x):
    """Keep the batch axis, fold everything else into one"""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def weighted_mean(x, weights, denominator):
    """sum(weights * x) / denominator, weights being constants"""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise ShapeError("weights %s do not match input %s" % (weights.shape, x.shape))
    return WeightedMean.apply(x, weights=weights, denominator=denominator)


def reduce_mean(x):
    return weighted_mean(x, np.ones(x.shape), x.size)


def log(x):
    return Log.apply(_as_tensor(x))


def elu(x, alpha=1.0):
    return Elu.apply(x, alpha=alpha)


def softmax(x, axis=-1):
    return Softmax.apply(_as_tensor(x), axis=axis)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(_as_tensor(x), axis=axis)


def linear(x, weight, bias):
    if x.ndim != 2 or weight.shape[1] != x.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError("linear: input %s, weight %s, bias %s"
                         % (x.shape, weight.shape, bias.shape), axes=("input.1", "weight.1"))
    return Linear.apply(x, weight, bias)


def dropout(x, p, mode, rng=None):
    if not 0.0 <= p < 1.0:
        raise ParameterError("dropout probability must be in [0, 1), not %r" % (p,))
    _check_mode(mode)
    if mode == "eval":
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    return Dropout.apply(x, p=p, rng=rng)


def avg_pool_time(x, window, stride=None):
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ParameterError("pool window and stride must be positive")
    if x.shape[-1] < window:
        raise ShapeError("cannot pool %d samples with a window of %d"
                         % (x.shape[-1], window), axes=("T",))
    return AvgPoolTime.apply(x, window=window, stride=stride)


def batch_norm(x, gamma, beta, state, mode):
    _check_mode(mode)
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batch_norm: input %s, gamma %s, beta %s"
                         % (x.shape, gamma.shape, beta.shape), axes=("input.1",))
    if mode == "train" and x.shape[0] < 2:
        raise DegenerateBatchError("batch_norm in train mode needs more than one sample")
    return BatchNorm.apply(x, gamma, beta, state=state, mode=mode)


def conv_temporal(x, kernels):
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError("conv_temporal wants 4-d input and kernels, got %s and %s"
                         % (x.shape, kernels.shape), axes=("ndim",))
    if x.shape[1] != 1 or kernels.shape[1:3] != (1, 1):
        raise ShapeError("conv_temporal: input %s, kernels %s"
                         % (x.shape, kernels.shape), axes=("input.1", "kernel.1", "kernel.2"))
    if kernels.shape[3] % 2 != 1:
        raise ShapeError("conv_temporal needs an odd kernel length, got %d"
                         % kernels.shape[3], axes=("kernel.3",))
    return ConvTemporal.apply(x, kernels)


def conv_spatial_depthwise(x, kernels):
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError("conv_spatial_depthwise wants 4-d input and kernels",
                         axes=("ndim",))
    if kernels.shape[2] != x.shape[2]:
        raise ShapeError("spatial kernel spans %d channels, input has %d"
                         % (kernels.shape[2], x.shape[2]), axes=("input.C", "kernel.C"))
    if kernels.shape[1] != 1 or kernels.shape[3] != 1 or kernels.shape[0] % x.shape[1]:
        raise ShapeError("conv_spatial_depthwise: input %s, kernels %s"
                         % (x.shape, kernels.shape), axes=("input.F", "kernel.0"))
    return ConvSpatialDepthwise.apply(x, kernels)


def conv_temporal_depthwise(x, kernels):
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[0] != x.shape[1] \
            or kernels.shape[1:3] != (1, 1):
        raise ShapeError("conv_temporal_depthwise: input %s, kernels %s"
                         % (x.shape, kernels.shape), axes=("input.1", "kernel.0"))
    if kernels.shape[3] % 2 != 1:
        raise ShapeError("conv_temporal_depthwise needs an odd kernel length",
                         axes=("kernel.3",))
    return ConvTemporalDepthwise.apply(x, kernels)


def conv_pointwise(x, kernels):
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[1] != x.shape[1] \
            or kernels.shape[2:] != (1, 1):
        raise ShapeError("conv_pointwise: input %s, kernels %s"
                         % (x.shape, kernels.shape), axes=("input.1", "kernel.1"))
    return ConvPointwise.apply(x, kernels)


def _check_target(target):
    if np.any(target < 0):
        raise ValidationError("cross_entropy target has negative entries")
    worst = np.max(np.abs(target.sum(axis=1) - 1.0))
    if worst > 1e-6:
        raise ValidationError("cross_entropy target rows must sum to 1 (off by %g)" % worst)


def cross_entropy_per_sample(scores, target):
    """-sum_i target_i * log(softmax(scores)_i), one value per row"""
    target = _as_tensor(target)
    if scores.ndim != 2:
        raise ShapeError("cross_entropy wants [B, N_C] scores, got %s" % (scores.shape,),
                         axes=("ndim",))
    _same_shape(scores, target, "cross_entropy")
    _check_target(target.data)
    return CrossEntropyPerSample.apply(scores, target)


def cross_entropy(scores, target):
    """Batch mean of cross_entropy_per_sample; target may be soft"""
    return reduce_mean(cross_entropy_per_sample(scores, target))


def stop_gradient(x):
    """Same values, no path back to whatever produced them"""
    return Tensor(x.data, requires_grad=False)
