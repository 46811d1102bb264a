"""model - EEGNet-style feature extractors and the shared classifier

An ensemble is K feature extractors with identical architecture and
independent parameters, followed by one classification head that
every extractor's features go through. At inference the K score
vectors are averaged.

The same building blocks give the two baselines: a single model
(K = 1) and a post-training ensemble where each member keeps its own
head.
"""

import collections
import dataclasses
import logging
import struct

import numpy as np

from echub import autodiff as ad
from echub.errors import CheckpointFormatError, ConfigError, ContractError, ShapeError

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class ExtractorConfig:
    """Sizes of one feature extractor

    The defaults land a single model at 2.5K trainable parameters for
    64 channels by 400 samples with two classes.
    """
    channels: int
    samples: int
    temporal_filters: int = 8
    depth_multiplier: int = 2
    separable_filters: int = 16
    temporal_kernel_len: int = 65
    separable_kernel_len: int = 17
    pool1: int = 4
    pool2: int = 8
    dropout_p: float = 0.25
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        for name in ("channels", "samples", "temporal_filters", "depth_multiplier",
                     "separable_filters", "temporal_kernel_len",
                     "separable_kernel_len", "pool1", "pool2"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError("%s must be a positive integer, not %r" % (name, value),
                                  stage=name)
        for name in ("temporal_kernel_len", "separable_kernel_len"):
            if getattr(self, name) % 2 != 1:
                raise ConfigError("%s must be odd" % name, stage=name)
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)", stage="dropout_p")
        self.stage_lengths()

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("unknown extractor setting(s): %s" % ", ".join(unknown),
                              stage=unknown[0])
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def stage_lengths(self):
        """Time-axis length after each stage, in order"""
        stages = [("input", self.samples)]
        length = self.samples
        for stage, window in (("pool1", self.pool1), ("pool2", self.pool2)):
            if length < window:
                raise ConfigError("%s: %d samples cannot fill a window of %d"
                                  % (stage, length, window), stage=stage)
            length = (length - window) // window + 1
            stages.append((stage, length))
        return stages

    @property
    def spatial_maps(self):
        return self.temporal_filters * self.depth_multiplier

    @property
    def feature_dim(self):
        return self.separable_filters * self.stage_lengths()[-1][1]


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class FeatureExtractor(object):
    """temporal conv -> BN -> depthwise spatial conv -> BN -> ELU -> pool ->
    dropout -> separable conv -> BN -> ELU -> pool -> dropout -> flatten"""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        f1, d, f2 = cfg.temporal_filters, cfg.depth_multiplier, cfg.separable_filters
        maps = cfg.spatial_maps
        l1, l2 = cfg.temporal_kernel_len, cfg.separable_kernel_len
        self.params = collections.OrderedDict()
        self.params["temporal.weight"] = _glorot(rng, (f1, 1, 1, l1), l1, f1 * l1)
        self.params["bn1.gamma"] = np.ones(f1)
        self.params["bn1.beta"] = np.zeros(f1)
        self.params["spatial.weight"] = _glorot(rng, (maps, 1, cfg.channels, 1),
                                                cfg.channels, d * cfg.channels)
        self.params["bn2.gamma"] = np.ones(maps)
        self.params["bn2.beta"] = np.zeros(maps)
        self.params["separable.depthwise"] = _glorot(rng, (maps, 1, 1, l2), l2, l2)
        self.params["separable.pointwise"] = _glorot(rng, (f2, maps, 1, 1), maps, f2)
        self.params["bn3.gamma"] = np.ones(f2)
        self.params["bn3.beta"] = np.zeros(f2)
        for name, value in self.params.items():
            self.params[name] = ad.Tensor(value, requires_grad=True, name=name)
        self.bn = collections.OrderedDict(
            (name, ad.BatchNormState(n, cfg.bn_momentum, cfg.bn_eps))
            for name, n in (("bn1", f1), ("bn2", maps), ("bn3", f2)))

    def __call__(self, x, mode, rng=None):
        p, cfg = self.params, self.cfg
        h = ad.conv_temporal(x, p["temporal.weight"])
        h = ad.batch_norm(h, p["bn1.gamma"], p["bn1.beta"], self.bn["bn1"], mode)
        h = ad.conv_spatial_depthwise(h, p["spatial.weight"])
        h = ad.batch_norm(h, p["bn2.gamma"], p["bn2.beta"], self.bn["bn2"], mode)
        h = ad.elu(h)
        h = ad.avg_pool_time(h, cfg.pool1)
        h = ad.dropout(h, cfg.dropout_p, mode, rng)
        h = ad.conv_temporal_depthwise(h, p["separable.depthwise"])
        h = ad.conv_pointwise(h, p["separable.pointwise"])
        h = ad.batch_norm(h, p["bn3.gamma"], p["bn3.beta"], self.bn["bn3"], mode)
        h = ad.elu(h)
        h = ad.avg_pool_time(h, cfg.pool2)
        h = ad.dropout(h, cfg.dropout_p, mode, rng)
        return ad.flatten(h)

    def parameters(self):
        return list(self.params.values())

    def buffers(self):
        """Running batch-norm moments, by name"""
        out = collections.OrderedDict()
        for name, state in self.bn.items():
            out[name + ".running_mean"] = state.running_mean
            out[name + ".running_var"] = state.running_var
        return out

    def load_buffers(self, buffers):
        for name, state in self.bn.items():
            state.running_mean = np.array(buffers[name + ".running_mean"])
            state.running_var = np.array(buffers[name + ".running_var"])


def build_extractor(cfg, rng):
    """A freshly initialized extractor; 'rng' is a numpy Generator"""
    return FeatureExtractor(cfg, rng)


class Classifier(object):
    """Affine map from the feature dimension to N_C class scores"""

    def __init__(self, feature_dim, n_classes, rng):
        self.weight = ad.Tensor(_glorot(rng, (n_classes, feature_dim), feature_dim, n_classes),
                                requires_grad=True, name="weight")
        self.bias = ad.Tensor(np.zeros(n_classes), requires_grad=True, name="bias")

    def __call__(self, features):
        return ad.linear(features, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


ForwardOutput = collections.namedtuple("ForwardOutput", ["features", "scores"])


class ModelStack(object):
    """K extractors feeding either one shared head or one head each"""

    kind = "stack"

    def __init__(self, cfg, n_classes, extractors, classifiers, rng=None):
        if n_classes < 2:
            raise ConfigError("need at least two classes", stage="n_classes")
        if len(classifiers) not in (1, len(extractors)):
            raise ContractError("need one shared classifier or one per extractor")
        self.cfg = cfg
        self.n_classes = n_classes
        self.extractors = list(extractors)
        self.classifiers = list(classifiers)
        self.rng = rng if rng is not None else np.random.default_rng(0)

    @property
    def n_models(self):
        return len(self.extractors)

    @property
    def shared_classifier(self):
        return len(self.classifiers) == 1

    def head(self, k):
        return self.classifiers[0] if self.shared_classifier else self.classifiers[k]

    def forward(self, batch, mode):
        """Features and scores of every member for a [B,1,C,T] batch"""
        batch = batch if isinstance(batch, ad.Tensor) else ad.Tensor(batch)
        expected = (1, self.cfg.channels, self.cfg.samples)
        if batch.ndim != 4 or batch.shape[1:] != expected:
            raise ShapeError("batch %s does not match [B, %d, %d, %d]"
                             % ((batch.shape,) + expected), axes=("1", "C", "T"))
        features = [extractor(batch, mode, self.rng) for extractor in self.extractors]
        scores = [self.head(k)(f) for k, f in enumerate(features)]
        return ForwardOutput(features, scores)

    def named_parameters(self):
        out = collections.OrderedDict()
        for k, extractor in enumerate(self.extractors):
            for name, tensor in extractor.params.items():
                out["extractor.%d.%s" % (k, name)] = tensor
        for k, classifier in enumerate(self.classifiers):
            out["classifier.%d.weight" % k] = classifier.weight
            out["classifier.%d.bias" % k] = classifier.bias
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for tensor in self.parameters():
            tensor.zero_grad()

    def state_dict(self):
        """Copies of every parameter and batch-norm buffer, by name"""
        state = collections.OrderedDict(
            (name, tensor.data.copy()) for name, tensor in self.named_parameters().items())
        for k, extractor in enumerate(self.extractors):
            for name, value in extractor.buffers().items():
                state["extractor.%d.%s" % (k, name)] = value.copy()
        return state

    def load_state_dict(self, state):
        for name, tensor in self.named_parameters().items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise ShapeError("%s: stored shape %s, expected %s"
                                 % (name, value.shape, tensor.shape), axes=(name,))
            tensor.data = value.copy()
        for k, extractor in enumerate(self.extractors):
            prefix = "extractor.%d." % k
            extractor.load_buffers({name[len(prefix):]: value for name, value in state.items()
                                    if name.startswith(prefix)})

    def count_parameters(self):
        return int(sum(tensor.size for tensor in self.parameters()))

    def predict(self, batch):
        """Class index per sample from the fused eval-mode scores"""
        with ad.no_grad():
            out = self.forward(batch, "eval")
        return predict_from_scores(fuse_scores(out.scores))


class EnsembleNetwork(ModelStack):
    """K >= 2 extractors and exactly one shared classifier"""

    kind = "ensemble"

    def __init__(self, cfg, n_classes, extractors, classifier, rng=None):
        if len(extractors) < 2:
            raise ConfigError("an ensemble needs K >= 2 extractors", stage="n_models")
        ModelStack.__init__(self, cfg, n_classes, extractors, [classifier], rng)

    @property
    def classifier(self):
        return self.classifiers[0]


class SingleModel(ModelStack):
    kind = "single"

    def __init__(self, cfg, n_classes, extractor, classifier, rng=None):
        ModelStack.__init__(self, cfg, n_classes, [extractor], [classifier], rng)


class PosthocEnsemble(ModelStack):
    """K independent models, each with its own head, fused at inference"""

    kind = "posthoc"


def build_network(cfg, n_classes, n_models=2, kind="ensemble", seed=0):
    """Initialize a network of the given kind from one integer seed

    Parameters and dropout masks draw from separate child streams of
    the seed so that two networks built alike are identical.
    """
    init_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    if kind == "single":
        n_models = 1
    extractors = [build_extractor(cfg, init_rng) for _ in range(n_models)]
    if kind == "ensemble":
        return EnsembleNetwork(cfg, n_classes, extractors,
                               Classifier(cfg.feature_dim, n_classes, init_rng), dropout_rng)
    if kind == "single":
        return SingleModel(cfg, n_classes, extractors[0],
                           Classifier(cfg.feature_dim, n_classes, init_rng), dropout_rng)
    if kind == "posthoc":
        heads = [Classifier(cfg.feature_dim, n_classes, init_rng) for _ in range(n_models)]
        return PosthocEnsemble(cfg, n_classes, extractors, heads, dropout_rng)
    raise ConfigError("unknown network kind %r" % (kind,), stage="method")


def fuse_scores(scores):
    """(1/K) * sum_k scores_k

    Tensors in, Tensor out (differentiable); anything else comes back
    as a numpy array.
    """
    if len(scores) < 1:
        raise ShapeError("nothing to fuse")
    if all(isinstance(s, ad.Tensor) for s in scores):
        return ad.mean(scores)
    return ad.mean([ad.Tensor(np.asarray(s, dtype=np.float64)) for s in scores]).data


def predict_from_scores(fused):
    """argmax per row; np.argmax picks the first maximum on ties"""
    data = fused.data if isinstance(fused, ad.Tensor) else np.asarray(fused)
    return np.argmax(np.atleast_2d(data), axis=1)


def predict(net, batch):
    return net.predict(batch)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ECHKPT01"
CHECKPOINT_VERSION = 1
_KINDS = ("ensemble", "single", "posthoc")
_INT_FIELDS = ("channels", "samples", "temporal_filters", "depth_multiplier",
               "separable_filters", "temporal_kernel_len", "separable_kernel_len",
               "pool1", "pool2")
_HEADER = struct.Struct("<8sHBII" + "I" * len(_INT_FIELDS) + "ddd")


def save_checkpoint(net, path):
    """Write parameters and batch-norm buffers in the echub binary layout

    header: magic, version, kind, K, N_C, ExtractorConfig fields
    then per tensor: name length, name, rank, dims, little-endian f64
    """
    cfg = net.cfg
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _KINDS.index(net.kind),
                          net.n_models, net.n_classes,
                          *[getattr(cfg, name) for name in _INT_FIELDS],
                          cfg.dropout_p, cfg.bn_momentum, cfg.bn_eps)
    state = net.state_dict()
    with open(path, "wb") as f:
        f.write(header)
        f.write(struct.pack("<I", len(state)))
        for name, value in state.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", value.ndim))
            f.write(struct.pack("<%dI" % value.ndim, *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild the network saved by save_checkpoint"""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("%s is not an echub checkpoint" % path)
    fields = _HEADER.unpack_from(blob, 0)
    version, kind_index, n_models, n_classes = fields[1:5]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError("unsupported checkpoint version %d" % version)
    ints = dict(zip(_INT_FIELDS, fields[5:5 + len(_INT_FIELDS)]))
    dropout_p, bn_momentum, bn_eps = fields[5 + len(_INT_FIELDS):]
    cfg = ExtractorConfig(dropout_p=dropout_p, bn_momentum=bn_momentum, bn_eps=bn_eps, **ints)

    offset = _HEADER.size
    try:
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        state = collections.OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from("<%dI" % rank, blob, offset)
            offset += 4 * rank
            n_values = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(blob, dtype="<f8", count=n_values, offset=offset)
            offset += 8 * n_values
            state[name] = values.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as e:
        raise CheckpointFormatError("truncated checkpoint %s: %s" % (path, e))

    net = build_network(cfg, n_classes, n_models=n_models, kind=_KINDS[kind_index])
    net.load_state_dict(state)
    return net
