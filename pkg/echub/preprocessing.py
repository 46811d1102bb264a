"""preprocessing - filtering, resampling, cropping and covariance alignment

The standard pipeline for a raw recording is

    notch -> bandpass 4-38 Hz -> resample to 100 Hz -> 4 s crops

followed by session-wise alignment of the cropped trials: every trial
of a session is whitened by the inverse square root of a reference
covariance (arithmetic mean of the session's trial covariances for
Euclidean alignment, affine-invariant geometric mean for Riemannian
alignment).
"""

import dataclasses
import fractions
import logging
import math

import numpy as np
from scipy import signal

from echub.errors import (AlignmentError, ConvergenceError, ParameterError,
                          ShapeError, ValidationError)

log = logging.getLogger(__name__)

SHRINKAGE = 1e-8
MAX_CONDITION = 1e12


@dataclasses.dataclass
class RawRecording:
    """Continuous multichannel signal; events are (onset sample, label)"""
    data: np.ndarray
    fs: float
    events: list
    subject_id: int = 0
    session_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.fs <= 0:
            raise ParameterError("sampling rate must be positive")
        n = self.data.shape[-1]
        for onset, _ in self.events:
            if not 0 <= onset < n:
                raise ValidationError("event onset %d outside [0, %d)" % (onset, n))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass
class Trial:
    data: np.ndarray
    label: int
    subject_id: int
    session_id: int = 0


class SPDMatrix(object):
    """Symmetric positive-definite matrix"""

    def __init__(self, values, check=True):
        self.values = np.asarray(values, dtype=np.float64)
        if check:
            self._validate()

    def _validate(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError("SPD matrix must be square, got %s" % (v.shape,))
        if np.max(np.abs(v - v.T)) > 1e-10 * max(1.0, np.max(np.abs(v))):
            raise ValidationError("matrix is not symmetric")
        if np.min(np.linalg.eigvalsh(v)) <= 0:
            raise ValidationError("matrix is not positive definite")

    @property
    def dim(self):
        return self.values.shape[0]

    def __repr__(self):
        return "SPDMatrix(dim=%d)" % self.dim


@dataclasses.dataclass(frozen=True)
class PreprocessConfig:
    notch_freq: float = 50.0
    notch_quality: float = 30.0
    band: tuple = (4.0, 38.0)
    filter_order: int = 4
    target_fs: float = 100.0
    crop_seconds: float = 4.0
    alignment: str = "riemann"
    strict_alignment: bool = False


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------

def notch_filter(rec, freq=50.0, quality=30.0):
    """Second-order IIR notch, run forward and backward"""
    nyquist = rec.fs / 2.0
    if not 0 < freq < nyquist:
        raise ParameterError("notch at %g Hz is outside (0, %g)" % (freq, nyquist))
    b, a = signal.iirnotch(freq, quality, fs=rec.fs)
    return rec.replace(data=signal.filtfilt(b, a, rec.data, axis=-1))


def bandpass(rec, low=4.0, high=38.0, order=4):
    """Butterworth bandpass, zero phase"""
    nyquist = rec.fs / 2.0
    if not 0 < low < high < nyquist:
        raise ParameterError("band %g-%g Hz is not inside (0, %g)" % (low, high, nyquist))
    sos = signal.butter(order, [low, high], btype="bandpass", fs=rec.fs, output="sos")
    return rec.replace(data=signal.sosfiltfilt(sos, rec.data, axis=-1))


def resample(rec, target_fs=100.0):
    """Polyphase downsampling; event onsets are rescaled and rounded"""
    if target_fs > rec.fs:
        raise ParameterError("upsampling from %g to %g Hz is not supported"
                             % (rec.fs, target_fs))
    ratio = fractions.Fraction(target_fs / rec.fs).limit_denominator(10000)
    n_in = rec.data.shape[-1]
    n_out = int(math.floor(n_in * target_fs / rec.fs + 0.5))
    if ratio == 1:
        data = rec.data.copy()
    else:
        data = signal.resample_poly(rec.data, ratio.numerator, ratio.denominator, axis=-1)
    data = data[..., :n_out]
    events = []
    for onset, label in rec.events:
        new_onset = int(math.floor(onset * target_fs / rec.fs + 0.5))
        if new_onset < n_out:
            events.append((new_onset, label))
    return rec.replace(data=data, fs=float(target_fs), events=events)


def crop_trials(rec, seconds=4.0):
    """One trial per event, 'seconds' long from the onset

    Events whose window runs past the end of the recording are
    dropped and counted in a warning.
    """
    window = int(round(seconds * rec.fs))
    n = rec.data.shape[-1]
    trials = []
    dropped = 0
    for onset, label in rec.events:
        if onset + window > n:
            dropped += 1
            continue
        trials.append(Trial(data=rec.data[:, onset:onset + window].copy(), label=int(label),
                            subject_id=rec.subject_id, session_id=rec.session_id))
    if dropped:
        log.warning("subject %s session %s: dropped %d event(s) too close to the end",
                    rec.subject_id, rec.session_id, dropped)
    return trials


def preprocess_recording(rec, cfg=PreprocessConfig()):
    """notch -> bandpass -> resample -> crop (alignment is per session, later)"""
    rec = notch_filter(rec, cfg.notch_freq, cfg.notch_quality)
    rec = bandpass(rec, cfg.band[0], cfg.band[1], cfg.filter_order)
    rec = resample(rec, cfg.target_fs)
    return crop_trials(rec, cfg.crop_seconds)


# ---------------------------------------------------------------------------
# SPD geometry
# ---------------------------------------------------------------------------

def _eig_apply(values, fn):
    w, v = np.linalg.eigh(values)
    out = (v * fn(w)) @ v.T
    return (out + out.T) / 2.0


def sqrtm(mat):
    return _eig_apply(_values(mat), np.sqrt)


def invsqrtm(mat):
    return _eig_apply(_values(mat), lambda w: 1.0 / np.sqrt(w))


def logm(mat):
    return _eig_apply(_values(mat), np.log)


def expm(mat):
    return _eig_apply(_values(mat), np.exp)


def _values(mat):
    return mat.values if isinstance(mat, SPDMatrix) else np.asarray(mat, dtype=np.float64)


def covariance(trial, shrinkage=SHRINKAGE):
    """(1/T) X Xᵀ of the channel-centred trial plus a trace-scaled ridge

    With shrinkage=0 the plain sample covariance comes back unchecked;
    it may be singular.
    """
    x = trial.data if isinstance(trial, Trial) else np.asarray(trial, dtype=np.float64)
    x = np.atleast_2d(x)
    n_channels, n_samples = x.shape
    centred = x - x.mean(axis=1, keepdims=True)
    cov = centred @ centred.T / n_samples
    level = np.trace(cov) / n_channels
    if level <= 0:
        level = 1.0
    cov = cov + shrinkage * level * np.eye(n_channels)
    return SPDMatrix((cov + cov.T) / 2.0, check=shrinkage > 0)


def _well_conditioned(values):
    w = np.linalg.eigvalsh(values)
    return w[0] > 0 and w[-1] / w[0] <= MAX_CONDITION


def spd_mean(mats, mode="geometric", max_iter=50, tol=1e-10, step=1.0):
    """Arithmetic mean, or the affine-invariant (Karcher) mean

    The geometric mean is found by fixed-point iteration: map every
    matrix to the tangent space at the current estimate, average
    there, and step back along the geodesic.
    """
    if not mats:
        raise ParameterError("spd_mean needs at least one matrix")
    arrays = [_values(m) for m in mats]
    dim = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != dim:
            raise ShapeError("cannot average SPD matrices of shapes %s and %s" % (dim, a.shape))
    arithmetic = np.mean(arrays, axis=0)
    if mode == "arithmetic":
        return SPDMatrix((arithmetic + arithmetic.T) / 2.0)
    if mode != "geometric":
        raise ParameterError("unknown mean %r" % (mode,))

    current = (arithmetic + arithmetic.T) / 2.0
    residual = np.inf
    for iteration in range(max_iter):
        root = sqrtm(current)
        inv_root = invsqrtm(current)
        tangent = np.mean([logm(inv_root @ a @ inv_root) for a in arrays], axis=0)
        residual = np.linalg.norm(tangent, "fro")
        if residual < tol:
            log.debug("geometric mean converged after %d iterations", iteration)
            return SPDMatrix(current)
        current = root @ expm(step * tangent) @ root
        current = (current + current.T) / 2.0
    raise ConvergenceError("geometric mean did not converge in %d iterations (residual %g)"
                           % (max_iter, residual), last_iterate=current, residual=residual)


def align(trials, reference):
    """Replace every trial's data by R^(-1/2) X"""
    values = _values(reference)
    w = np.linalg.eigvalsh(values)
    if not _well_conditioned(values):
        raise AlignmentError("reference covariance is near singular (condition %g)"
                             % (w[-1] / w[0] if w[0] > 0 else np.inf))
    whitener = invsqrtm(values)
    out = []
    for trial in trials:
        if trial.data.shape[0] != values.shape[0]:
            raise ShapeError("trial has %d channels, reference %d"
                             % (trial.data.shape[0], values.shape[0]))
        out.append(dataclasses.replace(trial, data=whitener @ trial.data))
    return out


def session_reference(trials, mode="riemann"):
    """Mean trial covariance of one session

    The plain sample covariances are used whenever they can be; the
    ridged ones only when a trial (riemann) or the mean (euclid) is
    singular. An already aligned session then has the identity as its
    reference.
    """
    geometric = mode == "riemann"
    covs = [covariance(t, shrinkage=0.0) for t in trials]
    if geometric and all(_well_conditioned(c.values) for c in covs):
        return spd_mean(covs, "geometric")
    if not geometric and _well_conditioned(np.mean([c.values for c in covs], axis=0)):
        return spd_mean(covs, "arithmetic")
    return spd_mean([covariance(t) for t in trials], "geometric" if geometric else "arithmetic")


def align_sessions(trials, mode="riemann", strict_subjects=None):
    """Session-wise alignment of a list of trials

    Each (subject, session) is whitened by its own reference. With
    'strict_subjects' given, sessions of those subjects instead use
    the mean of the references of all other sessions (no statistics
    are taken from them).
    """
    if mode == "none":
        return list(trials)
    if mode not in ("riemann", "euclid"):
        raise ParameterError("unknown alignment %r" % (mode,))
    groups = {}
    for index, trial in enumerate(trials):
        groups.setdefault((trial.subject_id, trial.session_id), []).append(index)
    strict = set(strict_subjects or ())

    references = {key: session_reference([trials[i] for i in idx], mode)
                  for key, idx in groups.items() if key[0] not in strict}
    if strict:
        if not references:
            raise AlignmentError("strict alignment needs at least one reference session")
        pooled = spd_mean(list(references.values()),
                          "geometric" if mode == "riemann" else "arithmetic")

    out = [None] * len(trials)
    for key, idx in groups.items():
        reference = references.get(key, pooled if strict else None)
        for i, trial in zip(idx, align([trials[i] for i in idx], reference)):
            out[i] = trial
    return out
