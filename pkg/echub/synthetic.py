"""synthetic - multi-subject motor imagery corpora with controllable shift

Every trial is a set of 8-12 Hz band-limited sources, one per channel.
The channel group that belongs to the trial's class loses part of its
power (an event-related desynchronization), pink noise is added, and
the result is mixed spatially by the subject's matrix

    A_n = I + sigma_mix * E_n        (spectral norm of the term <= 0.9)

and, per session, by a second smaller perturbation of the same form.
Subjects are independent: subject n only ever draws from the stream
seeded with (seed, n).
"""

import concurrent.futures
import dataclasses
import logging

import numpy as np
from scipy import signal

from echub.corpus import TrialCorpus
from echub.errors import ConfigError
from echub.preprocessing import RawRecording

log = logging.getLogger(__name__)

MAX_SHIFT_NORM = 0.9
SOURCE_BAND = (8.0, 12.0)


@dataclasses.dataclass(frozen=True)
class GeneratorSpec:
    n_subjects: int = 12
    n_sessions: int = 2
    trials_per_class: int = 20
    channels: int = 8
    fs: float = 100.0
    trial_seconds: float = 4.0
    n_classes: int = 2
    sigma_mix: float = 0.5
    noise: float = 0.5
    session_shift: float = 0.1
    erd: float = 0.4
    seed: int = 0
    # continuous recordings only
    raw_fs: float = 160.0
    rest_seconds: float = 1.0
    hum_freq: float = 50.0
    hum_amplitude: float = 2.0
    dc_offset: float = 5.0

    def __post_init__(self):
        for name in ("n_subjects", "n_sessions", "trials_per_class", "channels",
                     "n_classes", "fs", "trial_seconds", "raw_fs", "rest_seconds"):
            if getattr(self, name) <= 0:
                raise ConfigError("%s must be positive" % name, stage=name)
        for name in ("sigma_mix", "noise", "session_shift", "hum_amplitude"):
            if getattr(self, name) < 0:
                raise ConfigError("%s must be non-negative" % name, stage=name)
        if not 0 <= self.erd < 1:
            raise ConfigError("erd must be in [0, 1)", stage="erd")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes", stage="n_classes")
        if self.n_classes > self.channels:
            raise ConfigError("need at least one channel per class", stage="channels")
        if self.fs <= 2 * SOURCE_BAND[1]:
            raise ConfigError("fs must be above %g Hz" % (2 * SOURCE_BAND[1]), stage="fs")

    @property
    def samples(self):
        return int(round(self.trial_seconds * self.fs))

    @classmethod
    def from_dict(cls, data):
        known = set(f.name for f in dataclasses.fields(cls))
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("unknown generator keys: %s" % ", ".join(unknown),
                              stage=unknown[0])
        return cls(**data)

    def to_dict(self):
        return dataclasses.asdict(self)


def subject_rng(seed, subject):
    return np.random.default_rng([seed, subject])


def mixing_matrix(rng, channels, strength):
    """I + strength * E with the perturbation's spectral norm clipped"""
    shift = strength * rng.standard_normal((channels, channels)) / np.sqrt(channels)
    norm = np.linalg.norm(shift, 2)
    if norm > MAX_SHIFT_NORM:
        shift *= MAX_SHIFT_NORM / norm
    return np.eye(channels) + shift


def pink_noise(rng, shape):
    """Unit-variance noise with a 1/f power spectrum along the last axis"""
    n = shape[-1]
    spectrum = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1] if n > 1 else 1.0
    noise = np.fft.irfft(spectrum / np.sqrt(freqs), n=n, axis=-1)
    noise -= noise.mean(axis=-1, keepdims=True)
    return noise / np.maximum(noise.std(axis=-1, keepdims=True), 1e-12)


def band_sources(rng, channels, samples, fs):
    """Unit-variance 8-12 Hz band-limited noise, one row per channel"""
    sos = signal.butter(4, SOURCE_BAND, btype="bandpass", fs=fs, output="sos")
    pad = samples // 2
    raw = signal.sosfilt(sos, rng.standard_normal((channels, samples + pad)), axis=-1)[:, pad:]
    raw -= raw.mean(axis=-1, keepdims=True)
    return raw / np.maximum(raw.std(axis=-1, keepdims=True), 1e-12)


def class_gains(spec, label):
    """Per-channel amplitude: the class's channel group is attenuated"""
    groups = np.array_split(np.arange(spec.channels), spec.n_classes)
    gains = np.ones(spec.channels)
    gains[groups[label]] = 1.0 - spec.erd
    return gains


def _trial_sources(rng, spec, label, samples, fs):
    sources = band_sources(rng, spec.channels, samples, fs) * class_gains(spec, label)[:, None]
    if spec.noise > 0:
        sources = sources + spec.noise * pink_noise(rng, (spec.channels, samples))
    return sources


def _session_labels(rng, spec):
    labels = np.repeat(np.arange(spec.n_classes), spec.trials_per_class)
    return rng.permutation(labels)


def _subject_mixes(rng, spec):
    subject_mix = mixing_matrix(rng, spec.channels, spec.sigma_mix)
    return [mixing_matrix(rng, spec.channels, spec.session_shift) @ subject_mix
            for _ in range(spec.n_sessions)]


def generate_subject(spec, subject):
    """(data [N, C, T], labels, sessions) of one subject"""
    rng = subject_rng(spec.seed, subject)
    mixes = _subject_mixes(rng, spec)
    data, labels, sessions = [], [], []
    for session, mix in enumerate(mixes):
        for label in _session_labels(rng, spec):
            data.append(mix @ _trial_sources(rng, spec, label, spec.samples, spec.fs))
            labels.append(label)
            sessions.append(session)
    return np.stack(data), np.asarray(labels), np.asarray(sessions)


def _map_subjects(fn, spec, workers):
    subjects = range(spec.n_subjects)
    if workers <= 1:
        return [fn(spec, s) for s in subjects]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: fn(spec, s), subjects))


def generate(spec, workers=1):
    """Trial corpus for 'spec'; identical for any number of workers"""
    parts = _map_subjects(generate_subject, spec, workers)
    data = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    sessions = np.concatenate([p[2] for p in parts])
    subjects = np.concatenate([np.full(len(p[1]), s) for s, p in enumerate(parts)])
    log.info("generated %d trials from %d subjects (sigma_mix=%g, noise=%g)",
             len(labels), spec.n_subjects, spec.sigma_mix, spec.noise)
    return TrialCorpus(data, labels, subjects, sessions, spec.fs,
                       ["class%d" % c for c in range(spec.n_classes)])


def generate_subject_recordings(spec, subject):
    """One continuous RawRecording per session at spec.raw_fs

    Trials are separated by rest periods without desynchronization.
    Powerline hum and a DC offset are added after mixing.
    """
    rng = subject_rng(spec.seed, subject)
    mixes = _subject_mixes(rng, spec)
    fs = spec.raw_fs
    trial_len = int(round(spec.trial_seconds * fs))
    rest_len = int(round(spec.rest_seconds * fs))
    resting = dataclasses.replace(spec, erd=0.0)
    recordings = []
    for session, mix in enumerate(mixes):
        segments, events, onset = [], [], 0
        for label in _session_labels(rng, spec):
            rest = _trial_sources(rng, resting, 0, rest_len, fs)
            trial = _trial_sources(rng, spec, label, trial_len, fs)
            segments.extend([rest, trial])
            events.append((onset + rest_len, int(label)))
            onset += rest_len + trial_len
        segments.append(_trial_sources(rng, resting, 0, rest_len, fs))
        sources = np.concatenate(segments, axis=1)
        t = np.arange(sources.shape[1]) / fs
        hum = spec.hum_amplitude * np.sin(2 * np.pi * spec.hum_freq * t)
        data = mix @ sources + hum + spec.dc_offset
        recordings.append(RawRecording(data=data, fs=fs, events=events,
                                       subject_id=subject, session_id=session))
    return recordings


def generate_recordings(spec, workers=1):
    parts = _map_subjects(generate_subject_recordings, spec, workers)
    return [rec for recordings in parts for rec in recordings]
