"""corpus - a collection of equally shaped trials and its file format

On disk a corpus is two files side by side:

    corpus.bin   header (magic, version, n_trials, C, T, fs), then one
                 record per trial: subject u32, session u16, label u16
                 and C*T little-endian f64 samples
    corpus.json  manifest: subjects, sessions per subject, class names
"""

import json
import logging
import os

import numpy as np

from echub.errors import CorpusFormatError, ShapeError, UnknownSubjectError
from echub.preprocessing import Trial, align_sessions

log = logging.getLogger(__name__)

CORPUS_MAGIC = b"ECCORPUS"
CORPUS_VERSION = 1
HEADER_DTYPE = np.dtype([("magic", "S8"), ("version", "<u2"), ("n_trials", "<u4"),
                         ("channels", "<u4"), ("samples", "<u4"), ("fs", "<f8")])


def record_dtype(channels, samples):
    return np.dtype([("subject", "<u4"), ("session", "<u2"), ("label", "<u2"),
                     ("data", "<f8", (channels, samples))])


class TrialCorpus(object):
    """Trials as parallel arrays: data [N, C, T], labels, subjects, sessions"""

    def __init__(self, data, labels, subjects, sessions, fs, class_names=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.subjects = np.asarray(subjects, dtype=np.int64)
        self.sessions = np.asarray(sessions, dtype=np.int64)
        self.fs = float(fs)
        if self.data.ndim != 3:
            raise ShapeError("corpus data must be [N, C, T], got %s" % (self.data.shape,))
        n = self.data.shape[0]
        for name in ("labels", "subjects", "sessions"):
            if getattr(self, name).shape != (n,):
                raise ShapeError("%s has shape %s for %d trials"
                                 % (name, getattr(self, name).shape, n), axes=(name,))
        n_classes = int(self.labels.max()) + 1 if n else 0
        self.class_names = list(class_names) if class_names is not None else \
            ["class%d" % c for c in range(n_classes)]

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return "TrialCorpus(trials=%d, channels=%d, samples=%d, subjects=%d)" % (
            len(self), self.n_channels, self.n_samples, len(self.subject_ids))

    @property
    def n_channels(self):
        return self.data.shape[1]

    @property
    def n_samples(self):
        return self.data.shape[2]

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def subject_ids(self):
        return sorted(int(s) for s in np.unique(self.subjects))

    def sessions_of(self, subject):
        return sorted(int(s) for s in np.unique(self.sessions[self.subjects == subject]))

    def indices_for(self, subjects):
        subjects = list(subjects)
        unknown = set(subjects) - set(self.subject_ids)
        if unknown:
            raise UnknownSubjectError("subjects %s are not in the corpus" % sorted(unknown))
        return np.flatnonzero(np.isin(self.subjects, subjects))

    def select(self, subjects):
        """Sub-corpus of the given subjects, in the original trial order"""
        return self.take(self.indices_for(subjects))

    def take(self, indices):
        return TrialCorpus(self.data[indices], self.labels[indices], self.subjects[indices],
                           self.sessions[indices], self.fs, self.class_names)

    def batch(self, indices):
        """([B,1,C,T] inputs, one-hot labels, subject ids)"""
        x = self.data[indices][:, np.newaxis, :, :]
        onehot = np.eye(self.n_classes)[self.labels[indices]]
        return x, onehot, self.subjects[indices]

    def trials(self):
        return [Trial(data=self.data[i], label=int(self.labels[i]),
                      subject_id=int(self.subjects[i]), session_id=int(self.sessions[i]))
                for i in range(len(self))]

    def aligned(self, mode="riemann", strict_subjects=None):
        """Session-wise aligned copy, see echub.preprocessing.align_sessions"""
        if mode == "none":
            return self
        return TrialCorpus.from_trials(align_sessions(self.trials(), mode, strict_subjects),
                                       self.fs, self.class_names)

    @classmethod
    def from_trials(cls, trials, fs, class_names=None):
        if not trials:
            raise ShapeError("cannot build a corpus from no trials")
        return cls(np.stack([t.data for t in trials]),
                   [t.label for t in trials],
                   [t.subject_id for t in trials],
                   [t.session_id for t in trials], fs, class_names)

    def manifest(self):
        return {"n_trials": len(self),
                "channels": self.n_channels,
                "samples": self.n_samples,
                "fs": self.fs,
                "subjects": self.subject_ids,
                "sessions": {str(s): self.sessions_of(s) for s in self.subject_ids},
                "class_names": self.class_names}

    def save(self, directory):
        """Write corpus.bin and corpus.json into 'directory'"""
        if not os.path.isdir(directory):
            os.makedirs(directory)
        header = np.zeros(1, dtype=HEADER_DTYPE)
        header[0] = (CORPUS_MAGIC, CORPUS_VERSION, len(self), self.n_channels,
                     self.n_samples, self.fs)
        records = np.zeros(len(self), dtype=record_dtype(self.n_channels, self.n_samples))
        records["subject"] = self.subjects
        records["session"] = self.sessions
        records["label"] = self.labels
        records["data"] = self.data
        with open(os.path.join(directory, "corpus.bin"), "wb") as f:
            f.write(header.tobytes())
            f.write(records.tobytes())
        with open(os.path.join(directory, "corpus.json"), "w") as f:
            json.dump(self.manifest(), f, indent=2, sort_keys=True)
        log.info("wrote %d trials to %s", len(self), directory)

    @classmethod
    def load(cls, directory):
        path = os.path.join(directory, "corpus.bin")
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except IOError as e:
            raise CorpusFormatError("cannot read %s: %s" % (path, e))
        if len(blob) < HEADER_DTYPE.itemsize:
            raise CorpusFormatError("%s is too short for a corpus header" % path)
        header = np.frombuffer(blob, dtype=HEADER_DTYPE, count=1)[0]
        if header["magic"] != CORPUS_MAGIC:
            raise CorpusFormatError("%s is not an echub corpus" % path)
        if header["version"] != CORPUS_VERSION:
            raise CorpusFormatError("unsupported corpus version %d" % header["version"])
        n, channels, samples = (int(header[k]) for k in ("n_trials", "channels", "samples"))
        dtype = record_dtype(channels, samples)
        expected = HEADER_DTYPE.itemsize + n * dtype.itemsize
        if len(blob) != expected:
            raise CorpusFormatError("%s holds %d bytes, header promises %d"
                                    % (path, len(blob), expected))
        records = np.frombuffer(blob, dtype=dtype, count=n, offset=HEADER_DTYPE.itemsize)

        class_names = None
        manifest_path = os.path.join(directory, "corpus.json")
        if os.path.exists(manifest_path):
            with open(manifest_path) as f:
                class_names = json.load(f).get("class_names")
        return cls(records["data"].astype(np.float64), records["label"], records["subject"],
                   records["session"], float(header["fs"]), class_names)
