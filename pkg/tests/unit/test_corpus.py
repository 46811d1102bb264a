import json
import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from echub.corpus import TrialCorpus
from echub.errors import CorpusFormatError, ShapeError, UnknownSubjectError


def test_basic_properties(tiny_corpus, tiny_spec):
    assert len(tiny_corpus) == 6 * 2 * 2 * 2
    assert tiny_corpus.n_channels == 3
    assert tiny_corpus.n_samples == tiny_spec.samples == 16
    assert tiny_corpus.n_classes == 2
    assert tiny_corpus.subject_ids == list(range(6))
    assert tiny_corpus.sessions_of(4) == [0, 1]


def test_select_keeps_original_order(tiny_corpus):
    part = tiny_corpus.select([3, 1])
    assert set(part.subjects) == {1, 3}
    expected = np.flatnonzero(np.isin(tiny_corpus.subjects, [1, 3]))
    assert_array_equal(part.data, tiny_corpus.data[expected])
    with pytest.raises(UnknownSubjectError):
        tiny_corpus.select([1, 99])


def test_batch_layout(tiny_corpus):
    x, y, subjects = tiny_corpus.batch(np.array([0, 5, 9]))
    assert x.shape == (3, 1, 3, 16)
    assert_array_equal(y.argmax(axis=1), tiny_corpus.labels[[0, 5, 9]])
    assert_array_equal(y.sum(axis=1), 1.0)
    assert_array_equal(subjects, tiny_corpus.subjects[[0, 5, 9]])


def test_save_and_load(tiny_corpus, tmp_path):
    directory = str(tmp_path / "corpus")
    tiny_corpus.save(directory)
    with open(os.path.join(directory, "corpus.json")) as f:
        manifest = json.load(f)
    assert manifest["n_trials"] == len(tiny_corpus)
    assert manifest["sessions"]["0"] == [0, 1]

    loaded = TrialCorpus.load(directory)
    assert_array_equal(loaded.data, tiny_corpus.data)
    assert_array_equal(loaded.labels, tiny_corpus.labels)
    assert_array_equal(loaded.subjects, tiny_corpus.subjects)
    assert_array_equal(loaded.sessions, tiny_corpus.sessions)
    assert loaded.fs == tiny_corpus.fs
    assert loaded.class_names == tiny_corpus.class_names


def test_wrong_magic(tiny_corpus, tmp_path):
    directory = str(tmp_path)
    tiny_corpus.save(directory)
    path = os.path.join(directory, "corpus.bin")
    with open(path, "rb") as f:
        blob = f.read()
    with open(path, "wb") as f:
        f.write(b"NOTCORPS" + blob[8:])
    with pytest.raises(CorpusFormatError):
        TrialCorpus.load(directory)


def test_truncated_records(tiny_corpus, tmp_path):
    directory = str(tmp_path)
    tiny_corpus.save(directory)
    path = os.path.join(directory, "corpus.bin")
    with open(path, "rb") as f:
        blob = f.read()
    with open(path, "wb") as f:
        f.write(blob[:-8])
    with pytest.raises(CorpusFormatError):
        TrialCorpus.load(directory)


def test_missing_corpus(tmp_path):
    with pytest.raises(CorpusFormatError):
        TrialCorpus.load(str(tmp_path))


def test_shapes_are_checked():
    with pytest.raises(ShapeError):
        TrialCorpus(np.zeros((4, 2)), [0, 1, 0, 1], [0] * 4, [0] * 4, 100.0)
    with pytest.raises(ShapeError):
        TrialCorpus(np.zeros((4, 2, 8)), [0, 1, 0], [0] * 4, [0] * 4, 100.0)
    with pytest.raises(ShapeError):
        TrialCorpus.from_trials([], 100.0)


def test_trials_round_trip_through_alignment_off(tiny_corpus):
    assert tiny_corpus.aligned("none") is tiny_corpus
    rebuilt = TrialCorpus.from_trials(tiny_corpus.trials(), tiny_corpus.fs,
                                      tiny_corpus.class_names)
    assert_array_equal(rebuilt.data, tiny_corpus.data)
    assert_array_equal(rebuilt.sessions, tiny_corpus.sessions)
