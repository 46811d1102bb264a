import csv
import json
import os

import pytest

from echub import experiments
from echub.errors import EchubError, ParameterError, SuiteError
from echub.experiments import AblationTable, ablate, build_report, run_suite


def test_cv_suite(tiny_cfg, tiny_corpus, tmp_path):
    out = str(tmp_path / "suite")
    report = run_suite("cv", tiny_cfg, tiny_corpus, out)

    assert report["report_id"] == "cv-total-K2-seed0"
    assert [r["run_id"] for r in report["runs"]] == ["cv-fold0", "cv-fold1", "cv-fold2"]
    accuracies = report["test_accuracies"]
    assert report["mean_test_accuracy"] == sum(accuracies) / len(accuracies)
    assert report["partial"] is False

    for fold in range(3):
        assert os.path.exists(os.path.join(out, "cv-fold%d" % fold, "manifest.json"))
    with open(os.path.join(out, "report.json")) as f:
        assert json.load(f) == report
    with open(os.path.join(out, "report.csv")) as f:
        rows = list(csv.reader(f))
    assert rows[0] == list(experiments.RUN_COLUMNS)
    assert rows[-1][0] == "mean"
    assert len(rows) == 5


def test_suites_are_byte_identical(tiny_cfg, tiny_corpus, tmp_path):
    cfg = tiny_cfg.replace(epochs=2)
    for name in ("first", "second"):
        run_suite("cv", cfg, tiny_corpus, str(tmp_path / name))
    for fold in range(3):
        paths = [tmp_path / name / ("cv-fold%d" % fold) / "metrics.jsonl"
                 for name in ("first", "second")]
        assert paths[0].read_bytes() == paths[1].read_bytes()


def test_failed_run_leaves_a_partial_report(tiny_cfg, tiny_corpus, tmp_path, monkeypatch):
    real_train = experiments.train

    def flaky_train(cfg, corpus, plan, run_dir, run_id=None):
        if plan.name == "cv-fold1":
            raise EchubError("disk full")
        return real_train(cfg, corpus, plan, run_dir, run_id=run_id)

    monkeypatch.setattr(experiments, "train", flaky_train)
    out = str(tmp_path)
    with pytest.raises(SuiteError) as e:
        run_suite("cv", tiny_cfg.replace(epochs=1), tiny_corpus, out)
    report = e.value.report
    assert report["partial"] is True
    assert report["failed"] == "cv-fold1"
    assert [r["run_id"] for r in report["runs"]] == ["cv-fold0"]
    with open(os.path.join(out, "report.json")) as f:
        assert json.load(f)["partial"] is True


def test_empty_report_has_no_mean(tiny_cfg):
    report = build_report("r", "cv", tiny_cfg, [], failed="cv-fold0")
    assert report["mean_test_accuracy"] is None
    assert report["partial"] is True


class TestAblationTable:
    table = AblationTable(loss_modes=["ce", "total"], k_values=[2, 3, 5],
                          test={("ce", 2): 0.6, ("ce", 3): 0.62, ("ce", 5): 0.61,
                                ("total", 2): 0.64, ("total", 3): 0.7, ("total", 5): 0.66},
                          val={("ce", 2): 0.7, ("ce", 3): 0.7, ("ce", 5): 0.65,
                               ("total", 2): 0.6, ("total", 3): 0.6, ("total", 5): 0.72})

    def test_best_k_prefers_validation_then_smaller_k(self):
        assert self.table.best_k("ce") == 2
        assert self.table.best_k("total") == 5

    def test_rows(self):
        rows = self.table.rows()
        assert rows[0] == ["loss_mode", "K=2", "K=3", "K=5", "best_k_by_val", "test_at_best_k"]
        assert rows[1] == ["ce", 0.6, 0.62, 0.61, 2, 0.6]
        assert rows[2] == ["total", 0.64, 0.7, 0.66, 5, 0.66]

    def test_csv(self, tmp_path):
        path = str(tmp_path / "ablation.csv")
        self.table.write_csv(path)
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[2] == ["total", "0.64", "0.7", "0.66", "5", "0.66"]


def test_ablate_runs_one_suite_per_cell(tiny_cfg, tiny_corpus, tmp_path, monkeypatch):
    calls = []

    def fake_suite(mode, cfg, corpus, output_dir=None, report_id=None):
        calls.append((cfg.loss_mode, cfg.n_models, os.path.basename(output_dir), report_id))
        score = 0.5 + 0.01 * cfg.n_models
        return {"mean_test_accuracy": score, "mean_val_accuracy": score}

    monkeypatch.setattr(experiments, "run_suite", fake_suite)
    table = ablate(tiny_cfg, tiny_corpus, [3, 2], ["ce", "subj"], mode="loso",
                   output_dir=str(tmp_path))
    assert calls == [("ce", 2, "ce-K2", "ce-K2"), ("ce", 3, "ce-K3", "ce-K3"),
                     ("subj", 2, "subj-K2", "subj-K2"), ("subj", 3, "subj-K3", "subj-K3")]
    assert table.k_values == [2, 3]
    assert table.best_k("subj") == 3
    assert os.path.exists(str(tmp_path / "ablation.csv"))


def test_ablate_skips_sizes_above_the_training_subjects(tiny_cfg, tiny_corpus, monkeypatch):
    calls = []

    def fake_suite(mode, cfg, corpus, output_dir=None, report_id=None):
        calls.append(cfg.n_models)
        return {"mean_test_accuracy": 0.5, "mean_val_accuracy": 0.5}

    monkeypatch.setattr(experiments, "run_suite", fake_suite)
    # 6 subjects in 3 folds leave 2 training subjects per fold
    table = ablate(tiny_cfg, tiny_corpus, [2, 3, 5], ["total"])
    assert calls == [2]
    assert table.k_values == [2]
    with pytest.raises(ParameterError):
        ablate(tiny_cfg, tiny_corpus, [3, 5], ["total"])
