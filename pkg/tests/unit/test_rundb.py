import json
import os

import pytest

from echub.rundb import RunTable


def fake_manifest(run_id, loss_mode="total", test_accuracy=0.75, n_epochs=3):
    epochs = [{"type": "epoch", "epoch": e, "lr": 0.01, "alpha": 1.0 - e / n_epochs,
               "total": 1.0 / (e + 1), "total_subj": 0.5, "total_distill": 0.1 * e,
               "val_accuracy": 0.5 + 0.1 * e} for e in range(n_epochs)]
    return {"run_id": run_id,
            "config": {"method": "ensemble", "loss_mode": loss_mode, "n_models": 3, "seed": 0},
            "extractor": {}, "partition": None,
            "split": {"name": run_id, "mode": "cv"},
            "epochs": epochs, "best_epoch": n_epochs - 1,
            "val": {"accuracy": 0.7}, "test": {"accuracy": test_accuracy},
            "n_parameters": 1234, "checkpoint": None, "started": "2026-01-01T00:00:00",
            "wall_clock_seconds": 1.0}


def fake_report(report_id, accuracies):
    return {"report_id": report_id, "mode": "cv", "config": {},
            "runs": [{"run_id": "cv-fold%d" % i, "test_accuracy": a}
                     for i, a in enumerate(accuracies)],
            "test_accuracies": accuracies,
            "mean_test_accuracy": sum(accuracies) / len(accuracies),
            "mean_val_accuracy": None, "partial": False, "failed": None}


def write_json(path, data):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f)
    return path


@pytest.fixture
def results(tmp_path):
    root = tmp_path / "runs"
    write_json(str(root / "ce-K3" / "cv-fold0" / "manifest.json"),
               fake_manifest("cv-fold0", "ce", 0.6))
    write_json(str(root / "ce-K3" / "cv-fold1" / "manifest.json"),
               fake_manifest("cv-fold1", "ce", 0.8))
    write_json(str(root / "ce-K3" / "report.json"), fake_report("ce-K3", [0.6, 0.8]))
    write_json(str(root / "single-run" / "manifest.json"), fake_manifest("single-run"))
    write_json(str(root / ".hidden" / "manifest.json"), fake_manifest("hidden"))
    return str(root)


@pytest.fixture
def rundb(results):
    table = RunTable(watch=False)
    table.add(results, watch=False)
    yield table
    table.close()


def test_runs_are_named_by_folder(rundb):
    ids = [run["run_id"] for run in rundb.get_runs()]
    assert ids == ["ce-K3.cv-fold0", "ce-K3.cv-fold1", "single-run"]


def test_filters(rundb):
    assert [r["run_id"] for r in rundb.get_runs("fold1")] == ["ce-K3.cv-fold1"]
    assert [r["run_id"] for r in rundb.get_runs("^single*")] == ["single-run"]
    assert [r["run_id"] for r in rundb.get_runs(loss_mode="total")] == ["single-run"]
    assert rundb.get_runs("nothing-like-this") == []


def test_run_summary_and_manifest(rundb):
    summary = rundb.get_runs("ce-K3.cv-fold1")[0]
    assert summary["test_accuracy"] == 0.8
    assert summary["name"] == "cv-fold1"
    assert summary["split"] == "cv-fold1"
    assert rundb.get_run("ce-K3.cv-fold1")["test"]["accuracy"] == 0.8
    assert rundb.get_run("no-such-run") is None


def test_epochs_in_order(rundb):
    epochs = rundb.get_epochs("single-run")
    assert [e["epoch"] for e in epochs] == [0, 1, 2]
    assert epochs[2]["val_accuracy"] == pytest.approx(0.7)
    assert rundb.get_epochs("no-such-run") == []


def test_reports(rundb):
    reports = rundb.get_reports()
    assert [r["report_id"] for r in reports] == ["ce-K3"]
    assert reports[0]["n_runs"] == 2
    assert reports[0]["mean_test_accuracy"] == pytest.approx(0.7)
    assert rundb.get_report("ce-K3")["test_accuracies"] == [0.6, 0.8]
    assert rundb.get_report("missing") is None


def test_reindex_after_change(rundb, results):
    path = write_json(os.path.join(results, "single-run", "manifest.json"),
                      fake_manifest("single-run", test_accuracy=0.9, n_epochs=5))
    rundb.on_change(path, "modified", root=results)
    assert rundb.get_runs("single-run")[0]["test_accuracy"] == 0.9
    assert len(rundb.get_epochs("single-run")) == 5
    assert len(rundb.get_runs()) == 3


def test_half_written_files_are_skipped(tmp_path):
    root = tmp_path / "runs"
    os.makedirs(str(root / "broken"))
    (root / "broken" / "manifest.json").write_text('{"run_id": ')
    write_json(str(root / "partial" / "manifest.json"), {"run_id": "partial"})
    table = RunTable(watch=False)
    table.add(str(root), watch=False)
    assert table.get_runs() == []
    table.on_change(str(root / "broken" / "manifest.json"), "modified", root=str(root))
    table.close()


def test_glob_to_sql():
    table = RunTable(watch=False)
    assert table._glob_to_sql("cv-fold?") == "%cv-fold_%"
    assert table._glob_to_sql("^ce*$") == "ce%"
    assert table._glob_to_sql("50%") == "%50\\%%"
    assert table._glob_to_sql("cv_fold") == "%cv\\_fold%"
    assert table._glob_to_sql("a\\*b") == "%a*b%"
    table.close()


def test_sql_wildcards_in_patterns_are_literal(tmp_path):
    root = tmp_path / "runs"
    for run_id in ("50%-run", "500-run", "cv_fold0", "cvxfold0"):
        write_json(str(root / run_id / "manifest.json"), fake_manifest(run_id))
    table = RunTable(watch=False)
    table.add(str(root), watch=False)
    assert [r["run_id"] for r in table.get_runs("50%")] == ["50%-run"]
    assert [r["run_id"] for r in table.get_runs("cv_fold")] == ["cv_fold0"]
    assert [r["run_id"] for r in table.get_runs("cv?fold")] == ["cv_fold0", "cvxfold0"]
    table.close()
