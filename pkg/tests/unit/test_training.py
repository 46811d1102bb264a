import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from echub import autodiff as ad
from echub.errors import ConfigError, ContractError
from echub.model import load_checkpoint
from echub.training import (SGD, RunManifest, TrainConfig, batches, evaluate, fit,
                            lr_for_epoch, sgd_step, train)


class TestConfig:
    def test_lr_steps_down_halfway(self):
        cfg = TrainConfig()
        assert cfg.step_epoch == 60
        assert lr_for_epoch(cfg, 59) == 0.01
        assert lr_for_epoch(cfg, 60) == 0.002
        assert lr_for_epoch(cfg.replace(lr_step_epoch=10), 10) == 0.002

    def test_baselines_train_with_plain_cross_entropy(self):
        with pytest.raises(ConfigError) as e:
            TrainConfig(method="single", loss_mode="total")
        assert e.value.stage == "loss_mode"
        assert TrainConfig(method="single", loss_mode="ce").members == 1
        assert TrainConfig(method="posthoc", loss_mode="ce", n_models=4).members == 4

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(n_models=1)
        with pytest.raises(ConfigError):
            TrainConfig(loss_mode="kd")
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr_step_epoch=500)
        with pytest.raises(ConfigError) as e:
            TrainConfig.from_dict({"epoch": 3})
        assert e.value.stage == "epoch"

    def test_lambda_subj_follows_k(self):
        assert TrainConfig(n_models=5).distill_config().lambda_subj == 5.0
        assert TrainConfig(n_models=5, lambda_subj=2.0).distill_config().lambda_subj == 2.0


class TestOptimizer:
    def test_two_momentum_steps(self):
        theta = ad.Tensor(np.array([1.0]), requires_grad=True)
        state = []
        sgd_step([theta], [np.array([0.5])], state, lr=0.1, momentum=0.9, weight_decay=0.01)
        assert_allclose(theta.data, [0.949])
        sgd_step([theta], [np.array([0.5])], state, lr=0.1, momentum=0.9, weight_decay=0.01)
        assert_allclose(theta.data, [0.852151])

    def test_plain_momentum_steps(self):
        theta = ad.Tensor(np.array([1.0]), requires_grad=True)
        state = []
        sgd_step([theta], [np.array([1.0])], state, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert_allclose(theta.data, [0.9])
        sgd_step([theta], [np.array([1.0])], state, lr=0.1, momentum=0.9, weight_decay=0.0)
        assert_allclose(theta.data, [0.71])

    def test_missing_gradient_still_decays(self):
        theta = ad.Tensor(np.array([2.0]), requires_grad=True)
        sgd_step([theta], [None], [], lr=0.5, momentum=0.0, weight_decay=0.1)
        assert_allclose(theta.data, [1.9])

    def test_mismatches(self):
        theta = ad.Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ContractError):
            sgd_step([theta], [], [], lr=0.1)
        with pytest.raises(ContractError):
            sgd_step([theta], [np.ones(3)], [], lr=0.1)

    def test_sgd_uses_tensor_gradients(self):
        theta = ad.Tensor(np.array([3.0, -1.0]), requires_grad=True)
        optimizer = SGD([theta], momentum=0.0, weight_decay=0.0)
        ad.reduce_mean(ad.mul(theta, theta)).backward()
        optimizer.step(0.5)
        assert_allclose(theta.data, [1.5, -0.5])
        optimizer.zero_grad()
        assert theta.grad is None


@pytest.mark.parametrize("n, sizes", [(9, [4, 4]), (10, [4, 4, 2]), (8, [4, 4]), (1, [1])])
def test_batches(n, sizes):
    assert [len(b) for b in batches(np.arange(n), 4)] == sizes


class TestFit:
    def test_manifest_and_files(self, tiny_cfg, tiny_corpus, tiny_plan, tmp_path):
        run_dir = str(tmp_path / "run")
        net, manifest = fit(tiny_cfg, tiny_corpus, tiny_plan, run_dir)

        assert manifest.run_id == "cv-fold0"
        assert len(manifest.epochs) == tiny_cfg.epochs
        val_curve = [e["val_accuracy"] for e in manifest.epochs]
        assert manifest.best_epoch == int(np.argmax(val_curve))
        assert manifest.best_val_accuracy == max(val_curve)
        assert manifest.partition["K"] == 2
        assert sorted(int(s) for s in manifest.partition["assignment"]) == \
            list(tiny_plan.train)
        assert manifest.n_parameters == net.count_parameters()
        assert len(manifest.test["member_accuracies"]) == 2
        assert sum(map(sum, manifest.test["confusion"])) == manifest.test["n_trials"]

        for name in ("manifest.json", "metrics.jsonl", "checkpoint.bin"):
            assert os.path.exists(os.path.join(run_dir, name))
        assert RunManifest.load(os.path.join(run_dir, "manifest.json")) == manifest

    def test_metrics_rows(self, tiny_cfg, tiny_corpus, tiny_plan, tmp_path):
        run_dir = str(tmp_path)
        fit(tiny_cfg, tiny_corpus, tiny_plan, run_dir)
        with open(os.path.join(run_dir, "metrics.jsonl")) as f:
            rows = [json.loads(line) for line in f]
        epochs = [r for r in rows if r["type"] == "epoch"]
        assert [r["epoch"] for r in epochs] == [0, 1, 2]
        assert [r["alpha"] for r in epochs] == [1.0, 1.0 - 1 / 3, 1.0 - 2 / 3]
        assert epochs[0]["total_distill"] == 0.0
        assert all(r["type"] == "batch" for r in rows if "batch" in r)
        assert all("started" not in r and "wall_clock_seconds" not in r for r in rows)

    def test_checkpoint_holds_the_selected_weights(self, tiny_cfg, tiny_corpus, tiny_plan,
                                                   tmp_path):
        net, manifest = fit(tiny_cfg, tiny_corpus, tiny_plan, str(tmp_path))
        restored = load_checkpoint(manifest.checkpoint)
        val = evaluate(restored, tiny_corpus.select(tiny_plan.val))
        assert val.accuracy == manifest.best_val_accuracy
        assert val.accuracy == manifest.epochs[manifest.best_epoch]["val_accuracy"]
        test = evaluate(restored, tiny_corpus.select(tiny_plan.test))
        assert test.accuracy == manifest.test_accuracy

    def test_total_without_distillation_is_the_subject_loss(self, tiny_cfg, tiny_corpus,
                                                           tiny_plan, tmp_path):
        fit(tiny_cfg.replace(loss_mode="subj"), tiny_corpus, tiny_plan, str(tmp_path / "subj"))
        fit(tiny_cfg.replace(loss_mode="total", lambda_distill=0.0), tiny_corpus, tiny_plan,
            str(tmp_path / "total"))
        streams = [(tmp_path / name / "metrics.jsonl").read_bytes() for name in ("subj", "total")]
        assert streams[0] == streams[1]

    def test_runs_are_reproducible(self, tiny_cfg, tiny_corpus, tiny_plan, tmp_path):
        for name in ("a", "b"):
            fit(tiny_cfg, tiny_corpus, tiny_plan, str(tmp_path / name))
        metrics = [(tmp_path / name / "metrics.jsonl").read_bytes() for name in ("a", "b")]
        assert metrics[0] == metrics[1]

    def test_single_model_baseline(self, tiny_cfg, tiny_corpus, tiny_plan):
        cfg = tiny_cfg.replace(method="single", loss_mode="ce")
        net, manifest = fit(cfg, tiny_corpus, tiny_plan)
        assert net.n_models == 1
        assert manifest.partition is None
        assert manifest.checkpoint is None

    def test_posthoc_baseline(self, tiny_cfg, tiny_corpus, tiny_plan):
        cfg = tiny_cfg.replace(method="posthoc", loss_mode="ce", n_models=3)
        net, manifest = fit(cfg, tiny_corpus, tiny_plan)
        assert net.kind == "posthoc"
        assert len(net.classifiers) == 3
        assert len(manifest.val["member_accuracies"]) == 3

    def test_train_returns_the_manifest(self, tiny_cfg, tiny_corpus, tiny_plan):
        manifest = train(tiny_cfg.replace(epochs=1), tiny_corpus, tiny_plan.to_dict(),
                         run_id="custom")
        assert isinstance(manifest, RunManifest)
        assert manifest.run_id == "custom"
        assert manifest.best_epoch == 0


def test_evaluate_empty_corpus(tiny_cfg, tiny_corpus, tiny_plan):
    net, _ = fit(tiny_cfg.replace(epochs=1), tiny_corpus, tiny_plan)
    empty = tiny_corpus.take(np.array([], dtype=int))
    result = evaluate(net, empty)
    assert result.n_trials == 0 and result.accuracy == 0.0
