import numpy as np
import pytest

from echub import autodiff as ad
from echub.gradcheck import (CASES, TOLERANCE, GradcheckReport, check_case, gradcheck,
                             relative_error)


class WrongSquare(ad.Function):
    """x**2 with the gradient off by a factor of two"""
    op = "wrong_square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, grad):
        return (grad * self.x,)


def test_every_operation_is_covered():
    expected = {"add", "mul", "scale", "add_n", "mean", "reshape", "weighted_mean", "log",
                "elu", "softmax", "log_softmax", "cross_entropy", "linear", "dropout",
                "avg_pool_time", "batch_norm", "conv_temporal", "conv_spatial_depthwise",
                "conv_temporal_depthwise", "conv_pointwise", "loss_total"}
    assert set(CASES) == expected


def test_all_gradients_match_finite_differences():
    report = gradcheck(n_seeds=20, seed=0)
    assert report.failures == [], "\n".join(report.lines())
    assert all(err < TOLERANCE for err in report.max_errors.values())


def test_a_wrong_gradient_is_caught():
    def builder(rng):
        return [rng.standard_normal((3, 2)) + 2.0], lambda t: WrongSquare.apply(t[0])

    assert check_case(builder, np.random.default_rng(0)) > 0.1


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)


def test_report():
    report = GradcheckReport({"add": 1e-9, "log": 3e-3}, n_seeds=4, tolerance=1e-4)
    assert report.failures == ["log"]
    assert not report.passed
    assert report.lines()[-1] == "FAIL (4 seeds, tolerance 0.0001)"
    assert report.to_dict()["failures"] == ["log"]


def test_selected_cases_only():
    report = gradcheck(n_seeds=2, cases=["softmax", "linear"])
    assert list(report.max_errors) == ["softmax", "linear"]
    assert report.passed
