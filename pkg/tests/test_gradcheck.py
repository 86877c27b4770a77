"""Tests for the finite-difference gradient checker."""
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

import core.tensor as tensor_module
from core.gradcheck import grad_check, op_suite
from core.tensor import NonFiniteError, ShapeError, scale, sqrt, square, supported_ops, tsum


def test_every_op_passes_on_several_seeds():
    for seed in range(3):
        reports = op_suite(np.random.default_rng(seed))
        assert set(reports) == set(supported_ops())
        failed = {op: r.max_error for op, r in reports.items() if not r.passed}
        assert not failed, failed


def test_grad_check_reports_per_parameter():
    params = {"a": np.array([1.0, 2.0]), "b": np.array([[0.5]])}
    report = grad_check(lambda p: tsum(square(p["a"])) + tsum(p["b"]) * 0.0, params)
    assert set(report.errors) == {"a", "b"}
    assert report.passed


def test_tight_tolerance_catches_truncation_error():
    # Close to zero the central difference of sqrt is off in the third digit.
    report = grad_check(lambda p: tsum(sqrt(p["x"])), {"x": np.array([1e-5])}, h=1e-6, tol=1e-12)
    assert not report.passed


def test_max_entries_limits_the_sample():
    params = {"w": np.ones(50)}
    report = grad_check(lambda p: tsum(square(p["w"])), params, max_entries=3)
    assert report.passed


def test_rejects_bad_step_and_vector_output():
    with pytest.raises(ValueError):
        grad_check(lambda p: tsum(p["x"]), {"x": np.ones(2)}, h=0.0)
    with pytest.raises(ShapeError):
        grad_check(lambda p: square(p["x"]), {"x": np.ones(2)})


def test_nonfinite_perturbation_raises():
    with pytest.raises(NonFiniteError):
        grad_check(lambda p: tsum(sqrt(p["x"])), {"x": np.array([1e-7])}, h=1e-6)


def test_wrong_backward_fails_for_small_gradients():
    rule = tensor_module._OPS["scale"]
    wrong = replace(rule, backward=lambda g, out, ctx, a, factor: (3.0 * g * factor,))
    params = {"x": np.array([0.3, -1.2, 2.0])}
    assert grad_check(lambda p: tsum(scale(p["x"], 1e-5)), params).passed
    with patch.dict(tensor_module._OPS, {"scale": wrong}):
        report = grad_check(lambda p: tsum(scale(p["x"], 1e-5)), params)
    assert not report.passed
    assert report.max_error == pytest.approx(2.0 / 3.0, rel=1e-3)


def test_zero_gradient_matches_exactly():
    report = grad_check(lambda p: tsum(square(p["a"])) + tsum(p["b"]) * 0.0,
                        {"a": np.array([1e-3]), "b": np.array([4.0])})
    assert report.errors["b"] == 0.0
    assert report.passed
