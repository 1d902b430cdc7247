# tests/test_verification_service.py
import numpy as np
import pytest

import main
from models.exceptions import ConfigError
from models.schemas import CheckResult
from services import tensor_service as ts
from services.tensor_service import Tensor
from services.verification_service import (
    VerificationService,
    finite_difference_gradient,
    gradient_check,
    relative_error,
)


def quiet_service(seed=0):
    return VerificationService(seed=seed, echo=lambda line: None)


def test_finite_difference_of_quadratic():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    grad = finite_difference_gradient(lambda: float(np.sum(x.data ** 2)), x, 1e-5)
    np.testing.assert_allclose(grad, 2 * x.data, rtol=1e-8)


def test_relative_error_uses_floor():
    assert relative_error(np.array([1e-9]), np.array([0.0]), 1e-4) == pytest.approx(1e-5)
    assert relative_error(np.array([2.0]), np.array([1.0]), 1e-4) == pytest.approx(0.5)


def test_gradient_check_detects_a_wrong_backward_rule():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True, name="x")

    def broken_square(a):
        return ts._record("broken_square", a.data ** 2, (a,), lambda g: (3.0 * a.data * g,))

    assert gradient_check(lambda: ts.sum(broken_square(x)), [x])["x"] > 0.1
    assert gradient_check(lambda: ts.sum(ts.square(x)), [x])["x"] < 1e-6


def test_flops_suite_passes():
    results = quiet_service().verify("flops")
    assert results and all(r.passed for r in results)


def test_env_suite_passes():
    results = quiet_service().verify("env")
    names = {r.name for r in results}
    assert {"projection_column_sums", "interference_monotonicity", "trajectory_determinism"} <= names
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_grad_suite_passes():
    results = quiet_service().verify("grad")
    assert any(r.name == "reacritic_pipeline" for r in results)
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_unknown_suite():
    with pytest.raises(ConfigError):
        quiet_service().verify("speed")


def test_verify_prints_pass_lines():
    lines = []
    VerificationService(echo=lines.append).verify("flops")
    assert lines and all(line.startswith("[PASS]") for line in lines)


def test_cli_exit_code_on_failure(monkeypatch):
    def failing(self, suite="all"):
        return [CheckResult(suite="flops", name="forced", measured=1.0, tolerance=0.0, passed=False)]

    monkeypatch.setattr(VerificationService, "verify", failing)
    assert main.main(["verify", "--suite", "flops"]) == 3


def test_cli_verify_flops_succeeds():
    assert main.main(["verify", "--suite", "flops"]) == 0


def test_single_ops_use_tighter_tolerance_than_pipelines():
    results = {r.name: r for r in quiet_service().verify("grad")}
    assert results["layer_norm"].tolerance == pytest.approx(1e-6)
    assert results["matmul_shared_rhs"].tolerance == pytest.approx(1e-6)
    assert results["reacritic_pipeline"].tolerance == pytest.approx(1e-4)
