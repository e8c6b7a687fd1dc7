import numpy as np
import pytest

from derain_app import ops
from derain_app.config import MICRO
from derain_app.gradcheck import (
    KERNEL_CHECKS,
    check_function,
    check_network,
    coordinate_error,
    relative_error,
    run_suite,
)


class _WrongTanh(ops.Tanh):
    name = "wrong_tanh"

    def backward(self, grad):
        return (grad * (1.0 - self.out),)


@pytest.mark.parametrize("name", sorted(KERNEL_CHECKS))
def test_kernel_gradients(name):
    result = KERNEL_CHECKS[name](np.random.default_rng(7))
    assert result.passed, f"{name}: {result.max_rel_error:.3e}"
    assert result.coordinates > 0


def test_micro_network_gradient():
    result = check_network(MICRO, np.random.default_rng(0))
    assert result.passed, f"{result.max_rel_error:.3e}"
    assert result.coordinates == 32


def test_broken_backward_is_caught():
    def wrong(rng):
        x = rng.uniform(-1, 1, (2, 3, 3))
        return check_function("wrong_tanh", lambda t: _WrongTanh()(t), [x], rng)

    report = run_suite(names=["tanh", "wrong_tanh"], extra={"wrong_tanh": wrong})
    assert not report.passed
    assert report.failures == ["wrong_tanh"]
    assert "wrong_tanh" in report.to_table() and "FAIL" in report.to_table()


def test_unknown_check_name():
    with pytest.raises(ValueError, match="nope"):
        run_suite(names=["nope"])


def test_unknown_scale():
    with pytest.raises(ValueError):
        run_suite(scale="huge", names=["relu"])


def test_relative_error_is_scale_free():
    a = np.array([1.0, -2.0, 4.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(a, a * 1.01) == pytest.approx(relative_error(a * 1e3, a * 1.01e3))
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_coordinate_error_catches_a_wrong_small_coordinate():
    analytic = np.array([10.0, -4.0, 0.2])
    numeric = np.array([10.0, -4.0, -0.2])
    assert relative_error(analytic, numeric) < 0.05
    assert coordinate_error(analytic, numeric) == pytest.approx(2.0)


def test_coordinate_error_floor_absorbs_vanishing_coordinates():
    analytic = np.array([1.0, 0.0])
    numeric = np.array([1.0, 1e-9])
    assert coordinate_error(analytic, numeric) == pytest.approx(1e-7)
    assert coordinate_error(np.zeros(3), np.zeros(3)) == 0.0
