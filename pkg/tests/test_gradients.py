"""Finite-difference verification of every differentiable operation.

The heavier 20-seed sweep runs in the acceptance module; here each check runs
over a handful of seeds so failures localize quickly.
"""

import numpy as np
import pytest

from stereobev.gradcheck import check_gradients, directional_check, relative_error
from stereobev.gradsuite import NETWORK_CHECKS, OPERATOR_CHECKS
from stereobev.tensor import Tensor

TOLERANCE = 1e-4


@pytest.mark.parametrize("name", sorted(OPERATOR_CHECKS))
def test_operator_gradients(name):
    worst = max(OPERATOR_CHECKS[name](np.random.default_rng(seed)) for seed in range(5))
    assert worst < TOLERANCE, f"{name}: max relative error {worst:.3e}"


@pytest.mark.parametrize("name", sorted(NETWORK_CHECKS))
def test_network_gradients(name):
    worst = max(NETWORK_CHECKS[name](np.random.default_rng(seed)) for seed in range(3))
    assert worst < TOLERANCE, f"{name}: max relative error {worst:.3e}"


def test_relative_error_floor_behavior():
    # tiny gradients compare against the absolute floor, large ones relatively
    assert relative_error(np.array([0.0]), np.array([5e-8])) < TOLERANCE
    assert relative_error(np.array([0.0]), np.array([5e-4])) > TOLERANCE
    assert relative_error(np.array([1.0]), np.array([1.0 + 5e-5])) < TOLERANCE
    assert relative_error(np.array([1.0]), np.array([1.01])) > TOLERANCE


def test_check_gradients_catches_wrong_vjp():
    # a deliberately broken gradient must be detected
    from stereobev.tensor import _make

    def bad_double(x):
        return _make(x.data * 2.0, (x,), lambda g: (g * 1.5,))

    x = Tensor(np.random.default_rng(0).normal(size=(3,)), requires_grad=True)
    err = check_gradients(lambda: bad_double(x).sum(), [x])
    assert err > 0.1


def test_directional_check_catches_wrong_vjp():
    from stereobev.tensor import _make

    def bad_square(x):
        return _make(x.data**2, (x,), lambda g: (g * 3.0 * x.data,))

    x = Tensor(np.random.default_rng(1).normal(size=(8,)), requires_grad=True)
    err = directional_check(lambda: bad_square(x).sum(), [x], np.random.default_rng(2))
    assert err > 0.1
