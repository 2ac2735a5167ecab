import numpy as np
import pytest

from core.errors import NonFiniteError
from core.tensor import Tensor
from services.optimizer import Adam, MomentumState, SGDMomentum, sgd_step


def test_sgd_step_hand_values():
    state = MomentumState()
    theta = [np.array([1.0])]
    theta = sgd_step(theta, [np.array([0.5])], state, lr=0.1, momentum=0.9, weight_decay=0.1)
    assert theta[0][0] == pytest.approx(0.94)
    theta = sgd_step(theta, [np.array([0.5])], state, lr=0.1, momentum=0.9, weight_decay=0.1)
    assert theta[0][0] == pytest.approx(0.94 - 0.1 * (0.9 * 0.6 + 0.5 + 0.094))


def test_missing_gradient_still_decays():
    theta = sgd_step([np.array([2.0])], [None], MomentumState(), lr=0.5, momentum=0.0, weight_decay=0.1)
    assert theta[0][0] == pytest.approx(1.9)


def test_nonfinite_gradient_is_rejected():
    with pytest.raises(NonFiniteError):
        sgd_step([np.array([1.0])], [np.array([np.nan])], MomentumState(), lr=0.1)


def test_sgd_momentum_minimizes_quadratic():
    target = np.array([3.0, -1.0])
    p = Tensor([0.0, 0.0], requires_grad=True)
    opt = SGDMomentum([p], lr=0.05, momentum=0.9)
    for _ in range(500):
        opt.zero_grad()
        (p - target).square().sum().backward()
        opt.step()
    assert np.abs(p.data - target).max() <= 1e-6


def test_adam_maximize_ascends():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([p], lr=0.05, maximize=True)
    for _ in range(500):
        opt.zero_grad()
        (-(p - 2.0).square()).sum().backward()
        opt.step()
    assert p.data[0] == pytest.approx(2.0, abs=1e-2)
