import numpy as np
import pytest

from simbl.errors import ContractViolation
from simbl.optim import SGD, Adam
from simbl.tensor import Tensor


def reference_adam(x0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook scalar Adam, independent of the package implementation."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    return x


def test_zero_grad_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for opt in (Adam([p], lr=0.1), SGD([p], lr=0.1)):
        opt.step([np.zeros(2)])
        assert np.allclose(p.data, [1.0, -2.0])


def test_first_adam_step_is_minus_lr_times_sign():
    p = Tensor(0.0, requires_grad=True)
    Adam([p], lr=0.1).step([np.asarray(0.5)])
    # bias correction makes mhat=g, vhat=g^2, so the step is -lr*g/(|g|+eps')
    assert p.data == pytest.approx(-0.1, rel=1e-6)


def test_adam_matches_reference_trajectory():
    rng = np.random.default_rng(3)
    grads = rng.normal(size=20)
    p = Tensor(0.7, requires_grad=True)
    opt = Adam([p], lr=0.05)
    for g in grads:
        opt.step([np.asarray(g)])
    assert float(p.data) == pytest.approx(reference_adam(0.7, grads, 0.05), abs=1e-14)


def test_sgd_definition():
    p = Tensor(1.0, requires_grad=True)
    SGD([p], lr=0.1).step([np.asarray(2.0)])
    assert p.data == pytest.approx(0.8)


def test_paper_learning_rates_accepted():
    p = Tensor(0.0, requires_grad=True)
    Adam([p], lr=1e-3)
    Adam([p], lr=1e-4)
    SGD([p], lr=1e-4)


def test_shape_mismatch_rejected():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ContractViolation):
        Adam([p], lr=0.1).step([np.zeros(4)])
    with pytest.raises(ContractViolation):
        SGD([p], lr=0.1).step([np.zeros((3, 1))])


def test_step_reads_grads_from_tensors():
    p = Tensor(np.ones(2), requires_grad=True)
    (p * p).sum().backward()
    SGD([p], lr=0.5).step()
    assert np.allclose(p.data, [0.0, 0.0])


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam([p], lr=0.2)
    for _ in range(400):
        (p * p).sum().backward()
        opt.step()
    assert np.max(np.abs(p.data)) < 1e-3
