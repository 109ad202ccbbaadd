import numpy as np
import pytest
from conftest import numeric_grad, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st

from simbl import tensor as T
from simbl.errors import ContractViolation, NumericFault


def test_tanh_grad_at_zero():
    x = T.Tensor(0.0, requires_grad=True)
    T.tanh(x).backward()
    assert x.grad == pytest.approx(1.0)


def test_quadratic_grad():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    w1 = T.Tensor(rng.normal(size=(3, 8), scale=0.5), requires_grad=True)
    b1 = T.Tensor(rng.normal(size=8, scale=0.1), requires_grad=True)
    w2 = T.Tensor(rng.normal(size=(8, 1), scale=0.5), requires_grad=True)
    b2 = T.Tensor(np.zeros(1), requires_grad=True)

    def loss_from(params):
        a, c, d, e = params
        h = T.tanh(T.affine(T.Tensor(x), a, c))
        return T.affine(h, d, e).square().mean()

    loss = loss_from([w1, b1, w2, b2])
    loss.backward()
    for p in (w1, b1, w2, b2):
        def f(v, p=p):
            keep = p.data
            p.data = v
            out = loss_from([w1, b1, w2, b2]).item()
            p.data = keep
            return out
        assert rel_err(p.grad, numeric_grad(f, p.data)) < 1e-4


_UNARY = {
    "tanh": (T.tanh, (-2.0, 2.0)),
    "sigmoid": (T.sigmoid, (-3.0, 3.0)),
    "softplus": (T.softplus, (-3.0, 3.0)),
    "relu": (T.relu, (0.1, 2.0)),
    "exp": (T.exp, (-1.0, 1.0)),
    "log": (T.log, (0.2, 3.0)),
    "sqrt": (T.sqrt, (0.2, 3.0)),
    "square": (T.square, (-2.0, 2.0)),
    "abs": (T.absolute, (0.1, 2.0)),
    "neg": (lambda t: -t, (-2.0, 2.0)),
    "pow3": (lambda t: t ** 3, (-2.0, 2.0)),
    "reshape": (lambda t: t.reshape(6, 2), (-2.0, 2.0)),
    "transpose": (lambda t: t.T, (-2.0, 2.0)),
    "slice": (lambda t: t[1:, :2], (-2.0, 2.0)),
    "sum0": (lambda t: t.sum(axis=0), (-2.0, 2.0)),
    "mean1": (lambda t: t.mean(axis=1), (-2.0, 2.0)),
    "max0": (lambda t: t.max(axis=0), (-2.0, 2.0)),
    "maxall": (lambda t: t.max(), (-2.0, 2.0)),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_unary_ops_match_finite_differences(name, seed):
    op, (lo, hi) = _UNARY[name]
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(lo, hi, size=(3, 4))
    weights = np.random.default_rng(seed + 100).normal(size=op(T.Tensor(x0)).shape)

    def run(v):
        t = T.Tensor(v, requires_grad=True)
        out = (op(t) * T.Tensor(weights)).sum()
        return t, out

    t, out = run(x0)
    out.backward()
    assert rel_err(t.grad, numeric_grad(lambda v: run(v)[1].item(), x0)) < 1e-4


_BINARY = {
    "add": T.add,
    "sub": lambda a, b: a - b,
    "mul": T.mul,
    "div": T.div,
}


@pytest.mark.parametrize("name", sorted(_BINARY))
@pytest.mark.parametrize("shapes", [((3, 4), (3, 4)), ((3, 1), (1, 4)), ((3, 4), (4,)), ((3, 4), ())])
def test_binary_ops_with_broadcasting(name, shapes):
    op = _BINARY[name]
    rng = np.random.default_rng(hash(name) % 2 ** 31)
    a0 = rng.uniform(0.5, 2.0, size=shapes[0])
    b0 = rng.uniform(0.5, 2.0, size=shapes[1])

    def run(av, bv):
        a = T.Tensor(av, requires_grad=True)
        b = T.Tensor(bv, requires_grad=True)
        return a, b, op(a, b).square().sum()

    a, b, out = run(a0, b0)
    out.backward()
    assert a.grad.shape == a0.shape and b.grad.shape == np.asarray(b0).shape
    assert rel_err(a.grad, numeric_grad(lambda v: run(v, b0)[2].item(), a0)) < 1e-4
    assert rel_err(b.grad, numeric_grad(lambda v: run(a0, v)[2].item(), b0)) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_matmul_and_affine_grads(seed):
    rng = np.random.default_rng(seed)
    a0 = rng.normal(size=(4, 3))
    b0 = rng.normal(size=(3, 5))
    c0 = rng.normal(size=5)

    def run(av, bv, cv):
        a = T.Tensor(av, requires_grad=True)
        b = T.Tensor(bv, requires_grad=True)
        c = T.Tensor(cv, requires_grad=True)
        return a, b, c, (T.affine(a, b, c) + a @ b).square().mean()

    a, b, c, out = run(a0, b0, c0)
    out.backward()
    assert rel_err(a.grad, numeric_grad(lambda v: run(v, b0, c0)[3].item(), a0)) < 1e-4
    assert rel_err(b.grad, numeric_grad(lambda v: run(a0, v, c0)[3].item(), b0)) < 1e-4
    assert rel_err(c.grad, numeric_grad(lambda v: run(a0, b0, v)[3].item(), c0)) < 1e-4


def test_concat_grad():
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))

    def run(av, bv):
        a = T.Tensor(av, requires_grad=True)
        b = T.Tensor(bv, requires_grad=True)
        return a, b, T.concat([a, b], axis=0).square().sum()

    a, b, out = run(a0, b0)
    out.backward()
    assert rel_err(a.grad, numeric_grad(lambda v: run(v, b0)[2].item(), a0)) < 1e-4
    assert rel_err(b.grad, numeric_grad(lambda v: run(a0, v)[2].item(), b0)) < 1e-4


def test_max_tie_routes_to_lowest_index():
    x = T.Tensor([3.0, 1.0, 3.0], requires_grad=True)
    x.max().backward()
    assert np.allclose(x.grad, [1.0, 0.0, 0.0])


def test_max_axis_tie_routes_to_lowest_index():
    x = T.Tensor([[2.0, 2.0], [0.0, 5.0]], requires_grad=True)
    x.max(axis=1).sum().backward()
    assert np.allclose(x.grad, [[1.0, 0.0], [0.0, 1.0]])


def test_backward_rejects_nonscalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        (x * 2.0).backward()


def test_nonfinite_loss_names_the_op():
    x = T.Tensor(-1.0, requires_grad=True)
    with np.errstate(invalid="ignore"):
        bad = T.log(x)
    with pytest.raises(NumericFault, match="log"):
        (bad * 2.0).backward()


def test_detach_blocks_gradient():
    x = T.Tensor(2.0, requires_grad=True)
    y = x * 3.0
    (y.detach() * x).backward()
    assert x.grad == pytest.approx(6.0)  # only the direct factor


def test_constant_subgraphs_stay_constant():
    out = T.tanh(T.Tensor([1.0, 2.0])) * 2.0
    assert not out.requires_grad and out._backward is None


def test_repeated_backward_resets_grads():
    x = T.Tensor(1.5, requires_grad=True)
    for _ in range(3):
        y = x * x
        y.backward()
    assert x.grad == pytest.approx(3.0)


def test_grad_accumulates_over_shared_subexpression():
    x = T.Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(8.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-5, max_value=5, allow_nan=False))
def test_tanh_derivative_identity(v):
    x = T.Tensor(v, requires_grad=True)
    T.tanh(x).backward()
    assert x.grad == pytest.approx(1.0 - np.tanh(v) ** 2, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_max_grad_is_one_hot(rows, cols, seed):
    x0 = np.random.default_rng(seed).normal(size=(rows, cols))
    x = T.Tensor(x0, requires_grad=True)
    x.max().backward()
    assert x.grad.sum() == 1.0 and np.count_nonzero(x.grad) == 1
    assert x0.ravel()[np.argmax(x.grad.ravel())] == x0.max()
