import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tamcl import autodiff as ad
from tamcl.autodiff import Tensor
from tamcl.errors import ContractError, NumericError, ShapeError
from tamcl.gradcheck import check_gradients, numerical_grad, relative_error


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_row_by_column():
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    w = rng.standard_normal((3, 2))
    errs = check_gradients(lambda: ad.tsum(ad.matmul(a, b) * w), [a, b], eps=1e-5)
    assert max(errs.values()) < 1e-5


def test_matmul_batched_weight_gradient():
    rng = np.random.default_rng(1)
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    errs = check_gradients(lambda: ad.tsum(ad.matmul(a, b) * w), [a, b])
    assert max(errs.values()) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# -- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_matches_direct_formula():
    x = [1.0, 2.0, 3.0]
    z = sum(math.exp(v) for v in x)
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data, [math.exp(v) / z for v in x], rtol=1e-14)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        ad.softmax(Tensor([1.0, float("nan")]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)


# -- layer norm -------------------------------------------------------------

def test_layer_norm_centres_row():
    out = ad.layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert abs(out.mean()) < 1e-9
    assert abs(out.var() - 1.0) < 1e-4


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-5)
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    x, g, b = param(rng, 3, 5), param(rng, 5), param(rng, 5)
    w = rng.standard_normal((3, 5))
    errs = check_gradients(lambda: ad.tsum(ad.layer_norm(x, g, b) * w), [x, g, b])
    assert max(errs.values()) < 1e-4


# -- cross entropy / KL -----------------------------------------------------

def test_cross_entropy_uniform_is_ln2():
    assert abs(float(ad.cross_entropy(Tensor([0.0, 0.0]), 0).data) - math.log(2)) < 1e-15


def test_cross_entropy_confident_correct_is_near_zero():
    assert float(ad.cross_entropy(Tensor([10.0, -10.0]), 0).data) < 1e-8


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(5)
    p = np.exp(x) / np.exp(x).sum()
    assert abs(float(ad.cross_entropy(Tensor(x), 3).data) + math.log(p[3])) < 1e-10


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor([0.0, 1.0]), 2)


def test_kl_identical_is_zero():
    x = np.array([0.3, -1.2, 2.0])
    assert abs(float(ad.kl_divergence(Tensor(x), x).data)) < 1e-12


def test_kl_matches_direct_formula():
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    q = np.array([0.5, 0.5])
    expected = float(np.sum(p * np.log(p / q)))
    got = float(ad.kl_divergence(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]), 1.0).data)
    assert abs(got - expected) < 1e-14


def test_kl_gradient_reaches_student_only():
    rng = np.random.default_rng(4)
    s = param(rng, 2, 4)
    t = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    ad.backward(ad.kl_divergence(s, t, 2.0))
    assert s.grad is not None and t.grad is None
    errs = check_gradients(lambda: ad.kl_divergence(s, t, 2.0), [s])
    assert errs[0] < 1e-6


# -- backward semantics -----------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_dot_swaps_roles():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, -4.0], requires_grad=True)
    ad.backward(ad.tsum(x * y))
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_backward_twice_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.tsum(x * x)
    ad.backward(loss)
    first = x.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first)
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_non_scalar_raises():
    with pytest.raises(ContractError):
        ad.backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_unreachable_leaf_untouched():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    ad.backward(ad.tsum(x * 3.0))
    assert y.grad is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_diamond_graph_visits_each_node_once():
    x = Tensor([1.5], requires_grad=True)
    h = x * x
    loss = ad.tsum(h + h * h)
    order = ad.topological_order(loss)
    assert len(order) == len({id(n) for n in order})
    ad.backward(loss)
    # d/dx (x^2 + x^4) = 2x + 4x^3
    assert abs(x.grad[0] - (2 * 1.5 + 4 * 1.5 ** 3)) < 1e-12


def test_broadcast_error_is_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


# -- every differentiable op against finite differences ---------------------

ELEMENTWISE = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (ad.exp(b) + 1.0),
    "exp": lambda a, b: ad.exp(a) * b,
    "log": lambda a, b: ad.log(ad.exp(a) + 1.0) * b,
    "tanh": lambda a, b: ad.tanh(a) * b,
    "gelu": lambda a, b: ad.gelu(a) * b,
    "relu": lambda a, b: ad.relu(a + 3.0) * b,
    "transpose": lambda a, b: ad.transpose(a) @ b,
    "reshape": lambda a, b: ad.reshape(a, (4, 3)) @ ad.reshape(b, (3, 4)),
    "getitem": lambda a, b: a[np.array([0, 2, 2])] * b[1],
    "concat": lambda a, b: ad.concat([a, b * 2.0], axis=0),
    "mean": lambda a, b: ad.mean(a * b, axis=1, keepdims=True),
    "log_softmax": lambda a, b: ad.log_softmax(a) * b,
    "soft_ce": lambda a, b: ad.soft_cross_entropy(a, ad.softmax(b).data),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_op_gradient(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    fn = ELEMENTWISE[name]
    params = [a, b] if name != "soft_ce" else [a]
    errs = check_gradients(lambda: ad.tsum(fn(a, b)), params, eps=1e-5, floor=1e-6)
    assert max(errs.values()) < 1e-4


def test_same_seed_same_forward_and_gradient():
    def run():
        rng = np.random.default_rng(9)
        a, b = param(rng, 4, 4), param(rng, 4, 4)
        loss = ad.tsum(ad.gelu(ad.matmul(a, b)) * ad.softmax(a))
        ad.backward(loss)
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()
    assert run() == run()


def test_numerical_grad_restores_parameter():
    x = Tensor([0.5, -0.25], requires_grad=True)
    before = x.data.copy()
    g = numerical_grad(lambda: ad.tsum(x * x * x), x)
    np.testing.assert_array_equal(x.data, before)
    np.testing.assert_allclose(g, 3 * before ** 2, rtol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-12]), floor=1e-8) == pytest.approx(1e-4)
