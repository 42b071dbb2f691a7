import numpy as np
import pytest

from tamcl.autodiff import Tensor
from tamcl.errors import ContractError
from tamcl.optim import AdamW, MomentState, adamw_update


def test_zero_grad_zero_decay_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=1e-2, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_constant_gradient_step_tends_to_lr():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = AdamW({"p": p}, lr=1e-2, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0)
    g = np.array([0.5, -3.0, 1e-3])
    prev = p.data.copy()
    for _ in range(500):
        p.grad = g.copy()
        opt.step()
        step = p.data - prev
        prev = p.data.copy()
    # with bias correction m_hat = g and v_hat = g^2 exactly, so each step is lr * sign(g)
    np.testing.assert_allclose(step, -1e-2 * np.sign(g), rtol=1e-4)


def test_first_step_magnitude_is_lr():
    p = np.zeros(2)
    st = MomentState(np.zeros(2), np.zeros(2))
    adamw_update(p, np.array([4.0, -0.1]), st, lr=0.1, beta1=0.9, beta2=0.98, eps=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p, [-0.1, 0.1])


def test_weight_decay_is_decoupled():
    p = np.array([2.0])
    st = MomentState(np.zeros(1), np.zeros(1))
    adamw_update(p, np.zeros(1), st, lr=0.1, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.5)
    assert p[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))
    assert st.m[0] == 0.0 and st.v[0] == 0.0


def test_matches_reference_formula():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal(4), requires_grad=True)
    ref = p.data.copy()
    m = v = np.zeros(4)
    opt = AdamW({"p": p}, lr=3e-3, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.01)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p.grad = g
        opt.step()
        ref = ref - 3e-3 * 0.01 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        ref = ref - 3e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.98 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_missing_grad_and_unmanaged():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW({"p": p})
    with pytest.raises(ContractError):
        opt.step()
    p.grad = np.ones(2)
    with pytest.raises(ContractError):
        opt.step(["q"])


def test_only_managed_parameters_have_state():
    a = Tensor(np.zeros(2), requires_grad=True)
    frozen = Tensor(np.ones(2))
    opt = AdamW({"a": a})
    a.grad = np.ones(2)
    frozen.grad = np.ones(2)
    opt.step()
    assert set(opt.state) == {"a"}
    np.testing.assert_array_equal(frozen.data, [1.0, 1.0])


def test_defaults():
    opt = AdamW({})
    assert (opt.lr, opt.betas, opt.eps) == (1e-2, (0.9, 0.98), 1e-8)
