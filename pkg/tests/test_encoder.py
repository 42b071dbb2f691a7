import numpy as np
import pytest

from tamcl import autodiff as ad
from tamcl.autodiff import Tensor
from tamcl.encoder import (
    EncoderStack,
    default_frozen_count,
    encode,
    init_block,
    init_encoder,
    sab_forward,
    set_frozen,
)
from tamcl.errors import ConfigError, ShapeError


@pytest.mark.parametrize("n", [1, 5, 17])
def test_shape_preserved(n):
    block = init_block(np.random.default_rng(0), 8, 2, 16)
    x = Tensor(np.random.default_rng(1).standard_normal((n, 8)))
    assert sab_forward(x, block).shape == (n, 8)


def test_zero_weights_give_identity():
    block = init_block(np.random.default_rng(0), 8, 2, 16)
    for name in ("wq", "wk", "wv", "wo", "bo", "w1", "b1", "w2", "b2"):
        getattr(block, name).data[...] = 0.0
    x = np.random.default_rng(1).standard_normal((4, 8))
    np.testing.assert_array_equal(sab_forward(Tensor(x), block).data, x)


def test_single_head_attention_vs_unrolled_oracle():
    rng = np.random.default_rng(2)
    block = init_block(rng, 4, 1, 6)
    x = rng.standard_normal((2, 4))
    _, weights = sab_forward(Tensor(x), block, return_weights=True)

    def ln(v):
        mu = v.mean()
        return (v - mu) / np.sqrt(((v - mu) ** 2).mean() + 1e-5) * block.ln1_g.data + block.ln1_b.data

    rows = [ln(x[0]), ln(x[1])]
    q = [r @ block.wq.data for r in rows]
    k = [r @ block.wk.data for r in rows]
    v = [r @ block.wv.data for r in rows]
    out = []
    for i in range(2):
        s = [sum(q[i][c] * k[j][c] for c in range(4)) / np.sqrt(4) for j in range(2)]
        e = [np.exp(t - max(s)) for t in s]
        w = [t / sum(e) for t in e]
        np.testing.assert_allclose(weights.data[0, i], w, atol=1e-12)
        att = w[0] * v[0] + w[1] * v[1]
        out.append(att @ block.wo.data + block.bo.data + x[i])
    s_hat = np.stack(out)
    # second half: MLP on the normalised residual stream
    mu = s_hat.mean(-1, keepdims=True)
    h = (s_hat - mu) / np.sqrt(((s_hat - mu) ** 2).mean(-1, keepdims=True) + 1e-5)
    h = h * block.ln2_g.data + block.ln2_b.data
    z = h @ block.w1.data + block.b1.data
    g = 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z ** 3)))
    expected = g @ block.w2.data + block.b2.data + s_hat
    np.testing.assert_allclose(sab_forward(Tensor(x), block).data, expected, atol=1e-10)


def test_attention_rows_are_distributions():
    block = init_block(np.random.default_rng(3), 8, 4, 16)
    _, w = sab_forward(Tensor(np.random.default_rng(4).standard_normal((2, 6, 8)) * 5), block,
                       return_weights=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-9)


def test_width_mismatch():
    block = init_block(np.random.default_rng(0), 8, 2, 16)
    with pytest.raises(ShapeError):
        sab_forward(Tensor(np.zeros((3, 6))), block)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        init_block(np.random.default_rng(0), 10, 3, 16)


def test_encode_composition():
    stack = init_encoder(np.random.default_rng(5), 2, 8, 2, 16)
    x = Tensor(np.random.default_rng(6).standard_normal((5, 8)))
    one = EncoderStack(stack.blocks[:1])
    np.testing.assert_array_equal(encode(x, one).data, sab_forward(x, stack.blocks[0]).data)
    np.testing.assert_array_equal(encode(x, stack).data,
                                  sab_forward(sab_forward(x, stack.blocks[0]), stack.blocks[1]).data)


def test_batch_permutation_is_equivariant():
    stack = init_encoder(np.random.default_rng(7), 2, 8, 2, 16)
    x = np.random.default_rng(8).standard_normal((4, 5, 8))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(encode(Tensor(x[perm]), stack).data, encode(Tensor(x), stack).data[perm],
                               atol=1e-13)


def test_set_frozen_bounds_and_flags():
    stack = init_encoder(np.random.default_rng(0), 4, 8, 2, 16)
    assert set_frozen(stack, 0) == [False] * 4
    assert all(p.requires_grad for p in stack.named_parameters().values())
    assert set_frozen(stack, 4) == [True] * 4
    assert not any(p.requires_grad for p in stack.named_parameters().values())
    assert set_frozen(stack, 2) == [True, True, False, False]
    for bad in (-1, 5):
        with pytest.raises(ConfigError):
            set_frozen(stack, bad)


def test_default_frozen_count():
    assert default_frozen_count(11) == 6
    assert default_frozen_count(4) == 2
    assert default_frozen_count(2) == 1


def test_frozen_blocks_get_no_grad():
    stack = init_encoder(np.random.default_rng(0), 3, 8, 2, 16)
    set_frozen(stack, 2)
    x = Tensor(np.random.default_rng(1).standard_normal((4, 8)), requires_grad=True)
    ad.backward(ad.tsum(encode(x, stack)))
    for i, block in enumerate(stack.blocks):
        grads = [p.grad for p in block.named_parameters().values()]
        if i < 2:
            assert all(g is None for g in grads)
        else:
            assert all(g is not None for g in grads)
    assert x.grad is not None
