"""
Shared pre-norm transformer encoder.

Each block computes::

    s_hat = MSA(LN(s)) + s
    out   = MLP(LN(s_hat)) + s_hat

Inputs are ``[n, H]`` or batched ``[B, n, H]``; nothing mixes across the batch
axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tamcl import autodiff as ad
from tamcl.autodiff import Tensor
from tamcl.errors import ConfigError, ShapeError


def _param(rng: np.random.Generator, *shape: int, scale: float) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[..., n, H]`` -> ``[..., heads, n, H/heads]``."""
    *lead, n, width = x.shape
    x = ad.reshape(x, tuple(lead) + (n, heads, width // heads))
    k = len(lead)
    return ad.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, heads, n, dh = x.shape
    k = len(lead)
    x = ad.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return ad.reshape(x, tuple(lead) + (n, heads * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Scaled dot-product attention over already-projected q/k/v (``[..., n, H]``).

    Scores are divided by sqrt(H / heads). Returns merged ``[..., n_q, H]``
    and, on request, the ``[..., heads, n_q, n_k]`` weights.
    """
    width = q.shape[-1]
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = ad.matmul(qh, kh.swapaxes(-1, -2)) / np.sqrt(width / heads)
    weights = ad.softmax(scores, axis=-1)
    out = merge_heads(ad.matmul(weights, vh))
    return (out, weights) if return_weights else out


@dataclass
class SelfAttentionBlock:
    heads: int
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def hidden(self) -> int:
        return self.wq.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in (
            "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo",
            "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")}

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag


def init_block(rng: np.random.Generator, hidden: int, heads: int, mlp_dim: int) -> SelfAttentionBlock:
    if hidden % heads:
        raise ConfigError(f"hidden width {hidden} is not divisible by head count {heads}")
    s = 1.0 / np.sqrt(hidden)
    return SelfAttentionBlock(
        heads=heads,
        ln1_g=_ones(hidden), ln1_b=_zeros(hidden),
        wq=_param(rng, hidden, hidden, scale=s),
        wk=_param(rng, hidden, hidden, scale=s),
        wv=_param(rng, hidden, hidden, scale=s),
        wo=_param(rng, hidden, hidden, scale=s),
        bo=_zeros(hidden),
        ln2_g=_ones(hidden), ln2_b=_zeros(hidden),
        w1=_param(rng, hidden, mlp_dim, scale=s),
        b1=_zeros(mlp_dim),
        w2=_param(rng, mlp_dim, hidden, scale=1.0 / np.sqrt(mlp_dim)),
        b2=_zeros(hidden),
    )


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return ad.matmul(ad.gelu(ad.matmul(x, w1) + b1), w2) + b2


def sab_forward(s_prev: Tensor, block: SelfAttentionBlock, return_weights: bool = False):
    if s_prev.shape[-1] != block.hidden:
        raise ShapeError(f"block width {block.hidden} does not match input {s_prev.shape}")
    x = ad.layer_norm(s_prev, block.ln1_g, block.ln1_b)
    att, weights = attention(ad.matmul(x, block.wq), ad.matmul(x, block.wk), ad.matmul(x, block.wv),
                             block.heads, return_weights=True)
    s_hat = ad.matmul(att, block.wo) + block.bo + s_prev
    out = mlp(ad.layer_norm(s_hat, block.ln2_g, block.ln2_b),
              block.w1, block.b1, block.w2, block.b2) + s_hat
    return (out, weights) if return_weights else out


@dataclass
class EncoderStack:
    blocks: list[SelfAttentionBlock]
    frozen: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.frozen:
            self.frozen = [False] * len(self.blocks)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, block in enumerate(self.blocks):
            for name, p in block.named_parameters().items():
                out[f"{i}.{name}"] = p
        return out


def init_encoder(rng: np.random.Generator, depth: int, hidden: int, heads: int,
                 mlp_dim: int) -> EncoderStack:
    if depth < 1:
        raise ConfigError(f"encoder depth must be >= 1, got {depth}")
    return EncoderStack([init_block(rng, hidden, heads, mlp_dim) for _ in range(depth)])


def encode(s0, stack: EncoderStack) -> Tensor:
    """Run the fused sequence (or a raw tensor) through every block in order."""
    x = getattr(s0, "s0", s0)
    if not stack.blocks:
        raise ConfigError("encoder stack is empty")
    for block in stack.blocks:
        x = sab_forward(x, block)
    return x


def set_frozen(stack: EncoderStack, k: int) -> list[bool]:
    """Freeze the first ``k`` blocks (closest to the input), unfreeze the rest."""
    if not 0 <= k <= stack.depth:
        raise ConfigError(f"frozen block count {k} outside [0, {stack.depth}]")
    stack.frozen = [i < k for i in range(stack.depth)]
    for block, frozen in zip(stack.blocks, stack.frozen):
        block.set_trainable(not frozen)
    return list(stack.frozen)


def default_frozen_count(depth: int) -> int:
    """Six of eleven blocks frozen at full scale, scaled to ``depth``."""
    return int(round(6 / 11 * depth))
