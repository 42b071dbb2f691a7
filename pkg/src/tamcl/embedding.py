"""
Multimodal input embedding: image patches and token ids become one fused
token sequence for the shared encoder.

Images arrive as ``[H, W, C]`` or batched ``[B, H, W, C]`` arrays with values
in [0, 1]; text arrives as int token ids ``[L]`` or ``[B, L]``. Outputs keep
the batch axis iff the input had one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tamcl import autodiff as ad
from tamcl.autodiff import Tensor
from tamcl.errors import ShapeError, VocabularyError


@dataclass
class EmbeddingParams:
    patch_proj: Tensor  # (P*P*C, H)
    word_emb: Tensor  # (|V|, H)
    image_pos: Tensor  # (N+1, H)
    text_pos: Tensor  # (L_max+1, H)
    image_cls: Tensor  # (H,)
    text_cls: Tensor
    image_type: Tensor
    text_type: Tensor
    patch: int

    @property
    def hidden(self) -> int:
        return self.patch_proj.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.word_emb.shape[0]

    @property
    def max_text_len(self) -> int:
        return self.text_pos.shape[0] - 1

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "patch_proj": self.patch_proj,
            "word_emb": self.word_emb,
            "image_pos": self.image_pos,
            "text_pos": self.text_pos,
            "image_cls": self.image_cls,
            "text_cls": self.text_cls,
            "image_type": self.image_type,
            "text_type": self.text_type,
        }


def init_embedding(rng: np.random.Generator, *, image_hw: tuple[int, int], channels: int,
                   patch: int, vocab_size: int, max_text_len: int, hidden: int,
                   std: float = 0.02) -> EmbeddingParams:
    h, w = image_hw
    _check_divisible(h, w, patch)
    n_patches = (h // patch) * (w // patch)
    fan_in = patch * patch * channels

    def normal(*shape, scale=std):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    return EmbeddingParams(
        patch_proj=normal(fan_in, hidden, scale=1.0 / np.sqrt(fan_in)),
        word_emb=normal(vocab_size, hidden, scale=1.0),
        image_pos=normal(n_patches + 1, hidden),
        text_pos=normal(max_text_len + 1, hidden),
        image_cls=normal(hidden),
        text_cls=normal(hidden),
        image_type=normal(hidden),
        text_type=normal(hidden),
        patch=patch,
    )


def _check_divisible(h: int, w: int, p: int) -> None:
    if p <= 0 or h % p or w % p:
        raise ShapeError(f"image size H={h}, W={w} is not divisible by patch size P={p}")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[..., H, W, C]`` -> ``[..., N, P*P*C]``.

    Patches are ordered row-major over the patch grid; each patch is flattened
    row-major over (row, column, channel).
    """
    images = np.asarray(images, dtype=np.float64)
    *lead, h, w, c = images.shape
    _check_divisible(h, w, patch)
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def _prepend(row: Tensor, body: Tensor) -> Tensor:
    """Put ``row`` (shape [H]) in front of ``body`` ([..., n, H]) along the sequence axis."""
    lead = body.shape[:-2]
    head = ad.broadcast_to(ad.reshape(row, (1,) * len(lead) + (1, row.shape[0])),
                           lead + (1, row.shape[0]))
    return ad.concat([head, body], axis=-2)


def embed_image(image, params: EmbeddingParams) -> Tensor:
    """Class vector + projected patches, plus image position embeddings: ``[..., N+1, H]``."""
    patches = patchify(image, params.patch)
    n = patches.shape[-2]
    if n + 1 != params.image_pos.shape[0]:
        raise ShapeError(f"image yields {n} patches but position table has {params.image_pos.shape[0] - 1}")
    proj = ad.matmul(patches, params.patch_proj)
    return _prepend(params.image_cls, proj) + params.image_pos


def embed_text(token_ids, params: EmbeddingParams) -> Tensor:
    """Class vector + word-embedding rows, plus text position embeddings: ``[..., L+1, H]``."""
    ids = np.asarray(token_ids, dtype=np.int64)
    length = ids.shape[-1] if ids.ndim else 0
    if length > params.max_text_len:
        raise ShapeError(f"text length {length} exceeds maximum {params.max_text_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= params.vocab_size):
        raise VocabularyError(f"token id out of vocabulary range [0, {params.vocab_size})")
    lead = ids.shape[:-1]
    if ids.size:
        words = params.word_emb[ids]
    else:
        words = Tensor(np.zeros(lead + (0, params.hidden)))
    pos = params.text_pos[: length + 1]
    return _prepend(params.text_cls, words) + pos


@dataclass
class FusedSequence:
    s0: Tensor
    boundary: int  # index of the first text row (= N+1)

    def __len__(self) -> int:
        return self.s0.shape[-2]


def fuse(image_emb: Tensor, text_emb: Tensor, params: EmbeddingParams) -> FusedSequence:
    """Add modality-type vectors and concatenate image rows before text rows."""
    if image_emb.shape[-1] != text_emb.shape[-1] or image_emb.shape[-1] != params.hidden:
        raise ShapeError(f"width mismatch: image {image_emb.shape}, text {text_emb.shape}, "
                         f"hidden {params.hidden}")
    if image_emb.shape[:-2] != text_emb.shape[:-2]:
        raise ShapeError(f"batch mismatch: image {image_emb.shape}, text {text_emb.shape}")
    s0 = ad.concat([image_emb + params.image_type, text_emb + params.text_type], axis=-2)
    return FusedSequence(s0, image_emb.shape[-2])


def embed(image, token_ids, params: EmbeddingParams) -> FusedSequence:
    return fuse(embed_image(image, params), embed_text(token_ids, params), params)


def compress_dual(v) -> Tensor:
    """Average non-overlapping adjacent pairs of the last axis: ``[..., 2H] -> [..., H]``."""
    v = ad.as_tensor(v)
    n = v.shape[-1]
    if n % 2:
        raise ShapeError(f"compress_dual needs an even length, got {n}")
    pairs = ad.reshape(v, v.shape[:-1] + (n // 2, 2))
    return ad.mean(pairs, axis=-1)
