"""The full task-attentive model: embedding, shared encoder, task attention, heads."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from tamcl import autodiff as ad
from tamcl.autodiff import Tensor
from tamcl.embedding import EmbeddingParams, compress_dual, embed, init_embedding
from tamcl.encoder import EncoderStack, default_frozen_count, encode, init_encoder, set_frozen
from tamcl.errors import ConfigError, RoutingError
from tamcl.task_attention import (
    ClassifierHead,
    TaskAttentionBlock,
    TokenRegistry,
    classify_block,
    expand_classifier,
    init_tab,
    init_task_token,
    task_attend,
)


@dataclass
class ModelConfig:
    image_size: tuple[int, int] = (16, 16)
    channels: int = 1
    patch: int = 4
    vocab_size: int = 32
    max_text_len: int = 8
    hidden: int = 64
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 128
    n_frozen: Optional[int] = None  # None -> default_frozen_count(depth)
    use_tab: bool = True

    def __post_init__(self):
        self.image_size = tuple(int(x) for x in self.image_size)
        if self.hidden % self.heads:
            raise ConfigError(f"hidden width {self.hidden} not divisible by {self.heads} heads")

    @property
    def frozen_blocks(self) -> int:
        return default_frozen_count(self.depth) if self.n_frozen is None else self.n_frozen

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class ForwardOutput:
    logits: Tensor  # owned slice, [B, E_orig]
    s_d: list[Tensor]  # encoder output per image pass, each [B, n, H]
    attention: Optional[Tensor] = None


@dataclass
class TaskInfo:
    n_labels: int
    dual_image: bool = False


class TAMCLModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        c = config
        self.embedding: EmbeddingParams = init_embedding(
            self.rng, image_hw=c.image_size, channels=c.channels, patch=c.patch,
            vocab_size=c.vocab_size, max_text_len=c.max_text_len, hidden=c.hidden)
        self.encoder: EncoderStack = init_encoder(self.rng, c.depth, c.hidden, c.heads, c.mlp_dim)
        set_frozen(self.encoder, c.frozen_blocks)
        self.tab: TaskAttentionBlock = init_tab(self.rng, c.hidden, c.heads, c.mlp_dim)
        if not c.use_tab:
            for p in self.tab.named_parameters().values():
                p.requires_grad = False
        self.tokens = TokenRegistry()
        self.heads: dict[int, ClassifierHead] = {}
        self.tasks: dict[int, TaskInfo] = {}

    # -- registry --------------------------------------------------------
    @property
    def task_ids(self) -> list[int]:
        return list(self.tasks)

    def add_task(self, task_id: int, n_labels: int, dual_image: bool = False) -> ClassifierHead:
        """Register a token and an expanded head for a new task."""
        init_task_token(task_id, self.config.hidden, self.rng, self.tokens)
        prev = self.heads[self.task_ids[-1]] if self.tasks else None
        head = expand_classifier(prev, task_id, n_labels, self.rng, width=self.config.hidden)
        self.heads[task_id] = head
        self.tasks[task_id] = TaskInfo(n_labels, dual_image)
        return head

    def head(self, task_id: int) -> ClassifierHead:
        if task_id not in self.heads:
            raise RoutingError(f"no classifier head for task {task_id}")
        return self.heads[task_id]

    def set_current_task(self, task_id: int) -> None:
        """Only the current task's token and head stay trainable."""
        for tid, head in self.heads.items():
            head.set_trainable(tid == task_id)
            self.tokens[tid].tau.requires_grad = tid == task_id

    # -- parameters ------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"embedding.{k}": v for k, v in self.embedding.named_parameters().items()}
        out.update({f"encoder.{k}": v for k, v in self.encoder.named_parameters().items()})
        out.update({f"tab.{k}": v for k, v in self.tab.named_parameters().items()})
        for tid in self.tasks:
            out[f"tokens.{tid}"] = self.tokens[tid].tau
            for k, v in self.heads[tid].named_parameters().items():
                out[f"heads.{tid}.{k}"] = v
        return out

    def shared_parameters(self) -> dict[str, Tensor]:
        """Parameters every task uses (embedding, encoder, task attention)."""
        return {k: v for k, v in self.named_parameters().items()
                if not k.startswith(("tokens.", "heads."))}

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def snapshot(self) -> "TAMCLModel":
        """Frozen deep copy: every parameter has requires_grad=False and no grad buffer."""
        twin = copy.deepcopy(self)
        for p in twin.named_parameters().values():
            p.requires_grad = False
            p.grad = None
        return twin

    # -- forward ---------------------------------------------------------
    def features(self, images: np.ndarray, token_ids: np.ndarray) -> list[Tensor]:
        """Encoder outputs, one ``[B, n, H]`` tensor per image slot.

        ``images`` is ``[B, n_images, H, W, C]``; the text is paired with each image.
        """
        images = np.asarray(images)
        return [encode(embed(images[:, k], token_ids, self.embedding), self.encoder)
                for k in range(images.shape[1])]

    def task_input(self, s_d: list[Tensor]) -> Tensor:
        """Sequence handed to task attention; two passes are pooled and compressed."""
        if len(s_d) == 1:
            return s_d[0]
        if len(s_d) != 2:
            raise ConfigError(f"expected 1 or 2 image passes, got {len(s_d)}")
        pooled = ad.concat([s[..., :1, :] for s in s_d], axis=-1)  # [B, 1, 2H]
        return compress_dual(pooled)

    def pooled(self, images: np.ndarray, token_ids: np.ndarray, task_id: int,
               return_attention: bool = False) -> tuple[Tensor, list[Tensor], Optional[Tensor]]:
        """Task-conditioned feature ``[B, 1, H]`` fed to the head, plus the encoder outputs."""
        s_d = self.features(images, token_ids)
        x = self.task_input(s_d)
        weights = None
        if not self.config.use_tab:
            return x[..., :1, :], s_d, None
        token = self.tokens[task_id]
        if return_attention:
            out, weights = task_attend(x, token, self.tab, return_weights=True)
        else:
            out = task_attend(x, token, self.tab)
        return out, s_d, weights

    def forward(self, images: np.ndarray, token_ids: np.ndarray, task_id: int,
                return_attention: bool = False) -> ForwardOutput:
        head = self.head(task_id)
        pooled, s_d, weights = self.pooled(images, token_ids, task_id, return_attention)
        logits = classify_block(pooled, head, task_id)
        return ForwardOutput(logits, s_d, weights)

    def predict(self, images: np.ndarray, token_ids: np.ndarray, task_id: int) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.forward(images, token_ids, task_id).logits.data, axis=-1)

    # -- state -----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "frozen": list(self.encoder.frozen),
            "tasks": [{"task_id": tid, "n_labels": info.n_labels, "dual_image": info.dual_image}
                      for tid, info in self.tasks.items()],
        }

    @classmethod
    def from_state(cls, metadata: dict, arrays: dict[str, np.ndarray]) -> "TAMCLModel":
        cfg = dict(metadata["config"])
        model = cls(ModelConfig(**cfg))
        for t in metadata["tasks"]:
            model.add_task(int(t["task_id"]), int(t["n_labels"]), bool(t["dual_image"]))
        set_frozen(model.encoder, sum(metadata["frozen"]))
        params = model.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ConfigError(f"parameter {k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)
        return model
