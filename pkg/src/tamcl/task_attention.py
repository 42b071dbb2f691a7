"""
Task attention, per-task tokens and cumulative classifier heads.

The task-attention block prepends the task token to the encoder output,
layer-normalises the result and lets the (normalised) token row be the single
query over all rows::

    s'    = [tau; s_D]
    x     = LN(s')
    O     = softmax(W_q x_0 (W_k x)^T / sqrt(G/h)) W_v x  W_o + b_o     (1 x G)
    s_out = MLP(LN(O)) + O

There is no residual around the attention sub-layer: the query is a single
row, so there is no same-shaped input to add back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tamcl import autodiff as ad
from tamcl.autodiff import Tensor
from tamcl.encoder import attention, mlp
from tamcl.errors import ConfigError, RegistryError, RoutingError, ShapeError


@dataclass
class TaskToken:
    task_id: int
    tau: Tensor  # (G,)


class TokenRegistry:
    """Ordered mapping task_id -> TaskToken; one token per learned task."""

    def __init__(self):
        self._tokens: dict[int, TaskToken] = {}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, task_id: int) -> bool:
        return task_id in self._tokens

    def __getitem__(self, task_id: int) -> TaskToken:
        try:
            return self._tokens[task_id]
        except KeyError:
            raise RoutingError(f"no task token registered for task {task_id}") from None

    def __iter__(self):
        return iter(self._tokens.values())

    @property
    def task_ids(self) -> list[int]:
        return list(self._tokens)

    def register(self, token: TaskToken) -> TaskToken:
        if token.task_id in self._tokens:
            raise RegistryError(f"task {token.task_id} already has a token")
        self._tokens[token.task_id] = token
        return token


def init_task_token(task_id: int, width: int, rng: np.random.Generator,
                    registry: Optional[TokenRegistry] = None) -> TaskToken:
    """Uniform(-a, a) token with a = 1/sqrt(width), registered if a registry is given."""
    if registry is not None and task_id in registry:
        raise RegistryError(f"task {task_id} already has a token")
    a = 1.0 / np.sqrt(width)
    token = TaskToken(task_id, Tensor(rng.uniform(-a, a, size=width), requires_grad=True))
    if registry is not None:
        registry.register(token)
    return token


@dataclass
class TaskAttentionBlock:
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
    def width(self) -> int:
        return self.wq.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in (
            "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo",
            "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")}


def init_tab(rng: np.random.Generator, width: int, heads: int, mlp_dim: int) -> TaskAttentionBlock:
    if width % heads:
        raise ConfigError(f"task-attention width {width} is not divisible by head count {heads}")
    s = 1.0 / np.sqrt(width)

    def w(*shape, scale=s):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    def const(value, *shape):
        return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    return TaskAttentionBlock(
        heads=heads,
        ln1_g=const(1.0, width), ln1_b=const(0.0, width),
        wq=w(width, width), wk=w(width, width), wv=w(width, width), wo=w(width, width),
        bo=const(0.0, width),
        ln2_g=const(1.0, width), ln2_b=const(0.0, width),
        w1=w(width, mlp_dim), b1=const(0.0, mlp_dim),
        w2=w(mlp_dim, width, scale=1.0 / np.sqrt(mlp_dim)), b2=const(0.0, width),
    )


def task_attend(s_d: Tensor, token: TaskToken, tab: TaskAttentionBlock,
                return_weights: bool = False):
    """Task-conditioned pooling of ``s_d`` (``[n, G]`` or ``[B, n, G]``) to ``[1, G]`` / ``[B, 1, G]``.

    With ``return_weights`` the ``[..., heads, 1, n+1]`` attention weights are
    returned too.
    """
    g = tab.width
    if s_d.shape[-1] != g or token.tau.shape != (g,):
        raise ShapeError(f"task attention width {g} does not match input {s_d.shape} "
                         f"/ token {token.tau.shape}")
    lead = s_d.shape[:-2]
    tau = ad.broadcast_to(ad.reshape(token.tau, (1,) * len(lead) + (1, g)), lead + (1, g))
    x = ad.layer_norm(ad.concat([tau, s_d], axis=-2), tab.ln1_g, tab.ln1_b)
    q = ad.matmul(x[..., :1, :], tab.wq)
    att, weights = attention(q, ad.matmul(x, tab.wk), ad.matmul(x, tab.wv), tab.heads,
                             return_weights=True)
    o = ad.matmul(att, tab.wo) + tab.bo
    out = mlp(ad.layer_norm(o, tab.ln2_g, tab.ln2_b), tab.w1, tab.b1, tab.w2, tab.b2) + o
    return (out, weights) if return_weights else out


@dataclass
class ClassifierHead:
    """Linear head whose outputs cover every task learned so far.

    ``slices`` maps each task id to the ``(start, stop)`` range of its classes.
    """

    task_id: int
    weight: Tensor  # (G, E_i)
    bias: Tensor  # (E_i,)
    slices: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.bias.shape[0]

    @property
    def own_slice(self) -> tuple[int, int]:
        return self.slices[self.task_id]

    def named_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def set_trainable(self, flag: bool) -> None:
        self.weight.requires_grad = flag
        self.bias.requires_grad = flag


def expand_classifier(prev: Optional[ClassifierHead], task_id: int, n_new: int,
                      rng: np.random.Generator, width: Optional[int] = None) -> ClassifierHead:
    """New head of width E_prev + n_new; the first E_prev outputs copy ``prev`` exactly."""
    if n_new < 1:
        raise ConfigError(f"a task needs at least one output, got {n_new}")
    if prev is None:
        if width is None:
            raise ConfigError("input width is required for the first head")
        e_prev, g = 0, width
        w_old = np.zeros((g, 0))
        b_old = np.zeros(0)
        slices: dict[int, tuple[int, int]] = {}
    else:
        e_prev, g = prev.width, prev.weight.shape[0]
        w_old, b_old = prev.weight.data, prev.bias.data
        slices = dict(prev.slices)
    if task_id in slices:
        raise RegistryError(f"task {task_id} already owns a head slice")
    w_new = rng.normal(0.0, 1.0 / np.sqrt(g), size=(g, n_new))
    weight = Tensor(np.concatenate([w_old, w_new], axis=1), requires_grad=True)
    bias = Tensor(np.concatenate([b_old, np.zeros(n_new)]), requires_grad=True)
    slices[task_id] = (e_prev, e_prev + n_new)
    return ClassifierHead(task_id, weight, bias, slices)


def _flatten_query(s_task: Tensor) -> Tensor:
    if s_task.shape[-2:-1] == (1,):
        return ad.reshape(s_task, s_task.shape[:-2] + (s_task.shape[-1],))
    return s_task


def classify_block(s_task: Tensor, head: ClassifierHead, task_id: int) -> Tensor:
    """Logits of one task's slice of ``head``."""
    if task_id not in head.slices:
        raise RoutingError(f"head of task {head.task_id} has no outputs for task {task_id}")
    a, b = head.slices[task_id]
    x = _flatten_query(s_task)
    return ad.matmul(x, head.weight[:, a:b]) + head.bias[a:b]


def classify(s_task: Tensor, head: ClassifierHead) -> Tensor:
    """Full logits over every output of ``head``: ``[..., 1, G]`` -> ``[..., E_i]``.

    Each task's block is its own product, so the logits of earlier tasks do
    not change by a single bit when the head is widened.
    """
    blocks = [classify_block(s_task, head, tid)
              for tid, _ in sorted(head.slices.items(), key=lambda kv: kv[1][0])]
    return blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=-1)


def owned_logits(logits: Tensor, head: ClassifierHead, task_id: Optional[int] = None) -> Tensor:
    """The slice of ``logits`` belonging to ``task_id`` (default: the head's own task)."""
    tid = head.task_id if task_id is None else task_id
    if tid not in head.slices:
        raise RoutingError(f"head for task {head.task_id} has no outputs for task {tid}")
    start, stop = head.slices[tid]
    return logits[..., start:stop]
