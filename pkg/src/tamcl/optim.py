"""AdamW with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from tamcl.autodiff import Tensor
from tamcl.errors import ContractError


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_update(param: np.ndarray, grad: np.ndarray, state: MomentState, *, lr: float,
                 beta1: float, beta2: float, eps: float, weight_decay: float) -> None:
    """One in-place AdamW update of ``param``."""
    state.step += 1
    if weight_decay:
        param -= lr * weight_decay * param
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class AdamW:
    """Moment buffers are created only for the parameters handed in at construction."""

    params: dict[str, Tensor]
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 0.01
    state: dict[str, MomentState] = field(default_factory=dict)

    def __post_init__(self):
        self.params = dict(self.params)
        for name, p in self.params.items():
            self.state[name] = MomentState(np.zeros_like(p.data), np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, names: Optional[Iterable[str]] = None) -> None:
        """Update ``names`` (default: every managed parameter).

        Every updated parameter must carry a gradient.
        """
        names = list(self.params) if names is None else list(names)
        for name in names:
            if name not in self.params:
                raise ContractError(f"parameter {name!r} is not managed by this optimizer")
            p = self.params[name]
            if p.grad is None:
                raise ContractError(f"trainable parameter {name!r} has no gradient")
            adamw_update(p.data, p.grad, self.state[name], lr=self.lr, beta1=self.betas[0],
                         beta2=self.betas[1], eps=self.eps, weight_decay=self.weight_decay)
