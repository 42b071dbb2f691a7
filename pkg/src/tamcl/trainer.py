"""
Continual training loop: composite loss, frozen teacher, experience replay.

The per-step objective is::

    L = (1 - lam) * L_c + lam * alpha * L_ikd + beta * L_div
    lam  = (T_n - 1) / T_n
    beta = min(L_div, 0.1 * ((1 - lam) * L_c + lam * alpha * L_ikd))

``lam``, ``alpha`` and ``beta`` are constants with respect to the gradient.
``L_ikd`` distils the previous model's encoder output into the current one;
``L_div`` compares the current task token with every earlier token.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from tamcl import autodiff as ad
from tamcl.autodiff import Tensor
from tamcl.checkpoint import params_hash
from tamcl.errors import ConfigError, ContractError, RegistryError
from tamcl.model import TAMCLModel
from tamcl.optim import AdamW
from tamcl.task_attention import TokenRegistry
from tamcl.tasks import TaskData

DIV_MODES = ("repel", "literal")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 5
    batch_size: int = 16
    replay_fraction: float = 0.05
    replay_freq: int = 100
    alpha: float = 5000.0
    alpha_per_task: dict[int, float] = field(default_factory=dict)
    temperature: float = 1.0
    div_mode: str = "repel"
    use_ikd: bool = True
    use_replay: bool = True
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.alpha_per_task = {int(k): float(v) for k, v in self.alpha_per_task.items()}
        if self.div_mode not in DIV_MODES:
            raise ConfigError(f"div_mode must be one of {DIV_MODES}, got {self.div_mode!r}")
        if self.replay_freq < 1:
            raise ConfigError(f"replay_freq must be >= 1, got {self.replay_freq}")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ConfigError(f"replay_fraction must lie in [0, 1], got {self.replay_fraction}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def alpha_for(self, task_id: int) -> float:
        return self.alpha_per_task.get(task_id, self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["alpha_per_task"] = {str(k): v for k, v in self.alpha_per_task.items()}
        return d


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    lam: float
    alpha: float
    beta: float


def loss_lambda(n_tasks: int) -> float:
    if n_tasks < 1:
        raise ContractError(f"number of tasks seen must be >= 1, got {n_tasks}")
    return (n_tasks - 1) / n_tasks


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def compose_loss(l_c, l_ikd, l_div, n_tasks: int, alpha: float,
                 div_mode: str = "repel") -> tuple[Tensor, LossWeights]:
    """Weighted total loss and the constants used to build it.

    In ``repel`` mode the diversity term is a negated cross-entropy, so ``beta``
    is taken from its magnitude; that keeps ``beta`` non-negative and the
    term a bounded push away from earlier tokens.
    """
    lam = loss_lambda(n_tasks)
    core = (1.0 - lam) * _value(l_c) + lam * alpha * _value(l_ikd)
    div = _value(l_div)
    if div_mode == "repel":
        beta = min(abs(div), 0.1 * core)
    else:
        beta = min(div, 0.1 * core)
    total = (1.0 - lam) * ad.as_tensor(l_c) + (lam * alpha) * ad.as_tensor(l_ikd) \
        + beta * ad.as_tensor(l_div)
    return total, LossWeights(lam, alpha, beta)


def compute_ikd(student_sd, teacher_sd, temperature: float = 1.0) -> Tensor:
    """Mean per-position KL between teacher and student encoder outputs.

    Either argument may be a single tensor or a list (one per image pass);
    the result is averaged over passes.
    """
    if teacher_sd is None:
        raise ContractError("knowledge distillation needs a teacher snapshot")
    s_list = list(student_sd) if isinstance(student_sd, (list, tuple)) else [student_sd]
    t_list = list(teacher_sd) if isinstance(teacher_sd, (list, tuple)) else [teacher_sd]
    if len(s_list) != len(t_list):
        raise ContractError(f"{len(s_list)} student passes vs {len(t_list)} teacher passes")
    terms = [ad.kl_divergence(s, t, temperature) for s, t in zip(s_list, t_list)]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / len(terms) if len(terms) > 1 else total


def compute_div(tokens: TokenRegistry, current_id: int, mode: str = "repel") -> Tensor:
    """Diversity term between the current token and every earlier token.

    ``literal``: mean over j < i of CE(tau_i, softmax(tau_j)), where tau_i acts
    as logits and softmax(tau_j) as the target distribution.
    ``repel``: the negation of that, so lowering the loss pushes tau_i away.
    Zero (no graph) for the first task.
    """
    if mode not in DIV_MODES:
        raise ConfigError(f"div_mode must be one of {DIV_MODES}, got {mode!r}")
    ids = tokens.task_ids
    cur = tokens[current_id].tau
    prior = ids[:ids.index(current_id)]
    if not prior:
        return Tensor(0.0)
    total = None
    for j in prior:
        target = ad._softmax_np(tokens[j].tau.data, -1)
        term = ad.soft_cross_entropy(cur, target)
        total = term if total is None else total + term
    total = total / len(prior)
    return -total if mode == "repel" else total


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Per-task store of a uniformly sampled fraction of each task's training set."""

    def __init__(self, fraction: float = 0.05, rng: Optional[np.random.Generator] = None):
        self.fraction = fraction
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.stores: dict[int, TaskData] = {}
        self.indices: dict[int, np.ndarray] = {}

    def capacity_for(self, n: int) -> int:
        # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
        return int(math.floor(self.fraction * n + 1e-9))

    def add_task(self, data: TaskData) -> np.ndarray:
        if data.task_id in self.stores:
            raise RegistryError(f"task {data.task_id} is already in the buffer")
        k = self.capacity_for(len(data))
        idx = self.rng.choice(len(data), size=k, replace=False)
        self.indices[data.task_id] = idx
        self.stores[data.task_id] = data.subset(idx)
        return idx

    def tasks(self, exclude: Optional[int] = None) -> list[int]:
        return [t for t, d in self.stores.items() if len(d) and t != exclude]

    def __len__(self) -> int:
        return sum(len(d) for d in self.stores.values())

    def get_batch(self, batch_size: int, exclude: Optional[int] = None) -> Optional[TaskData]:
        """A batch from one uniformly chosen stored task, or None when nothing is stored."""
        choices = self.tasks(exclude)
        if not choices:
            return None
        task = choices[int(self.rng.integers(len(choices)))]
        store = self.stores[task]
        take = self.rng.choice(len(store), size=min(batch_size, len(store)), replace=False)
        return store.subset(take)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    task_id: int  # task being learned
    batch_task: int  # task the batch belongs to (differs on replay)
    step: int
    epoch: int
    replay: bool
    n_tasks: int
    l_c: float
    l_ikd: float
    l_div: float
    lam: float
    alpha: float
    beta: float
    loss: float


@dataclass
class TaskReport:
    task_id: int
    n_steps: int
    replay_steps: list[int]
    buffer_size: int
    teacher_hash_start: Optional[str]
    teacher_hash_end: Optional[str]
    frozen_hash_start: dict[str, str]
    frozen_hash_end: dict[str, str]
    final_loss: float
    seconds: float


def merge_batches(parts: Sequence[TaskData]) -> TaskData:
    """Concatenate batch pieces; they must all come from one task."""
    ids = {p.task_id for p in parts}
    if len(ids) != 1:
        raise ContractError(f"a batch must hold one task, got tasks {sorted(ids)}")
    return TaskData(parts[0].task_id, np.concatenate([p.images for p in parts]),
                    np.concatenate([p.tokens for p in parts]), np.concatenate([p.labels for p in parts]),
                    np.concatenate([p.codes for p in parts]))


class ContinualTrainer:
    def __init__(self, model: TAMCLModel, config: TrainConfig,
                 on_step: Optional[Callable[["ContinualTrainer", StepRecord], None]] = None):
        self.model = model
        self.config = config
        data_seq, buf_seq = np.random.SeedSequence(config.seed).spawn(2)
        self.rng = np.random.default_rng(data_seq)
        self.buffer = ReplayBuffer(config.replay_fraction, np.random.default_rng(buf_seq))
        self.teacher: Optional[TAMCLModel] = None
        self.current_task: Optional[int] = None
        self.optimizer: Optional[AdamW] = None
        self.records: list[StepRecord] = []
        self.on_step = on_step

    @property
    def n_tasks(self) -> int:
        return len(self.model.tasks)

    def _begin_task(self, task_id: int, n_labels: int, dual_image: bool) -> None:
        if task_id in self.model.tasks:
            raise RegistryError(f"task {task_id} has already been learned")
        self.teacher = self.model.snapshot() if self.model.tasks else None
        self.model.add_task(task_id, n_labels, dual_image)
        self.model.set_current_task(task_id)
        self.current_task = task_id
        c = self.config
        self.optimizer = AdamW(self.model.trainable_parameters(), lr=c.lr, betas=c.betas, eps=c.eps,
                               weight_decay=c.weight_decay)

    def step_parameter_names(self, batch_task: int) -> list[str]:
        """Trainable parameters that the loss for ``batch_task`` reaches."""
        cur = self.current_task
        names = [k for k, p in self.model.shared_parameters().items() if p.requires_grad]
        token_used = batch_task == cur and self.model.config.use_tab
        has_prior = self.model.tokens.task_ids.index(cur) > 0
        if token_used or has_prior:
            names.append(f"tokens.{cur}")
        if batch_task == cur:
            names += [f"heads.{cur}.weight", f"heads.{cur}.bias"]
        return names

    def train_step(self, batch: Union[TaskData, Sequence[TaskData]], replay: bool = False,
                   epoch: int = 0, step: int = 0) -> StepRecord:
        if not isinstance(batch, TaskData):
            batch = merge_batches(batch)
        if self.current_task is None:
            raise ContractError("train_step called before a task was started")
        if not replay and batch.task_id != self.current_task:
            raise ContractError(f"batch of task {batch.task_id} while learning task {self.current_task}")
        c, model = self.config, self.model
        n_tasks = self.n_tasks
        alpha = c.alpha_for(self.current_task)
        self.optimizer.zero_grad()

        out = model.forward(batch.images, batch.tokens, batch.task_id)
        l_c = ad.cross_entropy(out.logits, batch.labels)
        if c.use_ikd and n_tasks > 1:
            if self.teacher is None:
                raise ContractError(f"no teacher snapshot while learning task number {n_tasks}")
            with ad.no_grad():
                teacher_sd = self.teacher.features(batch.images, batch.tokens)
            l_ikd = compute_ikd(out.s_d, teacher_sd, c.temperature)
        else:
            l_ikd = Tensor(0.0)
        l_div = compute_div(model.tokens, self.current_task, c.div_mode)
        loss, weights = compose_loss(l_c, l_ikd, l_div, n_tasks, alpha, c.div_mode)
        ad.backward(loss)
        self.optimizer.step(self.step_parameter_names(batch.task_id))

        rec = StepRecord(self.current_task, batch.task_id, step, epoch, replay, n_tasks,
                         float(l_c.data), float(l_ikd.data), float(l_div.data),
                         weights.lam, weights.alpha, weights.beta, float(loss.data))
        self.records.append(rec)
        if self.on_step is not None:
            self.on_step(self, rec)
        return rec

    def frozen_hashes(self) -> dict[str, str]:
        """Hashes of everything that must not move while the current task trains."""
        out = {}
        for i, (block, frozen) in enumerate(zip(self.model.encoder.blocks, self.model.encoder.frozen)):
            if frozen:
                out[f"encoder.{i}"] = params_hash({k: v.data for k, v in block.named_parameters().items()})
        for tid in self.model.tasks:
            if tid == self.current_task:
                continue
            out[f"tokens.{tid}"] = params_hash({"tau": self.model.tokens[tid].tau.data})
            out[f"heads.{tid}"] = params_hash({k: v.data for k, v in
                                               self.model.heads[tid].named_parameters().items()})
        return out

    def teacher_hash(self) -> Optional[str]:
        return None if self.teacher is None else params_hash(self.teacher.state_arrays())

    def train_task(self, task_id: int, data: TaskData, n_labels: int,
                   dual_image: bool = False) -> TaskReport:
        """Learn one task: expand the model, iterate epochs x batches, replay, then store samples."""
        if len(data) == 0:
            raise ContractError(f"task {task_id} has no training data")
        if data.task_id != task_id:
            raise ContractError(f"data belongs to task {data.task_id}, not {task_id}")
        t0 = time.perf_counter()
        self._begin_task(task_id, n_labels, dual_image)
        c = self.config
        teacher_start = self.teacher_hash()
        frozen_start = self.frozen_hashes()
        step = 0
        replay_steps: list[int] = []
        last = None
        for epoch in range(c.epochs):
            order = self.rng.permutation(len(data))
            for batch in data.batches(c.batch_size, order):
                step += 1
                last = self.train_step(batch, epoch=epoch, step=step)
                if c.use_replay and step % c.replay_freq == 0:
                    rb = self.buffer.get_batch(c.batch_size, exclude=task_id)
                    if rb is not None:
                        self.train_step(rb, replay=True, epoch=epoch, step=step)
                        replay_steps.append(step)
        if c.use_replay:
            self.buffer.add_task(data)
        return TaskReport(
            task_id=task_id, n_steps=step, replay_steps=replay_steps,
            buffer_size=len(self.buffer.stores.get(task_id, ())),
            teacher_hash_start=teacher_start, teacher_hash_end=self.teacher_hash(),
            frozen_hash_start=frozen_start, frozen_hash_end=self.frozen_hashes(),
            final_loss=last.loss if last else float("nan"),
            seconds=time.perf_counter() - t0,
        )
