"""
Accuracy tracking over a task sequence and normalised forgetting.

Accuracies are percentages. The chance reference for a task with ``k``
labels is ``100 / k`` so that every quantity in the forgetting ratio shares
the percent scale.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from tamcl import autodiff as ad
from tamcl.errors import CompletenessError, DegenerateReferenceError, RoutingError


def evaluate(model, task_id: int, data, batch_size: int = 250) -> float:
    """Percent of examples whose argmax over the task's own logits is the label."""
    if task_id not in model.tasks:
        raise RoutingError(f"model has no token/head for task {task_id}")
    if len(data) == 0:
        return float("nan")
    correct = 0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            pred = model.predict(data.images[sl], data.tokens[sl], task_id)
            correct += int(np.sum(pred == data.labels[sl]))
    return 100.0 * correct / len(data)


def chance_accuracy(n_labels: int) -> float:
    return 100.0 / n_labels


def forgetting_rate(s_a: float, s_after: float, n_labels: int) -> float:
    """(S_A - S_after) / (S_A - S_R) with S_R = 100 / n_labels.

    Negative values (the task improved later) are returned unchanged.
    """
    s_r = chance_accuracy(n_labels)
    if s_a <= s_r:
        raise DegenerateReferenceError(
            f"reference accuracy {s_a:.4g}% is not above chance {s_r:.4g}% ({n_labels} labels)")
    return (s_a - s_after) / (s_a - s_r)


def difficulty_score(n_train: int, n_labels: int) -> float:
    """Training examples per label; larger means easier."""
    if n_labels < 1:
        raise ValueError(f"n_labels must be >= 1, got {n_labels}")
    return n_train / n_labels


@dataclass
class AccuracyMatrix:
    """``acc[(j, i)]``: accuracy of task j measured right after finishing task i."""

    tasks: list[int] = field(default_factory=list)
    n_labels: dict[int, int] = field(default_factory=dict)
    acc: dict[tuple[int, int], float] = field(default_factory=dict)

    def add_task(self, task_id: int, n_labels: int) -> None:
        self.tasks.append(task_id)
        self.n_labels[task_id] = n_labels

    def set(self, j: int, i: int, value: float) -> None:
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"accuracy {value} outside [0, 100]")
        if self.tasks.index(i) < self.tasks.index(j):
            raise ValueError(f"task {j} cannot be evaluated after earlier task {i}")
        self.acc[(j, i)] = float(value)

    def get(self, j: int, i: int) -> float:
        return self.acc[(j, i)]

    def reference(self, j: int) -> float:
        """Accuracy of task j right after learning it."""
        return self.acc[(j, j)]

    def pairs(self) -> list[tuple[int, int]]:
        """Every (j, i) with j learned no later than i, in order."""
        return [(j, i) for ii, i in enumerate(self.tasks) for j in self.tasks[:ii + 1]]

    def missing(self) -> list[tuple[int, int]]:
        return [p for p in self.pairs() if p not in self.acc]

    def to_dict(self) -> dict:
        return {
            "tasks": list(self.tasks),
            "n_labels": {str(k): v for k, v in self.n_labels.items()},
            "accuracy": [{"task": j, "after": i, "value": self.acc[(j, i)]}
                         for (j, i) in self.pairs() if (j, i) in self.acc],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        m = cls([int(t) for t in d["tasks"]], {int(k): int(v) for k, v in d["n_labels"].items()})
        for e in d["accuracy"]:
            m.acc[(int(e["task"]), int(e["after"]))] = float(e["value"])
        return m


@dataclass
class ForgettingReport:
    matrix: AccuracyMatrix
    forgetting: dict[tuple[int, int], float]
    difficulty: dict[int, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    names: dict[int, str] = field(default_factory=dict)

    def name(self, task_id: int) -> str:
        return self.names.get(task_id, f"task{task_id}")

    @property
    def undefined(self) -> list[int]:
        """Tasks whose reference accuracy was at or below chance."""
        return sorted({j for (j, _), v in self.forgetting.items() if np.isnan(v)})

    def mean_forgetting(self, j: int) -> Optional[float]:
        vals = [v for (jj, _), v in self.forgetting.items() if jj == j]
        return float(np.mean(vals)) if vals else None

    def final_forgetting(self, j: int) -> Optional[float]:
        last = self.matrix.tasks[-1]
        return self.forgetting.get((j, last))

    def final_accuracy(self, j: int) -> float:
        return self.matrix.get(j, self.matrix.tasks[-1])

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.to_dict(),
            "forgetting": [{"task": j, "after": i, "value": v}
                           for (j, i), v in self.forgetting.items()],
            "difficulty": {str(k): v for k, v in self.difficulty.items()},
            "names": {str(k): v for k, v in self.names.items()},
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ForgettingReport":
        return cls(
            matrix=AccuracyMatrix.from_dict(d["matrix"]),
            forgetting={(int(e["task"]), int(e["after"])): float(e["value"]) for e in d["forgetting"]},
            difficulty={int(k): float(v) for k, v in d.get("difficulty", {}).items()},
            metadata=d.get("metadata", {}),
            names={int(k): v for k, v in d.get("names", {}).items()},
        )

    @classmethod
    def from_json(cls, text: str) -> "ForgettingReport":
        return cls.from_dict(json.loads(text))

    # -- rendering -------------------------------------------------------
    def accuracy_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "after_task", "accuracy"])
        for (j, i) in self.matrix.pairs():
            w.writerow([j, i, repr(self.matrix.get(j, i))])
        return buf.getvalue()

    def forgetting_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "after_task", "reference_accuracy", "accuracy", "chance", "forgetting"])
        for (j, i), v in self.forgetting.items():
            w.writerow([j, i, repr(self.matrix.reference(j)), repr(self.matrix.get(j, i)),
                        repr(chance_accuracy(self.matrix.n_labels[j])), repr(v)])
        return buf.getvalue()

    def to_text(self) -> str:
        tasks = self.matrix.tasks
        names = [self.name(t) for t in tasks]
        width = max(12, *(len(n) + 2 for n in names))
        lines = ["Task order: " + " -> ".join(names), "", "Accuracy (%) of each task (rows) after learning each task (columns)"]
        lines.append(" " * width + "".join(f"{n:>{width}}" for n in names))
        for j in tasks:
            cells = []
            for i in tasks:
                cells.append(f"{self.matrix.get(j, i):>{width}.2f}" if (j, i) in self.matrix.acc
                             else " " * width)
            lines.append(f"{self.name(j):<{width}}" + "".join(cells))
        if self.forgetting:
            lines += ["", "Forgetting rate (%) of each task (rows) after learning each later task (columns)"]
            lines.append(" " * width + "".join(f"{n:>{width}}" for n in names[1:]))
            for j in tasks[:-1]:
                cells = []
                for i in tasks[1:]:
                    v = self.forgetting.get((j, i))
                    if v is None:
                        cells.append(" " * width)
                    elif np.isnan(v):
                        cells.append(f"{'n/a':>{width}}")
                    else:
                        cells.append(f"{100 * v:>{width - 1}.2f}%")
                lines.append(f"{self.name(j):<{width}}" + "".join(cells))
            if self.undefined:
                lines.append("n/a: reference accuracy not above chance for "
                             + ", ".join(self.name(j) for j in self.undefined))
        if self.difficulty:
            lines += ["", "Difficulty (#train / #labels, larger is easier)"]
            for t in tasks:
                if t in self.difficulty:
                    lines.append(f"{self.name(t):<{width}}{self.difficulty[t]:>{width}.2f}")
        return "\n".join(lines) + "\n"


def build_report(matrix: AccuracyMatrix, difficulty: Optional[dict[int, float]] = None,
                 metadata: Optional[dict] = None, names: Optional[dict[int, str]] = None) -> ForgettingReport:
    """Forgetting rate for every (j, i) pair with i learned after j.

    A task whose reference accuracy never rose above chance has no defined
    forgetting rate; its entries are NaN and listed under ``undefined``.
    """
    missing = matrix.missing()
    if missing:
        raise CompletenessError(f"accuracy matrix is missing entries (task, after): {missing}")
    forgetting = {}
    for ii, i in enumerate(matrix.tasks):
        for j in matrix.tasks[:ii]:
            try:
                v = forgetting_rate(matrix.reference(j), matrix.get(j, i), matrix.n_labels[j])
            except DegenerateReferenceError:
                v = float("nan")
            forgetting[(j, i)] = v
    return ForgettingReport(matrix, forgetting, dict(difficulty or {}), dict(metadata or {}),
                            dict(names or {}))
