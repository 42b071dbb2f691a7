"""
Experiment orchestration: run a task sequence end to end and render reports.

A run directory holds::

    config.json          the full run configuration and its hash
    results.json         raw accuracy matrix plus per-task facts
    metrics.csv          one row per optimisation step
    tasks.csv            replay steps, buffer size and hash checks per task
    checkpoints/task_<id>.ckpt
    report.json  report.txt  accuracy.csv  forgetting.csv  traces.csv

The last five files are rendered from the raw ones by :func:`render_report`,
so re-rendering an existing run reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Union

from tamcl.checkpoint import save_model
from tamcl.errors import ConfigError, ValidationError
from tamcl.evaluation import AccuracyMatrix, ForgettingReport, build_report, difficulty_score, evaluate
from tamcl.model import ModelConfig, TAMCLModel
from tamcl.tasks import TaskSpec, default_sequence, generate_task, load_manifest
from tamcl.trainer import ContinualTrainer, StepRecord, TaskReport, TrainConfig

ABLATIONS = ("no_tab", "no_ikd", "no_replay")
RAW_FILES = ("config.json", "results.json", "metrics.csv")
RENDERED_FILES = ("report.json", "report.txt", "accuracy.csv", "forgetting.csv", "traces.csv")


@dataclass
class RunConfig:
    manifest: Optional[str] = None  # None -> default synthetic sequence
    n_tasks: int = 3  # length of the default sequence
    data_seed: int = 0  # base seed of the default sequence
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    mlp_dim: int = 128
    patch: int = 4
    n_frozen: Optional[int] = None
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 5
    batch_size: int = 16
    replay_fraction: float = 0.05
    replay_freq: int = 100
    alpha: float = 5000.0
    temperature: float = 1.0
    div_mode: str = "repel"
    ablations: tuple[str, ...] = ()
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.ablations = tuple(sorted(set(self.ablations)))
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation(s) {sorted(bad)}; choose from {ABLATIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown run config field(s) {sorted(bad)}")
        return cls(**d)

    def hash(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def task_specs(self) -> list[TaskSpec]:
        if self.manifest:
            return load_manifest(self.manifest)
        return default_sequence(self.n_tasks, base_seed=self.data_seed)

    def model_config(self, specs: list[TaskSpec]) -> ModelConfig:
        first = specs[0]
        for s in specs[1:]:
            if (s.image_size, s.channels, s.vocab_size) != (first.image_size, first.channels, first.vocab_size):
                raise ConfigError(f"task {s.task_id}: image size, channels and vocabulary must match "
                                  f"the first task (the encoder is shared)")
        return ModelConfig(image_size=first.image_size, channels=first.channels, patch=self.patch,
                           vocab_size=first.vocab_size, max_text_len=max(s.text_len for s in specs),
                           hidden=self.hidden, depth=self.depth, heads=self.heads, mlp_dim=self.mlp_dim,
                           n_frozen=self.n_frozen, use_tab="no_tab" not in self.ablations)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
                           batch_size=self.batch_size, replay_fraction=self.replay_fraction,
                           replay_freq=self.replay_freq, alpha=self.alpha, temperature=self.temperature,
                           div_mode=self.div_mode, use_ikd="no_ikd" not in self.ablations,
                           use_replay="no_replay" not in self.ablations, seed=self.seed)


@dataclass
class RunResult:
    out_dir: Path
    report: ForgettingReport
    records: list[StepRecord]
    task_reports: list[TaskReport] = field(default_factory=list)


# ---------------------------------------------------------------------------
# raw artifact writers
# ---------------------------------------------------------------------------

METRIC_FIELDS = [f.name for f in fields(StepRecord)]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(records: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])
    return buf.getvalue()


def read_metrics(path: Union[str, Path]) -> list[StepRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(StepRecord(
                task_id=int(row["task_id"]), batch_task=int(row["batch_task"]), step=int(row["step"]),
                epoch=int(row["epoch"]), replay=row["replay"] == "1", n_tasks=int(row["n_tasks"]),
                **{k: float(row[k]) for k in ("l_c", "l_ikd", "l_div", "lam", "alpha", "beta", "loss")}))
    return out


def tasks_csv(reports: list[TaskReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "n_steps", "replay_steps", "buffer_size", "teacher_constant", "frozen_constant"])
    for r in reports:
        w.writerow([r.task_id, r.n_steps, " ".join(map(str, r.replay_steps)), r.buffer_size,
                    int(r.teacher_hash_start == r.teacher_hash_end),
                    int(r.frozen_hash_start == r.frozen_hash_end)])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# run / report
# ---------------------------------------------------------------------------

def run_experiment(cfg: RunConfig, log: Optional[Callable[[str], None]] = None) -> RunResult:
    """Train every task in order, evaluating all tasks seen so far after each one.

    Raw artifacts are flushed after every task and on failure, so an aborted
    run leaves whatever it had measured.
    """
    log = log or (lambda msg: None)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = cfg.task_specs()
    _write(out / "config.json", json.dumps({"config": cfg.to_dict(), "config_hash": cfg.hash(),
                                            "tasks": [s.to_dict() for s in specs]}, indent=2, sort_keys=True))
    model = TAMCLModel(cfg.model_config(specs), seed=cfg.seed)
    trainer = ContinualTrainer(model, cfg.train_config())
    matrix = AccuracyMatrix()
    task_reports: list[TaskReport] = []
    tests = {}

    def flush() -> None:
        _write(out / "metrics.csv", metrics_csv(trainer.records))
        _write(out / "tasks.csv", tasks_csv(task_reports))
        _write(out / "results.json", json.dumps({
            "matrix": matrix.to_dict(),
            "tasks": [{"task_id": s.task_id, "name": s.label, "n_train": s.n_train, "n_labels": s.n_labels}
                      for s in specs],
            "complete": len(task_reports) == len(specs) and not matrix.missing(),
        }, indent=2, sort_keys=True))

    try:
        for spec in specs:
            train, test = generate_task(spec)
            tests[spec.task_id] = test
            matrix.add_task(spec.task_id, spec.n_labels)
            rep = trainer.train_task(spec.task_id, train, spec.n_labels, spec.dual_image)
            task_reports.append(rep)
            for tid in matrix.tasks:
                matrix.set(tid, spec.task_id, evaluate(model, tid, tests[tid]))
            save_model(model, out / "checkpoints" / f"task_{spec.task_id}.ckpt")
            log(f"task {spec.label}: {rep.n_steps} steps, {len(rep.replay_steps)} replay, "
                f"acc {matrix.get(spec.task_id, spec.task_id):.2f}% ({rep.seconds:.1f}s)")
    finally:
        flush()
    report = render_report(out)
    return RunResult(out, report, trainer.records, task_reports)


def traces_csv(records: list[StepRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "task_id", "batch_task", "step", "replay", "lambda", "beta", "l_c", "l_ikd",
                "l_div", "loss"])
    for n, r in enumerate(records):
        w.writerow([n, r.task_id, r.batch_task, r.step, int(r.replay), repr(r.lam), repr(r.beta),
                    repr(r.l_c), repr(r.l_ikd), repr(r.l_div), repr(r.loss)])
    return buf.getvalue()


def load_report(run_dir: Union[str, Path]) -> ForgettingReport:
    """Rebuild the report from the raw artifacts of ``run_dir``."""
    run_dir = Path(run_dir)
    missing = [f for f in RAW_FILES if not (run_dir / f).is_file()]
    if missing:
        raise ValidationError(f"{run_dir}: missing run artifact(s): {', '.join(missing)}")
    cfg = json.loads((run_dir / "config.json").read_text())
    res = json.loads((run_dir / "results.json").read_text())
    if not res.get("complete"):
        raise ValidationError(f"{run_dir}: run did not complete; results.json is partial")
    matrix = AccuracyMatrix.from_dict(res["matrix"])
    tasks = res["tasks"]
    return build_report(
        matrix,
        difficulty={t["task_id"]: difficulty_score(t["n_train"], t["n_labels"]) for t in tasks},
        metadata={"seed": cfg["config"]["seed"], "config_hash": cfg["config_hash"],
                  "ablations": cfg["config"]["ablations"]},
        names={t["task_id"]: t["name"] for t in tasks},
    )


def render_report(run_dir: Union[str, Path]) -> ForgettingReport:
    """Write the rendered tables of ``run_dir`` and return the report."""
    run_dir = Path(run_dir)
    report = load_report(run_dir)
    records = read_metrics(run_dir / "metrics.csv")
    _write(run_dir / "report.json", report.to_json())
    _write(run_dir / "report.txt", report.to_text())
    _write(run_dir / "accuracy.csv", report.accuracy_csv())
    _write(run_dir / "forgetting.csv", report.forgetting_csv())
    _write(run_dir / "traces.csv", traces_csv(records))
    return report


def seed_summary(reports: list[ForgettingReport], task_id: int) -> tuple[float, float]:
    """Mean and standard error of a task's final forgetting rate across runs."""
    vals = [r.final_forgetting(task_id) for r in reports]
    n = len(vals)
    mean = sum(vals) / n
    if n < 2:
        return mean, float("nan")
    var = sum((v - mean) ** 2 for v in vals) / (n - 1)
    return mean, math.sqrt(var / n)
