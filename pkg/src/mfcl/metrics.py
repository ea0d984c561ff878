"""Accuracy matrix, average accuracy / forgetting, and report files.

Report JSON (``schema_version`` 1)::

    {
      "schema_version": 1,
      "seed": int,
      "config": {...},                 # resolved experiment config
      "matrix": {
        "task_counts": [int, ...],     # test samples per task
        "checkpoints": [
          {"task": int, "round": int, "boundary": bool, "accuracy": [float, ...]}
        ]
      },
      "average_accuracy": float,
      "average_forgetting": float | null,   # null when only one task
      "forgetting": [float, ...],           # f^t for t = 1..T-1
      "communication": [{"task": int, "per_round_params": int, "per_task_params": int}]
    }

Tasks are 0-based in files. ``accuracy[j]`` is the checkpoint's accuracy on
task ``j``; a checkpoint taken during task ``t`` has ``t + 1`` entries.
The CSV companion has one row per occupied cell: ``checkpoint,task,accuracy``.
Wallclock timings go to a separate ``timing.json`` so that reports of
identical runs are byte-identical.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class Checkpoint:
    task: int
    round: int
    boundary: bool
    accuracy: list[float]


@dataclass
class AccuracyMatrix:
    task_counts: list[int]
    checkpoints: list[Checkpoint] = field(default_factory=list)

    def add(self, task, round_, boundary, accuracy):
        accuracy = [float(a) for a in accuracy]
        if len(accuracy) != task + 1:
            raise ValueError(f"checkpoint in task {task} needs {task + 1} entries, got {len(accuracy)}")
        if any(not 0.0 <= a <= 1.0 for a in accuracy):
            raise ValueError(f"accuracies must lie in [0, 1]: {accuracy}")
        if self.checkpoints and task < self.checkpoints[-1].task:
            raise ValueError("checkpoints must be added in task order")
        self.checkpoints.append(Checkpoint(int(task), int(round_), bool(boundary), accuracy))

    @property
    def num_tasks(self) -> int:
        return len(self.task_counts)

    def boundary_rows(self) -> list[Checkpoint]:
        rows = {}
        for c in self.checkpoints:
            if c.boundary:
                rows[c.task] = c
        missing = [t for t in range(self.num_tasks) if t not in rows]
        if missing:
            raise ValueError(f"no end-of-task checkpoint for tasks {missing}")
        return [rows[t] for t in range(self.num_tasks)]

    def cells(self):
        for i, c in enumerate(self.checkpoints):
            for t, a in enumerate(c.accuracy):
                yield i, t, a

    def to_dict(self):
        return {"task_counts": list(self.task_counts),
                "checkpoints": [{"task": c.task, "round": c.round, "boundary": c.boundary,
                                 "accuracy": list(c.accuracy)} for c in self.checkpoints]}

    @classmethod
    def from_dict(cls, d):
        m = cls([int(n) for n in d["task_counts"]])
        for c in d["checkpoints"]:
            m.checkpoints.append(Checkpoint(c["task"], c["round"], c["boundary"],
                                            [float(a) for a in c["accuracy"]]))
        return m


def evaluate(model, stream, upto_task: int) -> list[float]:
    """Top-1 accuracy on each task ``0..upto_task`` using argmax over every
    discovered class, eval mode."""
    accs = []
    for task in stream.tasks[:upto_task + 1]:
        if len(task.test_idx) == 0:
            raise ValueError(f"task {task.index} has an empty test set")
        x = stream.test.images[task.test_idx]
        y = stream.test.labels[task.test_idx]
        accs.append(float(np.mean(model.predict(x) == y)))
    return accs


def seen_accuracy(row: Checkpoint, task_counts) -> float:
    """Accuracy over every class seen at this checkpoint (sample-weighted)."""
    counts = task_counts[:len(row.accuracy)]
    total = sum(counts)
    # normalized weights and a correctly rounded sum: one task reduces to A exactly
    return math.fsum(a * (n / total) for a, n in zip(row.accuracy, counts))


def average_accuracy(matrix: AccuracyMatrix) -> float:
    rows = matrix.boundary_rows()
    return float(np.mean([seen_accuracy(r, matrix.task_counts) for r in rows]))


def forgetting(matrix: AccuracyMatrix, t: int) -> float:
    """Best accuracy on task ``t`` over all checkpoints minus its final value."""
    final = matrix.checkpoints[-1]
    if not final.boundary or final.task != matrix.num_tasks - 1:
        raise ValueError("matrix has no final end-of-training checkpoint")
    history = [c.accuracy[t] for c in matrix.checkpoints if c.task >= t]
    return float(max(history) - final.accuracy[t])


def average_forgetting(matrix: AccuracyMatrix) -> float | None:
    """Mean of ``f^t`` over all tasks but the last; ``None`` for one task."""
    if matrix.num_tasks < 2:
        return None
    return float(np.mean([forgetting(matrix, t) for t in range(matrix.num_tasks - 1)]))


@dataclass
class Report:
    seed: int
    config: dict
    matrix: AccuracyMatrix
    average_accuracy: float
    average_forgetting: float | None
    forgetting: list[float]
    communication: list[dict] = field(default_factory=list)
    wallclock: dict = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, seed, config, matrix, communication=(), wallclock=None):
        return cls(seed=seed, config=config, matrix=matrix,
                   average_accuracy=average_accuracy(matrix),
                   average_forgetting=average_forgetting(matrix),
                   forgetting=[forgetting(matrix, t) for t in range(matrix.num_tasks - 1)],
                   communication=list(communication), wallclock=dict(wallclock or {}))

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "seed": self.seed, "config": self.config,
                "matrix": self.matrix.to_dict(), "average_accuracy": self.average_accuracy,
                "average_forgetting": self.average_forgetting, "forgetting": self.forgetting,
                "communication": self.communication}

    @classmethod
    def from_dict(cls, d, wallclock=None):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"report schema {d.get('schema_version')}, expected {SCHEMA_VERSION}")
        return cls(seed=d["seed"], config=d["config"], matrix=AccuracyMatrix.from_dict(d["matrix"]),
                   average_accuracy=d["average_accuracy"],
                   average_forgetting=d["average_forgetting"], forgetting=d["forgetting"],
                   communication=d["communication"], wallclock=dict(wallclock or {}))


def report_json(report: Report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def export_report(report: Report, directory) -> dict[str, Path]:
    """Write ``report.json``, ``accuracy.csv`` and ``timing.json`` into ``directory``."""
    directory = Path(directory)
    paths = {"report": directory / "report.json", "csv": directory / "accuracy.csv",
             "timing": directory / "timing.json"}
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths["report"].write_text(report_json(report))
        with open(paths["csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["checkpoint", "task", "accuracy"])
            for i, t, a in report.matrix.cells():
                writer.writerow([i, t, repr(a)])
        paths["timing"].write_text(json.dumps(report.wallclock, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {directory}: {exc}") from exc
    return paths


def load_report(path) -> Report:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    timing = path.with_name("timing.json")
    wallclock = json.loads(timing.read_text()) if timing.exists() else {}
    return Report.from_dict(d, wallclock)


def read_accuracy_csv(path) -> list[tuple[int, int, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["checkpoint"]), int(r["task"]), float(r["accuracy"])) for r in reader]
