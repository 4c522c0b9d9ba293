"""Synthetic few-shot episodes and their text serialization."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FAMILIES = ("sinusoid", "blobs")


@dataclass(frozen=True, eq=False)
class Task:
    """One few-shot episode: query ``(X, Y)`` and support ``(X_support, Y_support)``."""

    X: np.ndarray
    Y: np.ndarray
    X_support: np.ndarray
    Y_support: np.ndarray

    def __post_init__(self):
        for name in ("X", "Y", "X_support", "Y_support"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.ndim != 2:
                raise ValueError(f"{name} must be a 2-d array, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.n < 1 or self.m < 1:
            raise ValueError("a task needs at least one query and one support sample")
        if self.Y.shape[0] != self.n or self.Y_support.shape[0] != self.m:
            raise ValueError("inputs and targets disagree on sample counts")
        if self.X_support.shape[1] != self.d or self.Y_support.shape[1] != self.k:
            raise ValueError("query and support sets disagree on dimensions")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X_support.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def k(self) -> int:
        return self.Y.shape[1]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.n, self.m, self.d, self.k)

    def scaled_labels(self, c: float) -> "Task":
        return Task(self.X, c * self.Y, self.X_support, c * self.Y_support)

    def __eq__(self, other):
        if not isinstance(other, Task):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, a), getattr(other, a)) for a in ("X", "Y", "X_support", "Y_support")
        )

    __hash__ = None


@dataclass(frozen=True)
class TaskBatchConfig:
    """Parameters of a synthetic batch of tasks.

    ``family="sinusoid"`` draws ``y = a sin(sum(x_raw) + phase + o pi / k)`` with
    ``x_raw`` uniform in ``[-input_range, input_range]^d``. ``family="blobs"``
    draws ``k``-way Gaussian clusters with centered one-hot targets.
    """

    N: int = 4
    n: int = 5
    m: int = 5
    d: int = 1
    k: int = 1
    family: str = "sinusoid"
    seed: int = 0
    normalize_inputs: bool = True
    amplitude: tuple[float, float] = (0.1, 5.0)
    phase: tuple[float, float] = (0.0, math.pi)
    input_range: float = 5.0
    spread: float = 0.3

    def __post_init__(self):
        if min(self.N, self.n, self.m, self.d, self.k) < 1:
            raise ValueError("all task counts and dimensions must be at least 1")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "amplitude", tuple(float(a) for a in self.amplitude))
        object.__setattr__(self, "phase", tuple(float(p) for p in self.phase))


def centered_one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    """``(k-1)/k`` on the true class and ``-1/k`` elsewhere."""
    Y = np.full((labels.size, k), -1.0 / k)
    Y[np.arange(labels.size), labels] = (k - 1) / k
    return Y


def _distinct_rows(A: np.ndarray, B: np.ndarray) -> bool:
    rows = {r.tobytes() for r in A}
    if len(rows) != A.shape[0]:
        return False
    rows_b = {r.tobytes() for r in B}
    return len(rows_b) == B.shape[0] and not (rows & rows_b)


def _sinusoid_task(cfg: TaskBatchConfig, rng: np.random.Generator) -> Task:
    a = rng.uniform(*cfg.amplitude) if cfg.amplitude[0] != cfg.amplitude[1] else cfg.amplitude[0]
    ph = rng.uniform(*cfg.phase) if cfg.phase[0] != cfg.phase[1] else cfg.phase[0]
    scale = cfg.input_range * math.sqrt(cfg.d) if cfg.normalize_inputs else 1.0
    offsets = np.arange(cfg.k) * math.pi / cfg.k

    def draw(count):
        raw = rng.uniform(-cfg.input_range, cfg.input_range, (count, cfg.d))
        Y = a * np.sin(raw.sum(axis=1, keepdims=True) + ph + offsets)
        return raw / scale, Y

    while True:
        Xs, Ys = draw(cfg.m)
        Xq, Yq = draw(cfg.n)
        if _distinct_rows(Xs, Xq):
            return Task(Xq, Yq, Xs, Ys)


def _blobs_task(cfg: TaskBatchConfig, rng: np.random.Generator) -> Task:
    centers = rng.uniform(-1.0, 1.0, (cfg.k, cfg.d))

    def draw(count):
        labels = np.arange(count) % cfg.k
        X = centers[labels] + cfg.spread * rng.standard_normal((count, cfg.d))
        return X, centered_one_hot(labels, cfg.k)

    while True:
        Xs, Ys = draw(cfg.m)
        Xq, Yq = draw(cfg.n)
        if cfg.normalize_inputs:
            # one scale per task keeps the within-task geometry intact
            norm = max(1.0, np.linalg.norm(Xs, axis=1).max(), np.linalg.norm(Xq, axis=1).max())
            Xs, Xq = Xs / norm, Xq / norm
        if _distinct_rows(Xs, Xq):
            return Task(Xq, Yq, Xs, Ys)


def gen_tasks(config: TaskBatchConfig) -> list[Task]:
    """Generate ``config.N`` tasks from a single seeded PRNG stream."""
    rng = np.random.default_rng(config.seed)
    make = _sinusoid_task if config.family == "sinusoid" else _blobs_task
    return [make(config, rng) for _ in range(config.N)]


class TaskFileError(ValueError):
    """A task file failed to parse; the message names the offending line."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def _check_uniform(tasks: Sequence[Task]) -> tuple[int, int, int, int]:
    shapes = {t.shape for t in tasks}
    if len(shapes) > 1:
        raise ValueError(f"tasks have heterogeneous shapes {sorted(shapes)}")
    return shapes.pop() if shapes else (0, 0, 0, 0)


def format_tasks(tasks: Sequence[Task], family: str = "custom", seed: int = 0) -> str:
    n, m, d, k = _check_uniform(tasks)
    lines = [f"{len(tasks)} {n} {m} {d} {k} {family} {seed}"]
    for t in tasks:
        for block in (t.X_support, t.Y_support, t.X, t.Y):
            lines.extend(" ".join(repr(float(v)) for v in row) for row in block)
    return "\n".join(lines) + "\n"


def save_tasks(tasks: Sequence[Task], path, family: str = "custom", seed: int = 0) -> None:
    """Write tasks atomically as text: a header ``N n m d k family seed``, then
    per task the rows of ``X_support``, ``Y_support``, ``X``, ``Y``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(format_tasks(tasks, family, seed))
    os.replace(tmp, path)


def parse_tasks(text: str, source="<string>") -> tuple[list[Task], dict]:
    lines = text.splitlines()
    if not lines:
        raise TaskFileError(source, 1, "empty file, expected header 'N n m d k family seed'")
    head = lines[0].split()
    if len(head) != 7:
        raise TaskFileError(source, 1, f"header needs 7 fields 'N n m d k family seed', got {len(head)}")
    try:
        N, n, m, d, k = (int(v) for v in head[:5])
        seed = int(head[6])
    except ValueError as exc:
        raise TaskFileError(source, 1, f"bad header: {exc}") from None
    meta = {"N": N, "n": n, "m": m, "d": d, "k": k, "family": head[5], "seed": seed}
    expected = 1 + N * 2 * (n + m)
    if len(lines) != expected:
        # point at the first missing line, or the first surplus one
        line = len(lines) + 1 if len(lines) < expected else expected + 1
        raise TaskFileError(source, line, f"header implies {expected} lines, file has {len(lines)}")
    cursor = 1

    def read_block(rows, cols):
        nonlocal cursor
        out = np.empty((rows, cols))
        for r in range(rows):
            fields = lines[cursor].split()
            if len(fields) != cols:
                raise TaskFileError(source, cursor + 1, f"expected {cols} values, got {len(fields)}")
            try:
                out[r] = [float(v) for v in fields]
            except ValueError as exc:
                raise TaskFileError(source, cursor + 1, str(exc)) from None
            cursor += 1
        return out

    tasks = []
    for _ in range(N):
        Xs, Ys = read_block(m, d), read_block(m, k)
        Xq, Yq = read_block(n, d), read_block(n, k)
        tasks.append(Task(Xq, Yq, Xs, Ys))
    return tasks, meta


def load_tasks(path) -> list[Task]:
    return parse_tasks(Path(path).read_text(), source=path)[0]
