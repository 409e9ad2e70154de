"""Seeded sine-wave few-shot episodes.

Seeding: each task is drawn from its own PCG64 generator whose seed is
``SeedSequence([master_seed, split_code, index])``.  SeedSequence hashes its
entropy words, so tasks are index-addressed and splits never share streams.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

SPLIT_CODES = {"train": 1, "val": 2, "test": 3}

AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, math.pi)
X_RANGE = (-5.0, 5.0)
QUERY_SIZE = 50

DEFAULT_COUNTS = {"train": 70_000, "val": 1_000, "test": 2_000}


@dataclass(frozen=True)
class SineTask:
    amplitude: float
    phase: float
    support_x: np.ndarray = field(repr=False)
    support_y: np.ndarray = field(repr=False)
    query_x: np.ndarray = field(repr=False)
    query_y: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return len(self.support_x)

    def to_json(self) -> dict:
        return {
            "a": self.amplitude,
            "p": self.phase,
            "support": np.column_stack([self.support_x, self.support_y]).tolist(),
            "query": np.column_stack([self.query_x, self.query_y]).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SineTask":
        s = np.asarray(obj["support"], dtype=np.float64).reshape(-1, 2)
        q = np.asarray(obj["query"], dtype=np.float64).reshape(-1, 2)
        return cls(float(obj["a"]), float(obj["p"]), s[:, 0].copy(), s[:, 1].copy(),
                   q[:, 0].copy(), q[:, 1].copy())


def sine(amplitude: float, phase: float, x):
    return amplitude * np.sin(np.asarray(x, dtype=np.float64) - phase)


def task_rng(master_seed: int, split: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(master_seed), SPLIT_CODES[split], int(index)])
    return np.random.Generator(np.random.PCG64(ss))


def sample_task(rng: np.random.Generator, k: int, query_size: int = QUERY_SIZE,
                x_range: tuple[float, float] = X_RANGE) -> SineTask:
    if k < 1:
        raise ValueError("k must be >= 1")
    a = rng.uniform(*AMPLITUDE_RANGE)
    p = rng.uniform(*PHASE_RANGE)
    xs = rng.uniform(*x_range, size=k)
    xq = rng.uniform(*x_range, size=query_size)
    return SineTask(float(a), float(p), xs, sine(a, p, xs), xq, sine(a, p, xq))


@dataclass(frozen=True)
class TaskStream:
    split: str
    count: int
    seed: int
    k: int
    x_range: tuple[float, float] = X_RANGE

    def __post_init__(self):
        if self.split not in SPLIT_CODES:
            raise ValueError(f"unknown split {self.split!r}")
        if self.count < 1:
            raise ValueError("stream count must be >= 1")

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> SineTask:
        if not 0 <= index < self.count:
            raise IndexError(index)
        return sample_task(task_rng(self.seed, self.split, index), self.k, x_range=self.x_range)

    def __iter__(self) -> Iterator[SineTask]:
        return (self[i] for i in range(self.count))

    def dump_jsonl(self, path, limit: int | None = None) -> None:
        n = self.count if limit is None else min(limit, self.count)
        with open(path, "w") as fh:
            for i in range(n):
                fh.write(json.dumps(self[i].to_json()) + "\n")


def make_streams(k: int, train_count: int = DEFAULT_COUNTS["train"],
                 val_count: int = DEFAULT_COUNTS["val"], test_count: int = DEFAULT_COUNTS["test"],
                 master_seed: int = 0, x_range: tuple[float, float] = X_RANGE):
    return (TaskStream("train", train_count, master_seed, k, x_range),
            TaskStream("val", val_count, master_seed, k, x_range),
            TaskStream("test", test_count, master_seed, k, x_range))


def load_jsonl(path) -> list[SineTask]:
    with open(path) as fh:
        return [SineTask.from_json(json.loads(line)) for line in fh if line.strip()]
