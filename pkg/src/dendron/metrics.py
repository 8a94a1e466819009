"""Accuracy matrix and the summary numbers derived from it."""
from __future__ import annotations

import numpy as np


class AccuracyMatrix:
    """Lower-triangular ``a[k][j]``: accuracy on task j after training task k."""

    def __init__(self, n_tasks: int):
        self.n_tasks = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows):
        m = cls(len(rows))
        for k, row in enumerate(rows):
            if len(row) != k + 1:
                raise ValueError(f"row {k} must have {k + 1} entries, got {len(row)}")
            for j, v in enumerate(row):
                m.record(k, j, v)
        return m

    def record(self, k: int, j: int, accuracy: float):
        if j > k:
            raise IndexError(f"a[{k}][{j}] is above the diagonal")
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        self.values[k, j] = accuracy

    def rows(self) -> list[list[float]]:
        return [[float(v) for v in self.values[k, : k + 1]] for k in range(self.n_tasks)]

    def completed_rows(self) -> int:
        n = 0
        while n < self.n_tasks and not np.isnan(self.values[n, : n + 1]).any():
            n += 1
        return n

    def __getitem__(self, idx):
        return self.values[idx]


def _rows(a):
    if isinstance(a, AccuracyMatrix):
        return a.rows()[: a.completed_rows()]
    return [list(map(float, r)) for r in a]


def average_accuracy(a) -> float:
    rows = _rows(a)
    if not rows:
        raise ValueError("empty accuracy matrix")
    last = rows[-1]
    if len(last) != len(rows):
        raise ValueError("last row is incomplete")
    return sum(last) / len(last)


def forgetting_measure(a) -> float:
    """Mean over earlier tasks of (best past accuracy - final accuracy)."""
    rows = _rows(a)
    t = len(rows)
    if t < 2:
        raise ValueError("forgetting is undefined for fewer than 2 tasks")
    final = rows[-1]
    drops = [max(rows[l][j] for l in range(j, t - 1)) - final[j] for j in range(t - 1)]
    return sum(drops) / (t - 1)


def cumulative_accuracy_curve(a) -> list[tuple[int, float]]:
    return [(k, sum(row) / len(row)) for k, row in enumerate(_rows(a))]
