"""Pick where a new task's node attaches, by normalised output entropy.

Every earlier task's path classifies the new task's training data. A path
that is confident (low entropy relative to ``ln C``) on data it never saw is
taken as evidence the tasks are similar, and the new node grows under it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ndnn import ValidationError
from .tree import BACKBONE, ModelTree, candidate_nodes, predict


@dataclass(frozen=True)
class CandidateEntropy:
    node_id: int
    task_id: int
    entropy: float
    max_entropy: float

    @property
    def ratio(self) -> float:
        return self.entropy / self.max_entropy


@dataclass
class EntropyReport:
    candidates: list[CandidateEntropy] = field(default_factory=list)
    chosen: int = BACKBONE
    threshold: float = 1.0

    def rows(self):
        """One dict per candidate, ready for CSV output."""
        return [
            {
                "node_id": c.node_id,
                "task_id": c.task_id,
                "entropy": c.entropy,
                "max_entropy": c.max_entropy,
                "ratio": c.ratio,
                "chosen": self.chosen,
                "threshold": self.threshold,
            }
            for c in self.candidates
        ]


def entropy_of_probs(probs) -> float:
    """Mean Shannon entropy (nats) of the rows of ``probs``; 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValidationError("need a non-empty [N, C] probability array")
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-plogp.sum(axis=1).mean())


def max_entropy(class_count: int) -> float:
    if class_count < 2:
        raise ValidationError(f"max entropy needs at least 2 classes, got {class_count}")
    return math.log(class_count)


def task_entropy(tree: ModelTree, task_id: int, new_data) -> float:
    """Entropy of task ``task_id``'s predictions on the new task's samples."""
    x = new_data.features if hasattr(new_data, "features") else new_data
    if len(x) == 0:
        raise ValidationError("cannot compute entropy on an empty dataset")
    return entropy_of_probs(predict(tree, task_id, x))


def choose(ratios, task_ids, node_ids, threshold) -> int:
    """Node with the lowest ratio below ``threshold``; BACKBONE if none qualifies.

    Ties go to the earliest task.
    """
    best = None
    for r, t, n in zip(ratios, task_ids, node_ids):
        if r < threshold and (best is None or (r, t) < best[:2]):
            best = (r, t, n)
    return BACKBONE if best is None else best[2]


def select_attachment(tree: ModelTree, new_data, threshold: float):
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must be in (0, 1], got {threshold}")
    report = EntropyReport(threshold=threshold)
    trained = set(tree.trained_task_ids)
    for node_id in candidate_nodes(tree):
        if node_id == BACKBONE:
            continue
        node = tree.nodes[node_id]
        if node.task_id not in trained:
            continue
        report.candidates.append(CandidateEntropy(
            node_id=node_id,
            task_id=node.task_id,
            entropy=task_entropy(tree, node.task_id, new_data),
            max_entropy=max_entropy(node.class_count),
        ))
    report.chosen = choose(
        [c.ratio for c in report.candidates],
        [c.task_id for c in report.candidates],
        [c.node_id for c in report.candidates],
        threshold,
    )
    return report.chosen, report
