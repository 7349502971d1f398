"""Global average precision (GAP) and Hit@1 over per-example top-N predictions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TOP_N = 20


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ExamplePrediction:
    id: str
    labels: frozenset[int]
    # (class, confidence), confidence descending
    top: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class PredictionSet:
    examples: list[ExamplePrediction] = field(default_factory=list)
    top_n: int = TOP_N

    def add(self, example_id: str, scores: np.ndarray, labels) -> None:
        self.examples.append(ExamplePrediction(
            str(example_id), frozenset(int(c) for c in labels), top_predictions(scores, self.top_n)))

    def __len__(self) -> int:
        return len(self.examples)


def top_predictions(scores: np.ndarray, n: int = TOP_N) -> list[tuple[int, float]]:
    # Stable sort on -score keeps equal scores in class order.
    order = np.argsort(-np.asarray(scores), kind="stable")[:n]
    return [(int(c), float(scores[c])) for c in order]


def gap(preds: PredictionSet) -> float:
    """Average precision of all examples' top-N pairs merged into one ranking.

    The recall denominator counts every ground-truth label, including ones
    that never made an example's top-N.
    """
    positives = sum(len(ex.labels) for ex in preds.examples)
    if positives == 0:
        raise UndefinedMetricError("GAP is undefined with no ground-truth labels")
    pairs = []
    for ex in preds.examples:
        for cls, conf in ex.top[:preds.top_n]:
            pairs.append((-conf, ex.id, cls, cls in ex.labels))
    pairs.sort(key=lambda p: (p[0], p[1], p[2]))
    hits = 0
    total = 0.0
    for rank, (_, _, _, hit) in enumerate(pairs, start=1):
        if hit:
            hits += 1
            total += hits / rank
    return total / positives


def hit_at_1(preds: PredictionSet) -> float:
    if not preds.examples:
        raise UndefinedMetricError("Hit@1 is undefined on an empty prediction set")
    hits = 0
    for ex in preds.examples:
        if not ex.top:
            raise ValueError(f"example {ex.id} has no predictions")
        hits += ex.top[0][0] in ex.labels
    return hits / len(preds.examples)
