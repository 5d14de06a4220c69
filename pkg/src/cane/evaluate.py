"""Model evaluation: top-k accuracy and candidate-set coverage."""

from __future__ import annotations

import numpy as np

from .search import beam_top

__all__ = ["topk_accuracy", "coverage_probability"]


def topk_accuracy(model, dataset, j: int) -> dict[int, float]:
    """Top-1 through top-j accuracy from a width-j beam per example."""
    if j < 1:
        raise ValueError("j must be >= 1")
    hits = np.zeros(j, dtype=np.int64)
    for ex in dataset.examples:
        ranked = beam_top(
            model.tree, model.edge_params, model.representation, ex.features, j
        )
        for pos, (cls, _) in enumerate(ranked):
            if cls == ex.label:
                hits[pos:] += 1
                break
    n = len(dataset.examples)
    return {rank + 1: float(hits[rank]) / n for rank in range(j)}


def coverage_probability(model, dataset, num_candidates: int) -> float:
    """Fraction of examples whose label lands in the beam's candidate set."""
    return topk_accuracy(model, dataset, num_candidates)[num_candidates]
