"""Beam search over a label tree.

The search is level-synchronous: every frontier node is expanded, the
highest-scoring nodes survive to the next level, and leaves drop out of
the frontier into a result pool.  The pool is ranked at the end, so the
returned scores are always exact path sums for the returned classes even
though the search itself is a heuristic and may prune the global argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tree import LabelTree, Representation, edge_dots

__all__ = ["SearchStats", "beam_top", "predict_top_j"]


@dataclass
class SearchStats:
    """Instrumentation counters; ``expansions`` is one per edge relaxed."""

    expansions: int = 0
    levels: int = 0


@dataclass(order=True)
class _BeamEntry:
    # Sort key: higher score wins, ties break toward the lower node id.
    neg_score: float
    node: int
    score: float = field(compare=False)


def beam_top(
    tree: LabelTree,
    params: np.ndarray,
    representation: Representation,
    x: tuple[np.ndarray, np.ndarray],
    width: int,
    stats: SearchStats | None = None,
) -> list[tuple[int, float]]:
    """Top classes by beam search with the given beam width.

    Returns ``min(width, K)`` pairs ``(class, path-sum score)`` sorted by
    score descending, ties broken toward the lower class id.  With
    ``width >= K`` nothing is ever pruned and the result equals the
    exhaustive ranking.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    idx, val = representation.apply(*x)
    frontier = [_BeamEntry(0.0, 0, 0.0)]
    pool: list[tuple[float, int]] = []  # (neg score, class)
    while frontier:
        expanded: list[_BeamEntry] = []
        for entry in frontier:
            cls = int(tree.node_class[entry.node])
            if cls >= 0:
                pool.append((entry.neg_score, cls))
                continue
            kids = tree.children[entry.node]
            edges = tree.child_edges(entry.node)
            child_scores = entry.score + edge_dots(params, edges, idx, val)
            if stats is not None:
                stats.expansions += len(kids)
            expanded.extend(
                _BeamEntry(-float(s), child, float(s))
                for child, s in zip(kids, child_scores)
            )
        if len(expanded) > width:
            expanded.sort()
            del expanded[width:]
        frontier = expanded
        if stats is not None:
            stats.levels += 1
    pool.sort()
    return [(cls, -neg) for neg, cls in pool[:width]]


def predict_top_j(model, x, width: int) -> list[int]:
    """Classes only, from :func:`beam_top` on a trained tree model."""
    if hasattr(x, "features"):
        x = x.features
    ranked = beam_top(model.tree, model.edge_params, model.representation, x, width)
    return [cls for cls, _ in ranked]
