"""Label trees: b-nary trees over classes with parameters on the edges.

Classes sit at the leaves and the score of a class is the inner product
of the input representation with the sum of edge vectors along the
root-to-leaf path.  Trees are built by recursive clustering of class
centers and then rebuilt as balanced b-nary trees over the resulting
leaf order, so the final depth is always ``ceil(log_b K)``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LabelTree",
    "Representation",
    "build_tree_clustering",
    "rebalance",
    "path_of",
    "score_class",
    "edge_dots",
]


@dataclass(frozen=True)
class Representation:
    """Input-to-representation map ``g``; only the identity is supported.

    ``dim`` is the representation dimensionality, which for the identity
    map equals the feature count.  Parameterized maps are an extension
    point: add a kind here and teach :meth:`apply` about it.
    """

    dim: int
    kind: str = "identity"

    def __post_init__(self):
        if self.kind != "identity":
            raise NotImplementedError(f"representation kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("representation dim must be positive")

    def apply(self, indices: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map sparse input features to sparse representation coordinates."""
        return indices, values


class LabelTree:
    """Immutable b-nary tree over ``K`` classes.

    Nodes are integer ids with the root at 0.  Every non-root node has
    exactly one incoming edge; edge ids are assigned by breadth-first
    traversal, which fixes both the parameter-matrix layout and the
    deterministic accumulation order used by scoring.
    """

    def __init__(self, branching: int, children: list[list[int]], node_class: list[int]):
        if branching < 2:
            raise ValueError("branching must be >= 2")
        self.branching = branching
        self.children = tuple(tuple(c) for c in children)
        self.node_class = np.asarray(node_class, dtype=np.int64)
        n = len(self.children)
        if self.node_class.shape != (n,):
            raise ValueError("node_class must have one entry per node")

        self.parents = np.full(n, -1, dtype=np.int64)
        self.slots = np.full(n, -1, dtype=np.int64)
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        for node, kids in enumerate(self.children):
            if len(kids) > branching:
                raise ValueError(f"node {node} has more than {branching} children")
            if self.node_class[node] >= 0 and kids:
                raise ValueError(f"leaf node {node} has children")
            if self.node_class[node] < 0 and not kids:
                raise ValueError(f"internal node {node} has no children")
            for slot, child in enumerate(kids):
                if seen[child]:
                    raise ValueError(f"node {child} has multiple parents")
                seen[child] = True
                self.parents[child] = node
                self.slots[child] = slot
        if not seen.all():
            raise ValueError("tree contains unreachable nodes")

        leaves = np.flatnonzero(self.node_class >= 0)
        classes = self.node_class[leaves]
        k = leaves.size
        if sorted(classes.tolist()) != list(range(k)):
            raise ValueError("leaf classes must be a bijection onto [0, K)")
        self.num_classes = k
        self.class_leaf = np.zeros(k, dtype=np.int64)
        self.class_leaf[classes] = leaves

        # BFS edge numbering: edge (parent, slot) -> dense id; the id of a
        # node's incoming edge is stored per node.
        self.node_edge = np.full(n, -1, dtype=np.int64)
        self.edge_child = np.zeros(max(n - 1, 0), dtype=np.int64)
        edge = 0
        queue = deque([0])
        self.node_depth = np.zeros(n, dtype=np.int64)
        while queue:
            node = queue.popleft()
            for child in self.children[node]:
                self.node_edge[child] = edge
                self.edge_child[edge] = child
                self.node_depth[child] = self.node_depth[node] + 1
                edge += 1
                queue.append(child)
        self.num_edges = edge
        self.depth = int(self.node_depth.max()) if n > 1 else 0

        self._paths: list[np.ndarray] = []
        for c in range(k):
            rev = []
            node = int(self.class_leaf[c])
            while node != 0:
                rev.append(int(self.node_edge[node]))
                node = int(self.parents[node])
            self._paths.append(np.asarray(rev[::-1], dtype=np.int64))

    def path(self, class_id: int) -> np.ndarray:
        """Edge ids from the root down to the class's leaf."""
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"class {class_id} outside [0, {self.num_classes})")
        return self._paths[class_id]

    def edge_id(self, parent: int, slot: int) -> int:
        return int(self.node_edge[self.children[parent][slot]])

    def child_edges(self, node: int) -> np.ndarray:
        """Edge ids of a node's outgoing edges, in slot order."""
        return self.node_edge[np.asarray(self.children[node], dtype=np.int64)]

    @property
    def num_nodes(self) -> int:
        return len(self.children)

    def topology(self) -> dict:
        """Parent/slot/class arrays, sufficient to reconstruct the tree."""
        return {
            "branching": self.branching,
            "parents": self.parents.tolist(),
            "slots": self.slots.tolist(),
            "node_class": self.node_class.tolist(),
        }

    @classmethod
    def from_topology(cls, topo: dict) -> "LabelTree":
        parents = topo["parents"]
        slots = topo["slots"]
        n = len(parents)
        children: list[list[int]] = [[] for _ in range(n)]
        order = sorted(
            (node for node in range(n) if parents[node] >= 0),
            key=lambda node: (parents[node], slots[node]),
        )
        for node in order:
            children[parents[node]].append(node)
        return cls(topo["branching"], children, topo["node_class"])


def path_of(tree: LabelTree, class_id: int) -> np.ndarray:
    """Root-to-leaf edge sequence for a class."""
    return tree.path(class_id)


def edge_dots(params: np.ndarray, edges, idx: np.ndarray, val: np.ndarray) -> np.ndarray:
    """Inner product of the representation with each listed edge vector.

    Every caller (scoring, beam search, training) funnels through this
    one routine so identical edges always produce identical floats.
    """
    return np.asarray([params[e, idx] @ val for e in edges], dtype=np.float64)


def score_class(
    tree: LabelTree,
    params: np.ndarray,
    representation: Representation,
    x: tuple[np.ndarray, np.ndarray],
    class_id: int,
) -> float:
    """Path-sum score of one class.

    Per-edge inner products are accumulated root-first so the result is
    bit-identical to the running scores maintained by beam search.
    """
    idx, val = representation.apply(*x)
    score = 0.0
    for dot in edge_dots(params, tree.path(class_id), idx, val):
        score += float(dot)
    return score


def rebalance(leaf_order, branching: int) -> LabelTree:
    """Balanced b-nary tree whose left-to-right leaves equal ``leaf_order``.

    Sibling subtrees receive equal class counts up to one, which keeps
    every leaf within the last two levels and the depth at
    ``ceil(log_b K)``.
    """
    order = list(leaf_order)
    k = len(order)
    if sorted(order) != list(range(k)):
        raise ValueError("leaf_order must be a permutation of [0, K)")
    if branching < 2:
        raise ValueError("branching must be >= 2")

    children: list[list[int]] = []
    node_class: list[int] = []

    def new_node() -> int:
        children.append([])
        node_class.append(-1)
        return len(children) - 1

    root = new_node()
    if k == 1:
        node_class[root] = order[0]
        return LabelTree(branching, children, node_class)

    # BFS construction keeps node ids in breadth-first order.
    queue: deque[tuple[int, list[int]]] = deque([(root, order)])
    while queue:
        node, classes = queue.popleft()
        m = len(classes)
        if m == 1:
            node_class[node] = classes[0]
            continue
        groups = min(branching, m)
        size, extra = divmod(m, groups)
        start = 0
        for g in range(groups):
            width = size + (1 if g < extra else 0)
            child = new_node()
            children[node].append(child)
            queue.append((child, classes[start : start + width]))
            start += width
    return LabelTree(branching, children, node_class)


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 50) -> np.ndarray:
    """Plain k-means with k-means++ seeding; returns cluster labels.

    Empty clusters are repaired by stealing the point farthest from the
    centroid of the largest cluster.  Assignment ties break toward the
    lower cluster id, which keeps runs reproducible.
    """
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = np.full(n, np.inf)
    for c in range(1, k):
        dist = ((points - centroids[c - 1]) ** 2).sum(axis=1)
        np.minimum(closest, dist, out=closest)
        total = closest.sum()
        if total <= 0.0:
            centroids[c] = points[rng.integers(n)]
            continue
        centroids[c] = points[rng.choice(n, p=closest / total)]

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for c in range(k):
            if not (new_labels == c).any():
                sizes = np.bincount(new_labels, minlength=k)
                donor = int(sizes.argmax())
                members = np.flatnonzero(new_labels == donor)
                centroid = points[members].mean(axis=0)
                far = members[((points[members] - centroid) ** 2).sum(axis=1).argmax()]
                new_labels[far] = c
        if (new_labels == labels).all():
            break
        labels = new_labels
        for c in range(k):
            centroids[c] = points[labels == c].mean(axis=0)
    return labels


def build_tree_clustering(centers: np.ndarray, branching: int, seed: int) -> LabelTree:
    """Tree over classes from recursive k-means on their centers.

    The clustering tree only supplies a class ordering: its leaves are
    read left to right and reassigned to a fresh balanced b-nary tree.
    Children of every split are ordered by ascending centroid norm.
    """
    centers = np.asarray(centers, dtype=np.float64)
    k = centers.shape[0]
    if k < 1:
        raise ValueError("need at least one class center")
    if branching < 2:
        raise ValueError("branching must be >= 2")
    rng = np.random.default_rng(seed)
    leaf_order: list[int] = []

    def split(ids: np.ndarray) -> None:
        if ids.size == 1:
            leaf_order.append(int(ids[0]))
            return
        if ids.size <= branching:
            clusters = [np.asarray([i]) for i in ids]
        else:
            labels = _kmeans(centers[ids], branching, rng)
            clusters = [ids[labels == c] for c in range(branching)]
        norms = [float(np.linalg.norm(centers[c].mean(axis=0))) for c in clusters]
        for _, cluster in sorted(zip(norms, clusters), key=lambda t: t[0]):
            split(cluster)

    split(np.arange(k))
    return rebalance(leaf_order, branching)
