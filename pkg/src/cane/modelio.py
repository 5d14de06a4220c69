"""Single-file model persistence: JSON header line + raw float64 payload.

The header is one UTF-8 JSON line carrying the tree topology, label
dictionary, and a config echo; the payload is the edge-parameter matrix
as little-endian 64-bit reals in breadth-first edge order.  Both halves
are written deterministically, so saving a loaded model reproduces the
file byte for byte.
"""

from __future__ import annotations

import json

import numpy as np

from .tree import LabelTree, Representation
from .trainer import CaneModel

__all__ = ["save_model", "load_model", "save_tree", "load_tree", "ModelFormatError"]

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Unreadable or inconsistent model/tree file."""


def _tree_header(tree: LabelTree) -> dict:
    topo = tree.topology()
    return {
        "branching": topo["branching"],
        "parents": topo["parents"],
        "slots": topo["slots"],
        "node_class": topo["node_class"],
    }


def save_model(model: CaneModel, path, seed=None, config: dict | None = None) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "cane-model",
        "num_classes": model.num_classes,
        "num_features": model.num_features,
        "representation": model.representation.kind,
        "tree": _tree_header(model.tree),
        "label_dictionary": sorted(
            [int(raw), int(dense)] for raw, dense in model.label_dictionary.items()
        ),
        "seed": seed,
        "config": config,
    }
    payload = np.ascontiguousarray(model.edge_params, dtype="<f8")
    with open(path, "wb") as handle:
        handle.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        handle.write(b"\n")
        handle.write(payload.tobytes())


def load_model(path) -> tuple[CaneModel, dict]:
    """Read a model file; returns the model and its raw header."""
    with open(path, "rb") as handle:
        first = handle.readline()
        blob = handle.read()
    try:
        header = json.loads(first.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header: {exc}") from None
    if header.get("kind") != "cane-model" or header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: not a model file of a supported version")
    tree = LabelTree.from_topology(header["tree"])
    if tree.num_classes != header["num_classes"]:
        raise ModelFormatError(f"{path}: tree leaves disagree with num_classes")
    d = int(header["num_features"])
    expected = tree.num_edges * d * 8
    if len(blob) != expected:
        raise ModelFormatError(
            f"{path}: payload holds {len(blob)} bytes, expected {expected}"
        )
    params = np.frombuffer(blob, dtype="<f8").reshape(tree.num_edges, d).copy()
    label_dictionary = {int(raw): int(dense) for raw, dense in header["label_dictionary"]}
    model = CaneModel(tree, params, Representation(d), label_dictionary, d)
    return model, header


def save_tree(tree: LabelTree, path, seed=None) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "label-tree",
        "num_classes": tree.num_classes,
        "tree": _tree_header(tree),
        "seed": seed,
    }
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, separators=(",", ":")))
        handle.write("\n")


def load_tree(path) -> LabelTree:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            header = json.loads(handle.readline())
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: unreadable tree file: {exc}") from None
    if header.get("kind") != "label-tree" or header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: not a tree file of a supported version")
    return LabelTree.from_topology(header["tree"])
