"""Sparse classification datasets: loading, splitting, class statistics.

Datasets are read from the LIBSVM/SVMlight text format (one example per
line, ``<label> <idx>:<val> ...`` with 1-based feature indices).  Raw
labels are mapped to dense ids ``0..K-1`` by ascending numeric order, so
the mapping depends only on the label set, not on file order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Example",
    "Dataset",
    "ClassUnigram",
    "DataFormatError",
    "load_libsvm",
    "save_libsvm",
    "split",
    "class_unigram",
    "class_centers",
]


class DataFormatError(ValueError):
    """Malformed input data (carries the offending line number if known)."""


@dataclass(frozen=True)
class Example:
    """One labeled example with sparse features.

    ``indices`` are strictly increasing 0-based feature ids, ``values``
    the matching feature values; ``label`` is a dense class id.
    """

    indices: np.ndarray
    values: np.ndarray
    label: int

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indices.ndim != 1 or values.ndim != 1 or indices.shape != values.shape:
            raise ValueError("indices and values must be parallel 1-d arrays")
        if indices.size and (np.diff(indices) <= 0).any():
            raise ValueError("feature indices must be strictly increasing")
        if indices.size and indices[0] < 0:
            raise ValueError("feature indices must be non-negative")
        if not np.isfinite(values).all():
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)

    @property
    def features(self) -> tuple[np.ndarray, np.ndarray]:
        return self.indices, self.values


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of examples plus label bookkeeping.

    ``label_dictionary`` maps raw labels (as they appear on disk) to the
    dense ids used everywhere else; it is a bijection onto ``[0, K)``.
    """

    examples: tuple[Example, ...]
    num_classes: int
    num_features: int
    label_dictionary: dict[int, int]
    class_counts: np.ndarray = field(repr=False)

    def __post_init__(self):
        counts = np.asarray(self.class_counts, dtype=np.int64)
        object.__setattr__(self, "class_counts", counts)
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if self.num_features <= 0:
            raise ValueError("num_features must be positive")
        if counts.shape != (self.num_classes,):
            raise ValueError("class_counts must have one entry per class")
        if counts.sum() != len(self.examples):
            raise ValueError("class_counts must sum to the number of examples")
        dense = sorted(self.label_dictionary.values())
        if dense != list(range(self.num_classes)):
            raise ValueError("label_dictionary must be a bijection onto [0, K)")
        for ex in self.examples:
            if not 0 <= ex.label < self.num_classes:
                raise ValueError(f"label {ex.label} outside [0, {self.num_classes})")
            if ex.indices.size and ex.indices[-1] >= self.num_features:
                raise ValueError(
                    f"feature index {ex.indices[-1]} >= num_features {self.num_features}"
                )

    @classmethod
    def build(cls, examples, num_classes, num_features, label_dictionary) -> "Dataset":
        """Construct with class counts computed from the examples."""
        examples = tuple(examples)
        counts = np.zeros(num_classes, dtype=np.int64)
        for ex in examples:
            counts[ex.label] += 1
        return cls(examples, num_classes, num_features, dict(label_dictionary), counts)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def raw_labels(self) -> dict[int, int]:
        """Inverse of the label dictionary (dense id -> raw label)."""
        return {dense: raw for raw, dense in self.label_dictionary.items()}

    def dense_features(self) -> np.ndarray:
        """Densified (n, d) feature matrix; intended for small problems."""
        out = np.zeros((len(self.examples), self.num_features))
        for row, ex in enumerate(self.examples):
            out[row, ex.indices] = ex.values
        return out

    def labels(self) -> np.ndarray:
        return np.fromiter((ex.label for ex in self.examples), dtype=np.int64, count=len(self))

    def equals(self, other: "Dataset") -> bool:
        if (
            self.num_classes != other.num_classes
            or self.num_features != other.num_features
            or self.label_dictionary != other.label_dictionary
            or len(self.examples) != len(other.examples)
        ):
            return False
        return all(
            a.label == b.label
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.values, b.values)
            for a, b in zip(self.examples, other.examples)
        )


@dataclass(frozen=True)
class ClassUnigram:
    """Per-class sampling weights from smoothed, power-raised counts.

    Weights are strictly positive and sum to 1; ``power`` = 0 collapses
    to the uniform distribution regardless of the counts.
    """

    weights: np.ndarray
    power: float

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", weights)
        if not 0.0 <= self.power <= 1.0:
            raise ValueError("power must lie in [0, 1]")
        if (weights <= 0).any():
            raise ValueError("weights must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]


def _parse_line(line: str, lineno: int) -> tuple[int, list[int], list[float]]:
    parts = line.split()
    try:
        raw_label = int(parts[0])
    except ValueError:
        raise DataFormatError(f"line {lineno}: non-integer label {parts[0]!r}") from None
    indices: list[int] = []
    values: list[float] = []
    for token in parts[1:]:
        try:
            idx_text, val_text = token.split(":", 1)
            idx = int(idx_text)
            val = float(val_text)
        except ValueError:
            raise DataFormatError(f"line {lineno}: malformed feature {token!r}") from None
        if idx < 1:
            raise DataFormatError(f"line {lineno}: feature index {idx} is not 1-based")
        indices.append(idx - 1)
        values.append(val)
    if len(set(indices)) != len(indices):
        raise DataFormatError(f"line {lineno}: duplicate feature index")
    return raw_label, indices, values


def load_libsvm(path, num_features: int | None = None) -> Dataset:
    """Load a LIBSVM-format text file.

    Raw labels are re-mapped to dense ids by ascending numeric order and
    feature indices are converted to 0-based.  The feature count is
    inferred as ``1 + max index`` unless ``num_features`` overrides it
    (the larger of the two wins, so train/test dimension mismatches
    resolve to the max).
    """
    raw_rows: list[tuple[int, np.ndarray, np.ndarray]] = []
    max_index = -1
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            raw_label, indices, values = _parse_line(line, lineno)
            order = np.argsort(indices, kind="stable")
            idx = np.asarray(indices, dtype=np.int64)[order]
            val = np.asarray(values, dtype=np.float64)[order]
            if idx.size:
                max_index = max(max_index, int(idx[-1]))
            raw_rows.append((raw_label, idx, val))
    if not raw_rows:
        raise DataFormatError(f"{path}: no examples")
    distinct = sorted({raw for raw, _, _ in raw_rows})
    label_dictionary = {raw: dense for dense, raw in enumerate(distinct)}
    d = max_index + 1 if max_index >= 0 else 1
    if num_features is not None:
        d = max(d, num_features)
    examples = [
        Example(idx, val, label_dictionary[raw]) for raw, idx, val in raw_rows
    ]
    return Dataset.build(examples, len(distinct), d, label_dictionary)


def save_libsvm(dataset: Dataset, path) -> None:
    """Write a dataset back to LIBSVM text (raw labels, 1-based indices).

    Float values are written with ``repr`` so a reload reproduces the
    dataset exactly.
    """
    inverse = dataset.raw_labels
    with open(path, "w", encoding="utf-8") as handle:
        for ex in dataset.examples:
            feats = " ".join(
                f"{int(i) + 1}:{v!r}" for i, v in zip(ex.indices, ex.values)
            )
            line = f"{inverse[ex.label]} {feats}".rstrip()
            handle.write(line + "\n")


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled partition into train/test parts.

    Both parts share the parent's label dictionary and feature count;
    together they contain every parent example exactly once.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1) if n > 1 else n_train

    def _part(selected: np.ndarray) -> Dataset:
        return Dataset.build(
            [dataset.examples[i] for i in selected],
            dataset.num_classes,
            dataset.num_features,
            dataset.label_dictionary,
        )

    return _part(order[:n_train]), _part(order[n_train:])


def class_unigram(dataset: Dataset, power: float) -> ClassUnigram:
    """Power-raised unigram over classes with add-one smoothing.

    Smoothing keeps every weight strictly positive even for classes that
    never occur, which the noise sampler requires.
    """
    if not 0.0 <= power <= 1.0:
        raise ValueError("power must lie in [0, 1]")
    smoothed = (dataset.class_counts.astype(np.float64) + 1.0) ** power
    return ClassUnigram(smoothed / smoothed.sum(), power)


def class_centers(dataset: Dataset) -> np.ndarray:
    """Per-class mean feature vectors as a dense (K, d) matrix."""
    empty = np.flatnonzero(dataset.class_counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no examples")
    centers = np.zeros((dataset.num_classes, dataset.num_features))
    for ex in dataset.examples:
        centers[ex.label, ex.indices] += ex.values
    centers /= dataset.class_counts[:, None]
    return centers
