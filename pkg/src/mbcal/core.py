"""Shared data model: samples, datasets, bin statistics and sample divisions."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

Rng = np.random.Generator


def make_rng(seed: int, *key: int) -> Rng:
    """Deterministic generator for ``seed``, optionally split by an integer path.

    Generators built from the same ``(seed, *key)`` produce identical streams on
    every platform (PCG64 seeded through ``SeedSequence``).
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def spawn_seeds(rng: Rng, count: int) -> np.ndarray:
    """Draw ``count`` independent 63-bit child seeds from ``rng``."""
    return rng.integers(0, 2**63 - 1, size=count, dtype=np.int64)


def equal_width_bucket(values, n_buckets: int = 100, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Index of the equal-width bucket over ``[low, high]``; the upper edge clamps into the last bucket."""
    values = np.asarray(values, dtype=float)
    if high <= low:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor((values - low) / (high - low) * n_buckets)
    return np.clip(idx, 0, n_buckets - 1).astype(np.int64)


@dataclass(frozen=True)
class CalibrationSample:
    features: tuple
    prediction: float
    label: float
    true_prob: Optional[float] = None
    weight: float = 1.0


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented calibration set.

    ``features`` is an ``(n, d)`` integer matrix of discrete feature ids.
    ``label`` is binary for raw data; aggregated rows carry the mean label of
    their group together with the group size as ``weight``.
    """

    features: np.ndarray
    prediction: np.ndarray
    label: np.ndarray
    weight: np.ndarray = None
    true_prob: Optional[np.ndarray] = None
    feature_names: tuple = ()
    feature_cardinalities: tuple = ()

    def __post_init__(self):
        prediction = np.asarray(self.prediction, dtype=float).ravel()
        n = prediction.shape[0]
        features = np.asarray(self.features, dtype=np.int64)
        if features.size == 0:
            features = features.reshape(n, 0)
        if features.ndim != 2 or features.shape[0] != n:
            raise ValueError("features must be an (n, d) matrix aligned with predictions")
        label = np.asarray(self.label, dtype=float).ravel()
        weight = np.ones(n) if self.weight is None else np.asarray(self.weight, dtype=float).ravel()
        if label.shape[0] != n or weight.shape[0] != n:
            raise ValueError("label and weight must align with predictions")
        if n and (prediction.min() < 0 or prediction.max() > 1 or np.isnan(prediction).any()):
            raise ValueError("predictions must lie in [0, 1]")
        if n and (label.min() < 0 or label.max() > 1 or np.isnan(label).any()):
            raise ValueError("labels must lie in [0, 1]")
        if n and weight.min() <= 0:
            raise ValueError("weights must be positive")
        true_prob = self.true_prob
        if true_prob is not None:
            true_prob = np.asarray(true_prob, dtype=float).ravel()
            if true_prob.shape[0] != n:
                raise ValueError("true_prob must align with predictions")
            if n and (true_prob.min() < 0 or true_prob.max() > 1):
                raise ValueError("true probabilities must lie in [0, 1]")
        d = features.shape[1]
        names = tuple(self.feature_names) or tuple(f"f{i}" for i in range(d))
        if self.feature_cardinalities:
            cards = tuple(int(c) for c in self.feature_cardinalities)
        else:
            cards = tuple(int(features[:, j].max()) + 1 if n else 1 for j in range(d))
        if len(names) != d or len(cards) != d:
            raise ValueError("feature_names/feature_cardinalities must have one entry per feature column")
        if n and d:
            if features.min() < 0:
                raise ValueError("feature values must be non-negative integers")
            over = features.max(axis=0) >= np.asarray(cards)
            if over.any():
                j = int(np.argmax(over))
                raise ValueError(f"feature {names[j]!r} has a value >= its cardinality {cards[j]}")
        object.__setattr__(self, "features", _readonly(features))
        object.__setattr__(self, "prediction", _readonly(prediction))
        object.__setattr__(self, "label", _readonly(label))
        object.__setattr__(self, "weight", _readonly(weight))
        object.__setattr__(self, "true_prob", None if true_prob is None else _readonly(true_prob))
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "feature_cardinalities", cards)

    def __len__(self) -> int:
        return self.prediction.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.label == 0) | (self.label == 1)))

    def __iter__(self) -> Iterator[CalibrationSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> CalibrationSample:
        tp = None if self.true_prob is None else float(self.true_prob[i])
        return CalibrationSample(tuple(int(v) for v in self.features[i]), float(self.prediction[i]),
                                 float(self.label[i]), tp, float(self.weight[i]))

    @classmethod
    def from_samples(cls, samples: Sequence[CalibrationSample], feature_names=(), feature_cardinalities=()) -> "Dataset":
        samples = list(samples)
        if not samples:
            raise ValueError("empty dataset")
        widths = {len(s.features) for s in samples}
        if len(widths) != 1:
            raise ValueError("all samples must have the same number of features")
        with_tp = [s.true_prob is not None for s in samples]
        if any(with_tp) and not all(with_tp):
            raise ValueError("true_prob must be given for all samples or none")
        return cls(
            features=np.array([s.features for s in samples], dtype=np.int64).reshape(len(samples), widths.pop()),
            prediction=[s.prediction for s in samples],
            label=[s.label for s in samples],
            weight=[s.weight for s in samples],
            true_prob=[s.true_prob for s in samples] if all(with_tp) else None,
            feature_names=feature_names,
            feature_cardinalities=feature_cardinalities,
        )

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.prediction[idx], self.label[idx], self.weight[idx],
                       None if self.true_prob is None else self.true_prob[idx],
                       self.feature_names, self.feature_cardinalities)

    def with_predictions(self, prediction) -> "Dataset":
        return Dataset(self.features, prediction, self.label, self.weight, self.true_prob,
                       self.feature_names, self.feature_cardinalities)


@dataclass(frozen=True)
class BinStats:
    count: float
    mean_label: float
    mean_prediction: float
    label_variance: float


def compute_bin_stats(dataset: Dataset, indices, use_calibrated=None) -> BinStats:
    """Weighted count, mean label, mean prediction and label variance of one bin.

    ``use_calibrated``, when given, is a full-length vector aligned with
    ``dataset`` whose entries replace the raw predictions.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty bin")
    pred = dataset.prediction if use_calibrated is None else np.asarray(use_calibrated, dtype=float)
    if pred.shape[0] != len(dataset):
        raise ValueError("calibrated vector must align with the dataset")
    w = dataset.weight[idx]
    y = dataset.label[idx]
    count = float(w.sum())
    mean_label = float(np.dot(w, y) / count)
    mean_pred = float(np.dot(w, pred[idx]) / count)
    # y(1-y) restores the within-group variance of aggregated rows; it is 0 for binary labels
    variance = float(np.dot(w, (y - mean_label) ** 2 + y * (1 - y)) / count)
    return BinStats(count, mean_label, mean_pred, variance)


class DivisionKind(enum.Enum):
    SORTED_UNIFORM_MASS = "sorted-uniform-mass"
    SHUFFLED_UNIFORM_MASS = "shuffled-uniform-mass"
    EQUAL_WIDTH = "equal-width"
    FEATURE_PARTITION = "feature-partition"


@dataclass(frozen=True)
class DivisionScheme:
    bins: tuple
    kind: DivisionKind

    def __len__(self) -> int:
        return len(self.bins)

    def sizes(self) -> list:
        return [len(b) for b in self.bins]

    def bin_ids(self, n: int) -> np.ndarray:
        ids = np.full(n, -1, dtype=np.int64)
        for i, b in enumerate(self.bins):
            ids[b] = i
        return ids


def uniform_mass_starts(ordered_weights: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin boundaries (``n_bins + 1`` positions) for rows already in bin order.

    Bin ``k`` starts at the first row whose cumulative weight exceeds
    ``k * W / n_bins``. With unit weights the sizes differ by at most one and
    larger bins come last (``n=11`` in two bins gives sizes 5 and 6). Rows are
    never split, so heavy aggregated rows may leave a bin empty.
    """
    ends = np.cumsum(ordered_weights)
    total = ends[-1]
    cuts = total * np.arange(1, n_bins) / n_bins
    inner = np.searchsorted(ends, cuts, side="right")
    return np.concatenate(([0], inner, [len(ordered_weights)])).astype(np.int64)


def sort_order(sort_key) -> np.ndarray:
    """Stable ordering for a 1-d key, or lexicographic for a tuple of keys (first key primary)."""
    if isinstance(sort_key, tuple):
        return np.lexsort(tuple(np.asarray(k) for k in reversed(sort_key)))
    return np.argsort(np.asarray(sort_key), kind="stable")


def make_division(n: int, bin_size: int, kind: DivisionKind, rng: Optional[Rng] = None,
                  sort_key=None, weights=None) -> DivisionScheme:
    """Partition ``range(n)`` into ``floor(W / bin_size)`` bins.

    ``W`` is the total weight (``n`` for unit weights). Uniform-mass kinds cut
    the ordered rows into bins of equal mass; equal-width cuts the key range
    ``[min, max]`` into equal intervals and drops empty ones.
    """
    if bin_size <= 0:
        raise ValueError("bin_size must be positive")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    n_bins = int(np.floor(w.sum() / bin_size + 1e-12))
    if n_bins < 2:
        raise ValueError("degenerate division")
    if kind is DivisionKind.SHUFFLED_UNIFORM_MASS:
        if rng is None:
            raise ValueError("shuffled division needs an rng")
        order = rng.permutation(n)
    elif kind is DivisionKind.SORTED_UNIFORM_MASS:
        if sort_key is None:
            raise ValueError("sorted division needs a sort_key")
        order = sort_order(sort_key)
    elif kind is DivisionKind.EQUAL_WIDTH:
        if sort_key is None:
            raise ValueError("equal-width division needs a sort_key")
        key = np.asarray(sort_key, dtype=float)
        ids = equal_width_bucket(key, n_bins, float(key.min()), float(key.max()))
        bins = tuple(np.flatnonzero(ids == b) for b in range(n_bins))
        return DivisionScheme(tuple(b for b in bins if b.size), kind)
    else:
        raise ValueError("feature partitions are built with feature_partition()")
    starts = uniform_mass_starts(w[order], n_bins)
    bins = tuple(order[starts[i]:starts[i + 1]] for i in range(n_bins))
    return DivisionScheme(tuple(b for b in bins if b.size), kind)


def feature_partition(dataset: Dataset, feature: int, indices=None) -> DivisionScheme:
    """Group ``indices`` (default: all rows) by the value of one feature, in value order."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    values = dataset.features[idx, feature]
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    cuts = np.flatnonzero(np.diff(sorted_vals)) + 1
    return DivisionScheme(tuple(idx[g] for g in np.split(order, cuts)), DivisionKind.FEATURE_PARTITION)


def aggregate_dataset(dataset: Dataset, prediction_buckets: int = 100) -> Dataset:
    """Merge rows sharing a feature vector and discretized prediction into weighted rows.

    Each output row carries the group weight, the weighted mean label and the
    weighted mean prediction, so every weighted aggregate over a union of
    groups is unchanged. Groups keep the order of their first member.
    """
    if len(dataset) == 0:
        return dataset
    bucket = equal_width_bucket(dataset.prediction, prediction_buckets)
    keys = np.column_stack([dataset.features, bucket])
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    group = rank[inverse]
    n_groups = len(first)
    w = dataset.weight
    wsum = np.bincount(group, weights=w, minlength=n_groups)

    def wmean(v):
        return np.bincount(group, weights=w * v, minlength=n_groups) / wsum

    firsts = np.sort(first)
    singleton = np.bincount(group, minlength=n_groups) == 1
    label = np.where(singleton, dataset.label[firsts], wmean(dataset.label))
    pred = np.where(singleton, dataset.prediction[firsts], wmean(dataset.prediction))
    tp = None
    if dataset.true_prob is not None:
        tp = np.where(singleton, dataset.true_prob[firsts], wmean(dataset.true_prob))
    return Dataset(dataset.features[firsts], np.clip(pred, 0, 1), np.clip(label, 0, 1), wsum, tp,
                   dataset.feature_names, dataset.feature_cardinalities)
