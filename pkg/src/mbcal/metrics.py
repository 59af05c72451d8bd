"""Calibration-error and order-accuracy metrics.

All error metrics are weighted: a row of weight ``w`` counts as ``w`` samples,
which keeps them exact on aggregated datasets. Every shuffle-based metric
first puts rows into a canonical order, so results do not depend on the order
rows arrive in.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import Dataset, DivisionScheme, Rng, make_rng, uniform_mass_starts


@dataclass(frozen=True)
class MetricConfig:
    p: float = 2.0
    r: int = 100
    bin_size: int = 1000
    n_bins: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.bin_size < 2:
            raise ValueError("bin_size must be >= 2")


@dataclass
class MetricReport:
    mvce: float
    ece: float
    ece_sweep: float
    auc: float
    tce: Optional[float] = None
    per_division_pce: list = field(default_factory=list)
    ece_bins: int = 0
    ece_sweep_bins: int = 0

    def as_dict(self) -> dict:
        return {
            "mvce": self.mvce, "ece": self.ece, "ece_sweep": self.ece_sweep, "auc": self.auc,
            "tce": self.tce, "ece_bins": self.ece_bins, "ece_sweep_bins": self.ece_sweep_bins,
        }


def _as_vector(calibrated, dataset: Dataset) -> np.ndarray:
    h = np.asarray(calibrated, dtype=float).ravel()
    if h.shape[0] != len(dataset):
        raise ValueError("calibrated vector must align with the dataset")
    return h


def _power_mean(values: np.ndarray, p: float) -> float:
    return float(np.mean(values ** p) ** (1.0 / p))


def calibration_order(calibrated, labels, weights) -> np.ndarray:
    """Ascending calibrated value; ties put positive labels first, then lighter rows.

    Placing positives first inside ties means a bin edge cutting a tie can only
    make bin label means decrease, never fake an increase.
    """
    return np.lexsort((weights, -np.asarray(labels), calibrated))


def _segment_sums(values: np.ndarray, starts: np.ndarray) -> tuple:
    """Sums of ``values`` over ``[starts[i], starts[i+1])`` plus a mask of non-empty segments."""
    sizes = np.diff(starts)
    nonempty = sizes > 0
    sums = np.zeros(len(sizes))
    if nonempty.any():
        sums[nonempty] = np.add.reduceat(values, starts[:-1][nonempty])
    return sums, nonempty


def pce(dataset: Dataset, indices, calibrated) -> float:
    """Absolute gap between mean calibrated value and mean label over one bin."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty bin")
    h = _as_vector(calibrated, dataset)
    w = dataset.weight[idx]
    return float(abs(np.dot(w, h[idx] - dataset.label[idx])) / w.sum())


class MultiViewDivisions:
    """``r`` independent shuffled uniform-mass divisions of one set of rows.

    The divisions are drawn once, so several candidate calibrations of the
    same rows can be compared on identical views.
    """

    def __init__(self, weights, bin_size: float, r: int, rng: Rng, order=None):
        w = np.asarray(weights, dtype=float)
        n = w.shape[0]
        n_bins = int(np.floor(w.sum() / bin_size + 1e-12))
        if n_bins < 2:
            raise ValueError("degenerate division")
        base = None if order is None else np.asarray(order, dtype=np.int64)
        self.n = n
        self.r = r
        self.n_bins = n_bins
        self.rows = np.empty((r, n), dtype=np.int64)
        starts = np.empty((r, n_bins + 1), dtype=np.int64)
        # equal weights give the same boundaries in every view
        shared = uniform_mass_starts(w, n_bins) if np.all(w == w[0]) else None
        for i in range(r):
            perm = rng.permutation(n)
            if base is not None:
                perm = base[perm]
            self.rows[i] = perm
            starts[i] = shared if shared is not None else uniform_mass_starts(w[perm], n_bins)
        self.nonempty = np.diff(starts, axis=1) > 0
        flat_starts = starts[:, :-1] + n * np.arange(r)[:, None]
        self._offsets = flat_starts[self.nonempty]
        if shared is not None and w[0] == 1.0:
            self.mass = np.tile(np.diff(shared).astype(float), (r, 1))
        else:
            self.mass = self.bin_sums(w)

    def bin_sums(self, values) -> np.ndarray:
        """Per-bin sums of a row-aligned vector, shape ``(r, n_bins)``; empty bins hold 0."""
        gathered = np.asarray(values, dtype=float)[self.rows].ravel()
        out = np.zeros((self.r, self.n_bins))
        out[self.nonempty] = np.add.reduceat(gathered, self._offsets)
        return out

    def division_errors(self, calibrated, labels, weights) -> np.ndarray:
        """Mean PCE of every division, shape ``(r,)``."""
        gap = self.bin_sums(np.asarray(weights) * (np.asarray(calibrated) - np.asarray(labels)))
        pces = np.zeros_like(gap)
        pces[self.nonempty] = np.abs(gap[self.nonempty]) / self.mass[self.nonempty]
        return pces.sum(axis=1) / self.nonempty.sum(axis=1)

    def score(self, calibrated, labels, weights, p: float = 2.0) -> float:
        return _power_mean(self.division_errors(calibrated, labels, weights), p)


def _scheme_errors(dataset: Dataset, h: np.ndarray, schemes: Sequence[DivisionScheme]) -> np.ndarray:
    return np.array([np.mean([pce(dataset, b, h) for b in s.bins]) for s in schemes])


def mvce(dataset: Dataset, calibrated, config: MetricConfig, rng: Optional[Rng] = None,
         divisions=None, return_divisions: bool = False):
    """Multi-view calibration error.

    The ``p``-mean over ``config.r`` shuffled uniform-mass divisions of each
    division's average PCE. Divisions come from ``rng`` (default: a fresh
    generator seeded with ``config.seed``) unless ``divisions`` is given, either
    as a :class:`MultiViewDivisions` or a sequence of :class:`DivisionScheme`.
    """
    h = _as_vector(calibrated, dataset)
    if divisions is not None and not isinstance(divisions, MultiViewDivisions):
        errors = _scheme_errors(dataset, h, divisions)
    else:
        if divisions is None:
            if dataset.total_weight < 2 * config.bin_size:
                raise ValueError("degenerate division")
            rng = make_rng(config.seed) if rng is None else rng
            order = calibration_order(h, dataset.label, dataset.weight)
            divisions = MultiViewDivisions(dataset.weight, config.bin_size, config.r, rng, order=order)
        errors = divisions.division_errors(h, dataset.label, dataset.weight)
    value = _power_mean(errors, config.p)
    if return_divisions:
        return value, errors
    return value


def _sorted_bins(dataset: Dataset, h: np.ndarray, n_bins: int):
    order = calibration_order(h, dataset.label, dataset.weight)
    w = dataset.weight[order]
    starts = uniform_mass_starts(w, n_bins)
    return order, w, starts


def _ece_from_sorted(dataset, h, order, w, starts, p) -> float:
    gap, nonempty = _segment_sums(w * (h[order] - dataset.label[order]), starts)
    mass, _ = _segment_sums(w, starts)
    return _power_mean(np.abs(gap[nonempty]) / mass[nonempty], p)


def ece_n(dataset: Dataset, calibrated, n_bins: int, p: float = 2.0) -> float:
    """ECE over ``n_bins`` uniform-mass bins of rows sorted by calibrated value."""
    h = _as_vector(calibrated, dataset)
    if n_bins < 1 or n_bins > len(dataset):
        raise ValueError("n_bins must be between 1 and the dataset size")
    order, w, starts = _sorted_bins(dataset, h, n_bins)
    return _ece_from_sorted(dataset, h, order, w, starts, p)


def ece_sweep(dataset: Dataset, calibrated, p: float = 2.0, return_bins: bool = False):
    """ECE at the largest bin count whose bin label means are still non-decreasing.

    Bin counts are tried upward from 2 and the sweep stops at the first
    violation; if 2 bins already violate, a single bin is used.
    """
    h = _as_vector(calibrated, dataset)
    n = len(dataset)
    if n < 2:
        raise ValueError("ece_sweep needs at least 2 samples")
    order = calibration_order(h, dataset.label, dataset.weight)
    w = dataset.weight[order]
    wy = w * dataset.label[order]
    best = 1
    for n_bins in range(2, n + 1):
        starts = uniform_mass_starts(w, n_bins)
        pos, nonempty = _segment_sums(wy, starts)
        mass, _ = _segment_sums(w, starts)
        means = pos[nonempty] / mass[nonempty]
        if np.any(np.diff(means) < 0):
            break
        best = n_bins
    value = _ece_from_sorted(dataset, h, order, w, uniform_mass_starts(w, best), p)
    return (value, best) if return_bins else value


def tce(true_probs, calibrated, p: float = 2.0, weights=None) -> float:
    """Distance to the true conditional probability; only available on synthetic data."""
    if true_probs is None:
        raise ValueError("TCE requires synthetic ground truth")
    t = np.asarray(true_probs, dtype=float)
    if np.isnan(t).any():
        raise ValueError("TCE requires synthetic ground truth")
    h = np.asarray(calibrated, dtype=float)
    diff = np.abs(t - h) ** p
    mean = np.mean(diff) if weights is None else np.average(diff, weights=weights)
    return float(mean ** (1.0 / p))


def auc(labels, scores) -> float:
    """Mann-Whitney AUC with average ranks for ties: P(s+ > s-) + P(tie) / 2."""
    y = np.asarray(labels, dtype=float).ravel()
    s = np.asarray(scores, dtype=float).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("AUC needs binary labels")
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined for single-class labels")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pud(dataset: Dataset, indices, calibrated) -> float:
    """Ratio of mean calibrated value to mean label; below 1 means underestimation."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty bin")
    h = _as_vector(calibrated, dataset)
    w = dataset.weight[idx]
    label_mass = float(np.dot(w, dataset.label[idx]))
    if label_mass == 0:
        raise ValueError("PUD undefined for a bin with zero mean label")
    return float(np.dot(w, h[idx]) / label_mass)


def bfgpce(dataset: Dataset, indices, calibrated, k: int, rng: Rng) -> float:
    """Mean PCE over ``k`` equal random subsets of one bin."""
    idx = np.asarray(indices, dtype=np.int64)
    if k < 1 or k > idx.size:
        raise ValueError("k must be between 1 and the bin size")
    h = _as_vector(calibrated, dataset)
    canon = idx[calibration_order(h[idx], dataset.label[idx], dataset.weight[idx])]
    shuffled = canon[rng.permutation(idx.size)]
    starts = uniform_mass_starts(np.ones(idx.size), k)
    return float(np.mean([pce(dataset, shuffled[starts[i]:starts[i + 1]], h) for i in range(k)]))


class Monotonicity(enum.Enum):
    STRICTLY_MONOTONIC = "strictly-monotonic"
    NON_STRICTLY_MONOTONIC = "non-strictly-monotonic"
    NON_MONOTONIC = "non-monotonic"


def classify_monotonicity(predictions, calibrated) -> Monotonicity:
    """Classify a calibrator by whether it preserves the order of the base predictions.

    Runs in O(n log n): rows are grouped by prediction value and only the
    extreme calibrated values of neighbouring groups need comparing.
    """
    f = np.asarray(predictions, dtype=float).ravel()
    h = np.asarray(calibrated, dtype=float).ravel()
    if f.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    order = np.lexsort((h, f))
    fs, hs = f[order], h[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(fs)) + 1))
    group_min = hs[starts]
    group_max = np.maximum.reduceat(hs, starts)
    running_max = np.maximum.accumulate(group_max)
    if np.any(group_min[1:] < running_max[:-1]):
        return Monotonicity.NON_MONOTONIC
    if np.any(group_min[1:] == group_max[:-1]):
        return Monotonicity.NON_STRICTLY_MONOTONIC
    return Monotonicity.STRICTLY_MONOTONIC


def subgroup_pud_table(dataset: Dataset, calibrated, bin_ids, n_subgroups: int = 4,
                       bins: Optional[Sequence] = None) -> list:
    """PUD of finer-grained sub-groups inside each bin.

    Members of a bin are ordered by feature vector (first column most
    significant), then prediction, and cut into ``n_subgroups`` uniform-mass
    sub-groups, so sub-groups differ in their features. A bin whose samples
    share one bias pattern shows sub-group PUDs near 1.
    """
    h = _as_vector(calibrated, dataset)
    ids = np.asarray(bin_ids)
    rows = []
    chosen = np.unique(ids) if bins is None else bins
    for b in chosen:
        members = np.flatnonzero(ids == b)
        if members.size < n_subgroups:
            continue
        keys = (members, dataset.prediction[members]) + tuple(
            dataset.features[members, j] for j in reversed(range(dataset.n_features)))
        ordered = members[np.lexsort(keys)]
        starts = uniform_mass_starts(dataset.weight[ordered], n_subgroups)
        for g in range(n_subgroups):
            sub = ordered[starts[g]:starts[g + 1]]
            if sub.size == 0:
                continue
            w = dataset.weight[sub]
            mean_label = float(np.dot(w, dataset.label[sub]) / w.sum())
            mean_cal = float(np.dot(w, h[sub]) / w.sum())
            rows.append({
                "bin": b.item() if hasattr(b, "item") else b, "subgroup": g, "weight": float(w.sum()),
                "mean_label": mean_label, "mean_calibrated": mean_cal,
                "pud": mean_cal / mean_label if mean_label > 0 else float("nan"),
            })
    return rows


def evaluate(dataset: Dataset, calibrated, config: MetricConfig) -> MetricReport:
    """Full metric report for one calibrated vector."""
    h = _as_vector(calibrated, dataset)
    value, per_division = mvce(dataset, h, config, return_divisions=True)
    n_bins = config.n_bins or max(1, int(dataset.total_weight // config.bin_size))
    n_bins = min(n_bins, len(dataset))
    sweep_value, sweep_bins = ece_sweep(dataset, h, config.p, return_bins=True)
    tce_value = None if dataset.true_prob is None else tce(dataset.true_prob, h, config.p, dataset.weight)
    return MetricReport(
        mvce=value,
        ece=ece_n(dataset, h, n_bins, config.p),
        ece_sweep=sweep_value,
        auc=auc(dataset.label, h) if dataset.is_binary else float("nan"),
        tce=tce_value,
        per_division_pce=[float(e) for e in per_division],
        ece_bins=n_bins,
        ece_sweep_bins=sweep_bins,
    )
