"""Multiple boosting calibration trees.

Each tree partitions the calibration set by discrete features and calibrates
every node with a multiplicative scaler ``k`` (``h(x) = k * x``), so samples
sharing a leaf keep distinct outputs. Splits are chosen greedily to minimise
the multi-view calibration error of the node, and trees are stacked: tree
``t + 1`` recalibrates the output of trees ``1..t``.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .calibrators import Calibrator
from .core import BinStats, Dataset, compute_bin_stats, equal_width_bucket, make_rng
from .metrics import MultiViewDivisions

log = logging.getLogger(__name__)

PREDICTION_FEATURE = "__prediction_bucket__"
_GLOBAL_STREAM = 2**31 - 1


@dataclass(frozen=True)
class MbctConfig:
    alpha: float = 0.05
    e: float = 0.1
    max_depth: int = 5
    max_trees: int = 8
    r: int = 100
    p: float = 2.0
    seed: int = 0
    min_bin_size_override: Optional[int] = None
    prediction_buckets: int = 100
    validation_fraction: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if self.e <= 0:
            raise ValueError("e must be positive")
        if self.max_depth < 0 or self.max_trees < 1 or self.r < 1:
            raise ValueError("max_depth >= 0, max_trees >= 1 and r >= 1 are required")
        if self.validation_fraction is not None and not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in (0, 1)")


# -- minimum bin size -------------------------------------------------------

def _bound(c: float, size: float, variance: float, alpha: float, e: float) -> float:
    log_term = math.log(3 * size / (c * alpha))
    return (math.sqrt(2 * variance * log_term / c) + 3 * log_term / c) / e


def min_bin_size_from_stats(mean_label: float, label_variance: float, size: float,
                            alpha: float, e: float) -> int:
    """Largest ``c`` in ``[2, size / 2]`` for which the concentration bound still reaches ``e * mean_label``.

    With ``B = size / c`` bins, the bound on ``|E[Y_b] - mean_b|`` is
    ``sqrt(2 V ln(3B/alpha) / c) + 3 ln(3B/alpha) / c``; it decreases in ``c``,
    so the admissible set is an interval starting at 2 and a bisection finds
    its right end.
    """
    if mean_label <= 0:
        raise ValueError("degenerate label mean")
    cap = int(size // 2)

    def ok(c):
        return mean_label <= _bound(c, size, label_variance, alpha, e)

    if cap < 2 or not ok(2):
        warnings.warn("no bin size satisfies the bound; using 2", RuntimeWarning, stacklevel=2)
        return 2
    if ok(cap):
        return cap
    lo, hi = 2, cap  # ok(lo) and not ok(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def solve_min_bin_size(dataset: Dataset, alpha: float = 0.05, e: float = 0.1) -> int:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    stats = compute_bin_stats(dataset, np.arange(len(dataset)))
    return min_bin_size_from_stats(stats.mean_label, stats.label_variance, stats.count, alpha, e)


# -- node calibration -------------------------------------------------------

def _scaler(y: np.ndarray, w: np.ndarray, x: np.ndarray) -> tuple:
    pred_mass = float(np.dot(w, x))
    if pred_mass <= 0:
        return 1.0, False
    k = float(np.dot(w, y)) / pred_mass
    x_max = float(x.max())
    if k * x_max > 1:
        return 1.0 / x_max, True
    return k, False


def fit_node_scaler(dataset: Dataset, indices, current_predictions) -> float:
    """Scaler ``k`` that makes the node's mean calibrated value equal its mean label.

    ``k`` is capped at ``1 / max(x)`` so no training output exceeds 1; a node
    whose predictions are all zero keeps ``k = 1``.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty bin")
    x = np.asarray(current_predictions, dtype=float)
    return _scaler(dataset.label[idx], dataset.weight[idx], x[idx])[0]


# -- trees ------------------------------------------------------------------

@dataclass
class TreeNode:
    scaler_k: float
    node_stats: BinStats
    node_id: int = 0
    split_feature: Optional[int] = None
    children: dict = field(default_factory=dict)
    local_mvce_before: Optional[float] = None
    local_mvce_after: Optional[float] = None
    clamped: bool = False

    @property
    def is_leaf(self) -> bool:
        return self.split_feature is None

    def walk(self):
        yield self
        for value in sorted(self.children):
            yield from self.children[value].walk()

    def to_dict(self) -> dict:
        s = self.node_stats
        out = {
            "id": self.node_id, "k": self.scaler_k, "clamped": self.clamped,
            "stats": [s.count, s.mean_label, s.mean_prediction, s.label_variance],
            "mvce_before": self.local_mvce_before, "mvce_after": self.local_mvce_after,
        }
        if not self.is_leaf:
            out["feature"] = self.split_feature
            out["children"] = {str(v): c.to_dict() for v, c in sorted(self.children.items())}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TreeNode":
        node = cls(float(data["k"]), BinStats(*[float(v) for v in data["stats"]]), int(data["id"]),
                   local_mvce_before=data.get("mvce_before"), local_mvce_after=data.get("mvce_after"),
                   clamped=bool(data.get("clamped", False)))
        if "feature" in data:
            node.split_feature = int(data["feature"])
            node.children = {int(v): cls.from_dict(c) for v, c in data["children"].items()}
        return node


@dataclass
class CalibrationTree:
    root: TreeNode
    depth: int

    def nodes(self):
        return list(self.root.walk())

    def leaves(self):
        return [n for n in self.root.walk() if n.is_leaf]

    def reached(self, X: np.ndarray) -> tuple:
        """Scaler and node id reached by every row of the augmented feature matrix ``X``.

        A feature value never seen at a split stops the row at that split's node.
        """
        n = X.shape[0]
        k = np.empty(n)
        ids = np.empty(n, dtype=np.int64)
        stack = [(self.root, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                k[idx] = node.scaler_k
                ids[idx] = node.node_id
                continue
            values = X[idx, node.split_feature]
            routed = np.zeros(idx.size, dtype=bool)
            for v, child in node.children.items():
                mask = values == v
                if mask.any():
                    routed |= mask
                    stack.append((child, idx[mask]))
            rest = idx[~routed]
            k[rest] = node.scaler_k
            ids[rest] = node.node_id
        return k, ids

    def to_dict(self) -> dict:
        return {"depth": self.depth, "root": self.root.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationTree":
        return cls(TreeNode.from_dict(data["root"]), int(data["depth"]))


def augment_features(features: np.ndarray, current, prediction_buckets: int) -> np.ndarray:
    """Append the equal-width bucket of the current calibrated value as the last feature."""
    if not prediction_buckets:
        return np.asarray(features)
    bucket = equal_width_bucket(current, prediction_buckets)
    return np.column_stack([features, bucket])


def _groups(values: np.ndarray) -> tuple:
    order = np.argsort(values, kind="stable")
    sv = values[order]
    cuts = np.flatnonzero(np.diff(sv)) + 1
    return sv[np.concatenate(([0], cuts))], np.split(order, cuts)


def _candidate(X, y, w, x, feature, min_child):
    """Children of one tentative split as ``(value, local positions, k, clamped)``; None if inadmissible."""
    values, groups = _groups(X[:, feature])
    if len(groups) < 2:
        return None
    if min_child is not None and any(w[g].sum() < min_child for g in groups):
        return None
    children = []
    for v, g in zip(values, groups):
        k, clamped = _scaler(y[g], w[g], x[g])
        children.append((int(v), g, k, clamped))
    return children


def _calibrated(x, children):
    h = np.empty_like(x)
    for _, g, k, _ in children:
        h[g] = k * x[g]
    return h


def _select(X, y, w, x, divisions, p, min_child):
    best = None
    for feature in range(X.shape[1]):
        children = _candidate(X, y, w, x, feature, min_child)
        if children is None:
            continue
        score = divisions.score(_calibrated(x, children), y, w, p)
        if best is None or score < best[1]:
            best = (feature, score, children)
    return best


def _node_rng(seed: int, tree_index: int, path: tuple):
    return make_rng(seed, tree_index, len(path), *path)


def select_split_feature(dataset: Dataset, indices, current_predictions, config: MbctConfig,
                         loss_bin_size: float, min_child_size: Optional[float] = None,
                         tree_index: int = 0, path: tuple = ()):
    """Best feature to split a node on, with its local MVCE, or ``None``.

    Every feature that separates the node into at least two value groups is
    tried: each child gets its own scaler and the node's rows are scored on
    shared multi-view divisions with bins of ``loss_bin_size``. Candidates
    leaving a child lighter than ``min_child_size`` are skipped. Ties go to
    the lowest feature index.
    """
    idx = np.asarray(indices, dtype=np.int64)
    x_all = np.asarray(current_predictions, dtype=float)
    X = augment_features(dataset.features, x_all, config.prediction_buckets)[idx]
    y, w, x = dataset.label[idx], dataset.weight[idx], x_all[idx]
    divisions = MultiViewDivisions(w, loss_bin_size, config.r, _node_rng(config.seed, tree_index, path))
    best = _select(X, y, w, x, divisions, config.p, min_child_size)
    return None if best is None else (best[0], best[1])


def _grow(X, y, w, x, config: MbctConfig, beta: float, tree_index: int) -> CalibrationTree:
    loss_bin_size = max(1.0, beta / 2)
    k, clamped = _scaler(y, w, x)
    all_idx = np.arange(y.shape[0])
    root = TreeNode(k, _stats(y, w, x, all_idx), 0, clamped=clamped)
    queue = deque([(root, all_idx, 0, ())])
    next_id = 1
    depth = 0
    while queue:
        node, idx, level, path = queue.popleft()
        depth = max(depth, level)
        if level >= config.max_depth or w[idx].sum() < 2 * beta:
            continue
        yn, wn, xn, Xn = y[idx], w[idx], x[idx], X[idx]
        divisions = MultiViewDivisions(wn, loss_bin_size, config.r, _node_rng(config.seed, tree_index, path))
        before = divisions.score(node.scaler_k * xn, yn, wn, config.p)
        best = _select(Xn, yn, wn, xn, divisions, config.p, beta)
        if best is None or not best[1] < before:
            continue
        feature, after, children = best
        node.split_feature = feature
        node.local_mvce_before = before
        node.local_mvce_after = after
        for value, g, kc, cl in children:
            child_idx = idx[g]
            child = TreeNode(kc, _stats(y, w, x, child_idx), next_id, clamped=cl)
            next_id += 1
            node.children[value] = child
            queue.append((child, child_idx, level + 1, path + (feature, value)))
    return CalibrationTree(root, depth)


def _stats(y, w, x, idx) -> BinStats:
    ww = w[idx]
    count = float(ww.sum())
    mean_label = float(np.dot(ww, y[idx]) / count)
    mean_pred = float(np.dot(ww, x[idx]) / count)
    variance = float(np.dot(ww, (y[idx] - mean_label) ** 2 + y[idx] * (1 - y[idx])) / count)
    return BinStats(count, mean_label, mean_pred, variance)


def grow_tree(dataset: Dataset, current_predictions, config: MbctConfig, beta: float,
              tree_index: int = 0) -> CalibrationTree:
    """Grow one calibration tree breadth-first over the current predictions.

    A node is split only while it is shallower than ``max_depth``, every child
    keeps at least ``beta`` samples, and the split lowers the node's local MVCE.
    """
    if dataset.total_weight < 2 * beta:
        raise ValueError("dataset must hold at least two minimum-size bins")
    x = np.asarray(current_predictions, dtype=float)
    X = augment_features(dataset.features, x, config.prediction_buckets)
    return _grow(X, dataset.label, dataset.weight, x, config, beta, tree_index)


def _apply_tree(tree: CalibrationTree, x: np.ndarray, features: np.ndarray, buckets: int) -> tuple:
    k, ids = tree.reached(augment_features(features, x, buckets))
    return np.minimum(k * x, 1.0), ids


# -- boosted model ----------------------------------------------------------

class MbctModel(Calibrator):
    """Fitted stack of calibration trees; call :func:`fit` to build one."""

    kind = "mbct"

    def __init__(self, trees, config: MbctConfig, beta: int, global_mvce_per_tree, initial_mvce: float,
                 n_features: int, feature_names=()):
        self.trees = list(trees)
        self.config = config
        self.beta = int(beta)
        self.global_mvce_per_tree = list(global_mvce_per_tree)
        self.initial_mvce = initial_mvce
        self.n_features = int(n_features)
        self.feature_names = tuple(feature_names)

    def fit(self, dataset):
        fitted = fit(dataset, self.config)
        self.__dict__.update(fitted.__dict__)
        return self

    def _check(self, predictions, features):
        x = np.clip(np.asarray(predictions, dtype=float).ravel(), 0.0, 1.0)
        if features is None:
            features = np.zeros((x.shape[0], 0), dtype=np.int64)
        F = np.asarray(features)
        if F.ndim == 1:
            F = F.reshape(1, -1) if x.shape[0] == 1 else F.reshape(-1, 1)
        if F.shape != (x.shape[0], self.n_features):
            raise ValueError(f"feature schema mismatch: expected {self.n_features} features per sample, "
                             f"got shape {F.shape}")
        return x, F

    def apply(self, predictions, features=None) -> np.ndarray:
        x, F = self._check(predictions, features)
        for tree in self.trees:
            x, _ = _apply_tree(tree, x, F, self.config.prediction_buckets)
        return x

    def reached_nodes(self, predictions, features) -> np.ndarray:
        """Node id reached in every tree, shape ``(n, n_trees)``."""
        x, F = self._check(predictions, features)
        out = np.zeros((x.shape[0], len(self.trees)), dtype=np.int64)
        for t, tree in enumerate(self.trees):
            x, out[:, t] = _apply_tree(tree, x, F, self.config.prediction_buckets)
        return out

    def bin_ids(self, predictions, features) -> np.ndarray:
        """Bin of every sample: its combination of reached nodes across all trees."""
        nodes = self.reached_nodes(predictions, features)
        if nodes.shape[1] == 0:
            return np.zeros(nodes.shape[0], dtype=np.int64)
        return np.unique(nodes, axis=0, return_inverse=True)[1].ravel()

    def to_dict(self) -> dict:
        c = self.config
        return {
            "config": {"alpha": c.alpha, "e": c.e, "max_depth": c.max_depth, "max_trees": c.max_trees,
                       "r": c.r, "p": c.p, "seed": c.seed, "min_bin_size_override": c.min_bin_size_override,
                       "prediction_buckets": c.prediction_buckets, "validation_fraction": c.validation_fraction},
            "beta": self.beta,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "initial_mvce": self.initial_mvce,
            "global_mvce_per_tree": self.global_mvce_per_tree,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MbctModel":
        return cls([CalibrationTree.from_dict(t) for t in data["trees"]], MbctConfig(**data["config"]),
                   data["beta"], data["global_mvce_per_tree"], data["initial_mvce"], data["n_features"],
                   data.get("feature_names", ()))


class MbctCalibrator(MbctModel):
    """Unfitted MBCT with the same interface as the baseline calibrators."""

    def __init__(self, config: Optional[MbctConfig] = None):
        super().__init__([], config or MbctConfig(), 2, [], float("nan"), 0)


def fit(dataset: Dataset, config: MbctConfig = MbctConfig()) -> MbctModel:
    """Boost calibration trees until ``max_trees`` or the first tree that fails to lower global MVCE."""
    beta = config.min_bin_size_override or solve_min_bin_size(dataset, config.alpha, config.e)
    if dataset.total_weight < 2 * beta:
        raise ValueError(f"dataset too small: need at least {2 * beta} samples for minimum bin size {beta}")
    train = np.arange(len(dataset))
    holdout = train
    if config.validation_fraction:
        perm = make_rng(config.seed, _GLOBAL_STREAM, 1).permutation(len(dataset))
        n_valid = int(round(config.validation_fraction * len(dataset)))
        holdout, train = np.sort(perm[:n_valid]), np.sort(perm[n_valid:])
    X = np.asarray(dataset.features)
    y, w = dataset.label, dataset.weight
    x = dataset.prediction.copy()
    global_bin = min(beta, dataset.weight[holdout].sum() / 2)
    divisions = MultiViewDivisions(w[holdout], global_bin, config.r, make_rng(config.seed, _GLOBAL_STREAM))
    best = divisions.score(x[holdout], y[holdout], w[holdout], config.p)
    initial = best
    trees, losses = [], []
    for t in range(config.max_trees):
        Xa = augment_features(X, x, config.prediction_buckets)
        tree = _grow(Xa[train], y[train], w[train], x[train], config, beta, t)
        candidate, _ = _apply_tree(tree, x, X, config.prediction_buckets)
        loss = divisions.score(candidate[holdout], y[holdout], w[holdout], config.p)
        log.info("tree %d: depth %d, %d leaves, global MVCE %.6g (best %.6g)",
                 t, tree.depth, len(tree.leaves()), loss, best)
        if not loss < best:
            break
        trees.append(tree)
        losses.append(loss)
        best = loss
        x = candidate
    return MbctModel(trees, config, beta, losses, initial, dataset.n_features, dataset.feature_names)


def apply(model: MbctModel, prediction, features) -> np.ndarray:
    return model.apply(prediction, features)


# -- rule export ------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    """``conditions -> multiply by multiplier`` for one tree.

    A condition is ``(feature, values, negated)``: the feature equals the
    single value, or (negated) matches none of ``values``. Fallback rules catch
    feature values a split never saw during training.
    """

    tree: int
    conditions: tuple
    multiplier: float
    fallback: bool = False

    def matches(self, X: np.ndarray) -> np.ndarray:
        mask = np.ones(X.shape[0], dtype=bool)
        for feature, values, negated in self.conditions:
            hit = np.isin(X[:, feature], values)
            mask &= ~hit if negated else hit
        return mask


@dataclass
class RuleSet:
    rules: list
    n_trees: int
    n_features: int
    prediction_buckets: int
    feature_names: tuple = ()

    @property
    def leaf_rules(self) -> list:
        return [r for r in self.rules if not r.fallback]

    def apply(self, predictions, features) -> np.ndarray:
        x = np.clip(np.asarray(predictions, dtype=float).ravel(), 0.0, 1.0)
        F = np.asarray(features).reshape(x.shape[0], self.n_features)
        for t in range(self.n_trees):
            X = augment_features(F, x, self.prediction_buckets)
            k = np.full(x.shape[0], np.nan)
            for rule in self.rules:
                if rule.tree == t:
                    k[rule.matches(X)] = rule.multiplier
            x = np.minimum(k * x, 1.0)
        return x


def export_rules(model: MbctModel) -> RuleSet:
    """Flatten every root-to-leaf path into a conjunction of feature conditions."""
    rules = []
    for t, tree in enumerate(model.trees):
        stack = [(tree.root, ())]
        while stack:
            node, conds = stack.pop()
            if node.is_leaf:
                rules.append(Rule(t, conds, node.scaler_k))
                continue
            seen = tuple(sorted(node.children))
            rules.append(Rule(t, conds + ((node.split_feature, seen, True),), node.scaler_k, fallback=True))
            for v in reversed(seen):
                stack.append((node.children[v], conds + ((node.split_feature, (v,), False),)))
    names = tuple(model.feature_names)
    if model.config.prediction_buckets:
        names = names + (PREDICTION_FEATURE,)
    return RuleSet(rules, len(model.trees), model.n_features, model.config.prediction_buckets, names)
