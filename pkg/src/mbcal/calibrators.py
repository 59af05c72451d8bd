"""Classical post-hoc calibrators: Platt, Beta, histogram binning, isotonic, scaling-binning."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import ClassVar, Optional

import numpy as np
from scipy.special import expit, logit

from .core import Dataset, uniform_mass_starts

CLAMP = 1e-6


def _clamped(predictions) -> np.ndarray:
    return np.clip(np.asarray(predictions, dtype=float), CLAMP, 1 - CLAMP)


def _require_both_classes(dataset: Dataset) -> None:
    total = dataset.total_weight
    positive = float(np.dot(dataset.weight, dataset.label))
    if positive <= 0 or positive >= total:
        raise ValueError("calibration set must contain both classes")


def fit_logistic(X: np.ndarray, y: np.ndarray, w: np.ndarray, max_iter: int = 200, tol: float = 1e-8) -> np.ndarray:
    """Weighted maximum-likelihood logistic regression by damped Newton steps.

    Labels may be fractional (aggregated rows). Stops when the gradient norm of
    the mean log-likelihood falls below ``tol`` or after ``max_iter`` steps.
    """
    w = w / w.sum()
    coef = np.zeros(X.shape[1])

    def loglik(c):
        z = X @ c
        return float(np.dot(w, y * z - np.logaddexp(0, z)))

    current = loglik(coef)
    for _ in range(max_iter):
        mu = expit(X @ coef)
        grad = X.T @ (w * (y - mu))
        if np.linalg.norm(grad) < tol:
            break
        hess = (X * (w * mu * (1 - mu))[:, None]).T @ X
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        while scale > 1e-10:
            trial = coef + scale * step
            value = loglik(trial)
            if value >= current:
                coef, current = trial, value
                break
            scale *= 0.5
        else:
            break
    return coef


class Calibrator:
    """Interface shared by every calibrator, MBCT included."""

    kind: ClassVar[str] = ""

    def fit(self, dataset: Dataset) -> "Calibrator":
        raise NotImplementedError

    def apply(self, predictions, features=None) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    @classmethod
    def from_dict(cls, data: dict) -> "Calibrator":
        raise NotImplementedError

    def calibrate(self, dataset: Dataset) -> np.ndarray:
        return self.apply(dataset.prediction, dataset.features)


class IdentityCalibrator(Calibrator):
    kind = "identity"

    def fit(self, dataset):
        return self

    def apply(self, predictions, features=None):
        return np.clip(np.asarray(predictions, dtype=float), 0.0, 1.0)

    def to_dict(self):
        return {}

    @classmethod
    def from_dict(cls, data):
        return cls()


@dataclass(frozen=True)
class PlattParams:
    a: float
    b: float


class PlattCalibrator(Calibrator):
    """``sigmoid(a * logit(x) + b)`` fitted by maximum likelihood."""

    kind = "platt"

    def __init__(self, params: Optional[PlattParams] = None):
        self.params = params

    def fit(self, dataset):
        self.params = platt_fit(dataset)
        return self

    def apply(self, predictions, features=None):
        return expit(self.params.a * logit(_clamped(predictions)) + self.params.b)

    def to_dict(self):
        return asdict(self.params)

    @classmethod
    def from_dict(cls, data):
        return cls(PlattParams(float(data["a"]), float(data["b"])))


def platt_fit(dataset: Dataset) -> PlattParams:
    _require_both_classes(dataset)
    x = logit(_clamped(dataset.prediction))
    if np.ptp(x) == 0:
        rate = float(np.dot(dataset.weight, dataset.label) / dataset.total_weight)
        return PlattParams(0.0, float(logit(rate)))
    X = np.column_stack([x, np.ones_like(x)])
    a, b = fit_logistic(X, dataset.label, dataset.weight)
    return PlattParams(float(a), float(b))


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float
    c: float


class BetaCalibrator(Calibrator):
    """``sigmoid(a * ln x - b * ln(1 - x) + c)`` with ``a, b >= 0``."""

    kind = "beta"

    def __init__(self, params: Optional[BetaParams] = None):
        self.params = params

    def fit(self, dataset):
        self.params = beta_fit(dataset)
        return self

    def apply(self, predictions, features=None):
        x = _clamped(predictions)
        p = self.params
        return expit(p.a * np.log(x) - p.b * np.log1p(-x) + p.c)

    def to_dict(self):
        return asdict(self.params)

    @classmethod
    def from_dict(cls, data):
        return cls(BetaParams(float(data["a"]), float(data["b"]), float(data["c"])))


def beta_fit(dataset: Dataset) -> BetaParams:
    _require_both_classes(dataset)
    x = _clamped(dataset.prediction)
    covariates = {"a": np.log(x), "b": -np.log1p(-x)}
    active = ["a", "b"]
    while True:
        X = np.column_stack([covariates[k] for k in active] + [np.ones_like(x)])
        coef = fit_logistic(X, dataset.label, dataset.weight)
        fitted = dict(zip(active, coef[:-1]))
        negative = [k for k in active if fitted[k] < 0]
        if not negative:
            break
        # drop the most negative coefficient and refit with the rest
        active.remove(min(negative, key=lambda k: fitted[k]))
    return BetaParams(float(fitted.get("a", 0.0)), float(fitted.get("b", 0.0)), float(coef[-1]))


def _tie_aware_bins(keys: np.ndarray, weights: np.ndarray, n_bins: int):
    """Uniform-mass bins over sorted ``keys`` that never split a run of equal keys.

    Returns the sort order, bin starts into that order, and the decision
    boundaries between consecutive bins.
    """
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    starts = uniform_mass_starts(weights[order], n_bins)
    inner = starts[1:-1]
    # snap every cut to the beginning of the run of equal keys it falls in
    inner = np.searchsorted(sk, sk[np.minimum(inner, len(sk) - 1)], side="left")
    starts = np.unique(np.concatenate(([0], inner, [len(sk)])))
    lows = sk[starts[1:-1] - 1]
    highs = sk[starts[1:-1]]
    mids = (lows + highs) / 2
    boundaries = np.where(mids > lows, mids, highs)
    return order, starts, boundaries


@dataclass(frozen=True)
class BinTable:
    boundaries: tuple
    outputs: tuple

    def lookup(self, keys) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.boundaries), np.asarray(keys, dtype=float), side="right")
        return np.asarray(self.outputs)[idx]

    def bin_index(self, keys) -> np.ndarray:
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(keys, dtype=float), side="right")


def _bin_means(values, weights, order, starts) -> np.ndarray:
    w = weights[order]
    num = np.add.reduceat(w * values[order], starts[:-1])
    return num / np.add.reduceat(w, starts[:-1])


def histogram_fit(dataset: Dataset, n_bins: int) -> BinTable:
    if n_bins < 1 or n_bins > len(dataset):
        raise ValueError("n_bins must be between 1 and the dataset size")
    order, starts, boundaries = _tie_aware_bins(dataset.prediction, dataset.weight, n_bins)
    outputs = _bin_means(dataset.label, dataset.weight, order, starts)
    return BinTable(tuple(float(b) for b in boundaries), tuple(float(o) for o in np.clip(outputs, 0, 1)))


class HistogramCalibrator(Calibrator):
    """Uniform-mass histogram binning: every sample gets its bin's mean label."""

    kind = "histogram"

    def __init__(self, n_bins: int = 10, table: Optional[BinTable] = None):
        self.n_bins = n_bins
        self.table = table

    def fit(self, dataset):
        self.table = histogram_fit(dataset, self.n_bins)
        return self

    def apply(self, predictions, features=None):
        return self.table.lookup(predictions)

    def bin_ids(self, predictions, features=None) -> np.ndarray:
        return self.table.bin_index(predictions)

    def to_dict(self):
        return {"n_bins": self.n_bins, "boundaries": list(self.table.boundaries), "outputs": list(self.table.outputs)}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data["n_bins"]), BinTable(tuple(data["boundaries"]), tuple(data["outputs"])))


@dataclass(frozen=True)
class IsotonicFit:
    breakpoints: tuple
    values: tuple

    def lookup(self, predictions) -> np.ndarray:
        bp = np.asarray(self.breakpoints)
        idx = np.searchsorted(bp, np.asarray(predictions, dtype=float), side="right") - 1
        return np.asarray(self.values)[np.clip(idx, 0, len(bp) - 1)]


def pool_adjacent_violators(y, w) -> tuple:
    """Weighted least-squares non-decreasing fit of ``y`` in the given order.

    Returns ``(block_starts, block_values)``.
    """
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    sums, masses, starts = [], [], []
    for i in range(y.shape[0]):
        s, m, st = w[i] * y[i], w[i], i
        while sums and sums[-1] * m > s * masses[-1]:
            s += sums.pop()
            m += masses.pop()
            st = starts.pop()
        sums.append(s)
        masses.append(m)
        starts.append(st)
    return np.array(starts, dtype=np.int64), np.array(sums) / np.array(masses)


def isotonic_fit(dataset: Dataset) -> IsotonicFit:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    order = np.argsort(dataset.prediction, kind="stable")
    x = dataset.prediction[order]
    run_starts = np.concatenate(([0], np.flatnonzero(np.diff(x)) + 1))
    # equal predictions must share one output, so they enter PAV as one pooled point
    w = np.add.reduceat(dataset.weight[order], run_starts)
    wy = np.add.reduceat(dataset.weight[order] * dataset.label[order], run_starts)
    block_starts, values = pool_adjacent_violators(wy / w, w)
    return IsotonicFit(tuple(float(v) for v in x[run_starts][block_starts]),
                       tuple(float(v) for v in np.clip(values, 0, 1)))


class IsotonicCalibrator(Calibrator):
    kind = "isotonic"

    def __init__(self, fit: Optional[IsotonicFit] = None):
        self.fit_ = fit

    def fit(self, dataset):
        self.fit_ = isotonic_fit(dataset)
        return self

    def apply(self, predictions, features=None):
        return self.fit_.lookup(predictions)

    def to_dict(self):
        return {"breakpoints": list(self.fit_.breakpoints), "values": list(self.fit_.values)}

    @classmethod
    def from_dict(cls, data):
        return cls(IsotonicFit(tuple(data["breakpoints"]), tuple(data["values"])))


class ScalingBinningCalibrator(Calibrator):
    """Platt scaling followed by uniform-mass bins over the scaled values.

    Each bin outputs the mean of the scaled values it holds, not the mean label.
    """

    kind = "scaling-binning"

    def __init__(self, n_bins: int = 10, platt: Optional[PlattParams] = None, table: Optional[BinTable] = None):
        self.n_bins = n_bins
        self.platt = PlattCalibrator(platt)
        self.table = table

    def fit(self, dataset):
        if self.n_bins < 1 or self.n_bins > len(dataset):
            raise ValueError("n_bins must be between 1 and the dataset size")
        self.platt.fit(dataset)
        scaled = self.platt.apply(dataset.prediction)
        order, starts, boundaries = _tie_aware_bins(scaled, dataset.weight, self.n_bins)
        outputs = _bin_means(scaled, dataset.weight, order, starts)
        self.table = BinTable(tuple(float(b) for b in boundaries), tuple(float(o) for o in outputs))
        return self

    def apply(self, predictions, features=None):
        return self.table.lookup(self.platt.apply(predictions))

    def bin_ids(self, predictions, features=None) -> np.ndarray:
        return self.table.bin_index(self.platt.apply(predictions))

    def to_dict(self):
        return {"n_bins": self.n_bins, "platt": self.platt.to_dict(),
                "boundaries": list(self.table.boundaries), "outputs": list(self.table.outputs)}

    @classmethod
    def from_dict(cls, data):
        platt = PlattCalibrator.from_dict(data["platt"]).params
        return cls(int(data["n_bins"]), platt, BinTable(tuple(data["boundaries"]), tuple(data["outputs"])))


def scaling_binning_fit(dataset: Dataset, n_bins: int) -> ScalingBinningCalibrator:
    return ScalingBinningCalibrator(n_bins).fit(dataset)
