import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbcal.calibrators import (BetaCalibrator, HistogramCalibrator, IdentityCalibrator, IsotonicCalibrator,
                               PlattCalibrator, ScalingBinningCalibrator, beta_fit, histogram_fit, isotonic_fit,
                               platt_fit, pool_adjacent_violators, scaling_binning_fit)
from mbcal.core import Dataset, make_rng
from mbcal.metrics import Monotonicity, auc, classify_monotonicity

from . import oracles


def _data(preds, labels, weights=None):
    preds = np.asarray(preds, dtype=float)
    return Dataset(np.zeros((preds.shape[0], 0)), preds, labels, weights)


def _bernoulli(n, seed, truth=lambda x: x, low=0.01, high=0.99):
    rng = make_rng(seed)
    x = rng.uniform(low, high, n)
    return _data(x, (rng.random(n) < truth(x)).astype(float))


def _logloss(p, y):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))


# -- Platt -------------------------------------------------------------------

def test_platt_recovers_identity():
    params = platt_fit(_bernoulli(100_000, 1))
    assert params.a == pytest.approx(1, abs=0.05)
    assert params.b == pytest.approx(0, abs=0.05)


def test_platt_constant_predictions():
    d = _data(np.full(10, 0.3), [1, 0, 0, 0, 1, 0, 0, 0, 0, 0])
    params = platt_fit(d)
    assert params.a == 0
    assert params.b == pytest.approx(math.log(0.2 / 0.8), abs=1e-6)


def test_platt_lowers_small_predictions_for_squared_truth():
    d = _bernoulli(50_000, 2, truth=lambda x: x ** 2)
    cal = PlattCalibrator().fit(d)
    out = cal.apply(d.prediction)
    assert _logloss(out, d.label) < _logloss(d.prediction, d.label)
    assert cal.apply([0.1])[0] < 0.1


def test_platt_single_class():
    with pytest.raises(ValueError):
        platt_fit(_data([0.2, 0.4], [1, 1]))


# -- Beta --------------------------------------------------------------------

def test_beta_recovers_identity():
    params = beta_fit(_bernoulli(100_000, 3))
    assert (params.a, params.b, params.c) == pytest.approx((1, 1, 0), abs=0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 4))
def test_beta_parameters_non_negative(seed, q):
    d = _bernoulli(400, seed, truth=lambda x: 1 - x ** q)
    if len(set(d.label)) < 2:
        return
    params = beta_fit(d)
    assert params.a >= 0 and params.b >= 0


def test_beta_output_strictly_monotonic():
    d = _bernoulli(5000, 4, truth=lambda x: x ** 1.5)
    x = np.sort(make_rng(5).uniform(0.01, 0.99, 1000))
    assert classify_monotonicity(x, BetaCalibrator().fit(d).apply(x)) is Monotonicity.STRICTLY_MONOTONIC


# -- histogram binning -------------------------------------------------------

def test_histogram_hand_example():
    table = histogram_fit(_data([0.1, 0.2, 0.8, 0.9], [0, 1, 1, 1]), 2)
    assert table.outputs == (0.5, 1.0)
    assert table.boundaries == (0.5,)


def test_histogram_training_pce_is_zero_and_out_of_range_clamps():
    d = _bernoulli(3000, 6, truth=lambda x: x ** 2)
    cal = HistogramCalibrator(15).fit(d)
    out = cal.apply(d.prediction)
    ids = cal.bin_ids(d.prediction)
    for b in np.unique(ids):
        m = ids == b
        assert abs(out[m].mean() - d.label[m].mean()) <= 1e-9
    assert cal.apply([0.0])[0] == cal.table.outputs[0]
    assert cal.apply([1.0])[0] == cal.table.outputs[-1]


def test_histogram_too_many_bins():
    with pytest.raises(ValueError):
        histogram_fit(_data([0.1, 0.2], [0, 1]), 3)


def test_histogram_non_individual():
    d = _bernoulli(2000, 7)
    cal = HistogramCalibrator(8).fit(d)
    out, ids = cal.apply(d.prediction), cal.bin_ids(d.prediction)
    for b in np.unique(ids):
        assert np.unique(out[ids == b]).size == 1


# -- isotonic ----------------------------------------------------------------

def test_isotonic_examples():
    fit = isotonic_fit(_data([0.2, 0.8], [1, 0]))
    assert list(fit.lookup([0.2, 0.8])) == [0.5, 0.5]
    fit = isotonic_fit(_data([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1]))
    assert list(fit.lookup([0.1, 0.2, 0.3, 0.4])) == [0, 0, 1, 1]
    assert fit.lookup([0.0])[0] == 0 and fit.lookup([1.0])[0] == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0.1, 3)), min_size=1, max_size=8))
def test_pav_matches_brute_force(rows):
    y, w = (np.array(v) for v in zip(*rows))
    starts, values = pool_adjacent_violators(y, w)
    fitted = np.repeat(values, np.diff(np.append(starts, len(y))))
    ref, best = oracles.isotonic_oracle(list(y), list(w))
    assert np.allclose(fitted, ref, atol=1e-9)
    assert np.all(np.diff(values) >= 0)


def test_isotonic_pools_tied_predictions():
    fit = isotonic_fit(_data([0.3, 0.3, 0.3, 0.6], [1, 0, 0, 1]))
    assert fit.lookup([0.3])[0] == pytest.approx(1 / 3)
    out = IsotonicCalibrator().fit(_bernoulli(500, 8)).apply(np.linspace(0, 1, 100))
    assert np.all(np.diff(out) >= 0)


# -- scaling-binning ---------------------------------------------------------

def test_scaling_binning_singleton_bins_reproduce_scaled_values():
    d = _bernoulli(50, 9)
    cal = scaling_binning_fit(d, 50)
    scaled = cal.platt.apply(d.prediction)
    assert np.allclose(cal.apply(d.prediction), scaled, atol=1e-12)


def test_scaling_binning_outputs_within_bin_range_and_non_strict():
    d = _bernoulli(4000, 10, truth=lambda x: x ** 2)
    cal = scaling_binning_fit(d, 12)
    scaled = cal.platt.apply(d.prediction)
    out, ids = cal.apply(d.prediction), cal.bin_ids(d.prediction)
    for b in np.unique(ids):
        m = ids == b
        assert scaled[m].min() - 1e-12 <= out[m][0] <= scaled[m].max() + 1e-12
        assert np.unique(out[m]).size == 1
    assert classify_monotonicity(d.prediction, out) is Monotonicity.NON_STRICTLY_MONOTONIC


# -- shared interface --------------------------------------------------------

CALIBRATORS = [IdentityCalibrator(), PlattCalibrator(), BetaCalibrator(), HistogramCalibrator(20),
               IsotonicCalibrator(), ScalingBinningCalibrator(20)]


@pytest.mark.parametrize("cal", CALIBRATORS, ids=lambda c: c.kind)
def test_round_trip_is_bit_identical(cal):
    d = _bernoulli(3000, 11, truth=lambda x: x ** 2)
    cal.fit(d)
    x = np.concatenate([make_rng(12).random(2000), [0.0, 1.0]])
    clone = type(cal).from_dict(cal.to_dict())
    assert np.array_equal(cal.apply(x), clone.apply(x))
    out = cal.apply(x)
    assert out.min() >= 0 and out.max() <= 1


def test_monotone_maps_keep_auc_exactly():
    d = _bernoulli(20_000, 13, truth=lambda x: x ** 2)
    base = auc(d.label, d.prediction)
    for cal in (PlattCalibrator(), BetaCalibrator()):
        assert auc(d.label, cal.fit(d).apply(d.prediction)) == base
