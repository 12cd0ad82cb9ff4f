import warnings
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wxfm.catalog import Grid, VariableCatalog
from wxfm.data import Dataset, StaticFields
from wxfm.exceptions import DataError
from wxfm.stats import (SIGMA_C_MAX, SIGMA_C_MIN, SIGMA_MAX, SIGMA_MIN, Climatology,
                        ClimatologyAnomaly, NormStats, RunningMoments, StateScaler,
                        build_climatology, compute_anomaly_stats, compute_norm_stats, denormalize,
                        normalize, normalize_anomaly, quadratic_weights)

ONE = VariableCatalog(("U10M",), static_vars=("PHIS",))


def make_ds(values, start=datetime(2001, 1, 1), hours=3.0, cat=ONE):
    values = np.asarray(values, np.float32)
    n, c, h, w = values.shape
    ts = [start + timedelta(hours=hours * i) for i in range(n)]
    return Dataset(cat, Grid.regular(h, w), ts, values, StaticFields(np.zeros((1, h, w), np.float32)))


def flat_clim(value, shape, slots=8):
    table = np.full((365 * slots, 1) + shape, value, np.float32)
    return Climatology(table, slots, 61, quadratic_weights(), np.ones(365 * slots, np.int64), 1.0)


def test_constant_channel_sigma_clamped():
    s = compute_norm_stats(make_ds(np.full((4, 1, 2, 2), 5.0)))
    assert s.mu[0] == pytest.approx(5.0)
    assert s.sigma[0] == SIGMA_MIN


def test_two_point_distribution():
    v = np.ones((2, 1, 2, 2))
    v[1] = 3.0
    s = compute_norm_stats(make_ds(v))
    assert s.mu[0] == pytest.approx(2.0)
    assert s.sigma[0] == pytest.approx(1.0)


def test_tiny_magnitude_channel_hits_floor():
    rng = np.random.default_rng(0)
    s = compute_norm_stats(make_ds(1e-26 * rng.standard_normal((4, 1, 3, 3))))
    assert s.sigma[0] == SIGMA_MIN


def test_empty_and_nan_datasets_rejected():
    with pytest.raises(DataError):
        compute_norm_stats(make_ds(np.zeros((0, 1, 2, 2))))
    v = np.zeros((2, 1, 2, 2), np.float32)
    ds = make_ds(v)
    ds.values[1, 0, 0, 0] = np.nan
    with pytest.raises(DataError, match="U10M"):
        compute_norm_stats(ds)


def test_anomaly_zero_when_data_equals_climatology():
    ds = make_ds(np.full((16, 1, 2, 2), 3.0))
    assert compute_anomaly_stats(ds, flat_clim(3.0, (2, 2)))[0] == SIGMA_C_MIN


def test_anomaly_plus_minus_one():
    v = np.ones((8, 1, 2, 2))
    v[:, :, 0] = -1.0
    assert compute_anomaly_stats(make_ds(v), flat_clim(0.0, (2, 2)))[0] == pytest.approx(1.0)


def test_anomaly_unit_noise_within_two_percent(small_dataset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        clim = build_climatology(small_dataset)
    rng = np.random.default_rng(1)
    vals = np.stack([clim.lookup(t) for t in small_dataset.timestamps])
    vals = vals + rng.standard_normal(vals.shape)
    ds = Dataset(small_dataset.catalog, small_dataset.grid, small_dataset.timestamps, vals,
                 small_dataset.statics)
    sc = compute_anomaly_stats(ds, clim)
    assert np.abs(sc - 1.0).max() < 0.02


def test_missing_climatology_entry_raises():
    clim = flat_clim(0.0, (2, 2))
    clim.counts[:] = 0
    with pytest.raises(DataError):
        compute_anomaly_stats(make_ds(np.zeros((2, 1, 2, 2))), clim)


def test_normalize_examples():
    stats = NormStats(np.array([2.0]), np.array([2.0]))
    assert normalize(np.full((1, 2, 2), 6.0), stats)[0, 0, 0] == pytest.approx(2.0)
    assert np.all(normalize(np.full((1, 2, 2), 2.0), stats) == 0.0)
    with pytest.raises(ValueError):
        normalize(np.zeros((2, 2, 2)), stats)


def test_normalize_roundtrip():
    rng = np.random.default_rng(0)
    x = (rng.standard_normal((9, 24, 48)) * 100 + 300).astype(np.float32)
    stats = NormStats(rng.uniform(-5, 5, 9), rng.uniform(0.5, 50, 9))
    assert np.abs(denormalize(normalize(x, stats), stats) - x).max() < 1e-5 * np.abs(x).max()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(0, 1e12)),
       arrays(np.float64, 3, elements=st.floats(0, 1e12)))
def test_clamps_always_hold(sigma, sigma_c):
    s = NormStats(np.zeros(3), sigma, sigma_c)
    assert s.sigma.min() >= SIGMA_MIN and s.sigma.max() <= SIGMA_MAX
    assert s.sigma_c.min() >= SIGMA_C_MIN and s.sigma_c.max() <= SIGMA_C_MAX


def test_degenerate_dataset_clamps():
    v = np.zeros((8, 2, 2, 2))
    v[:, 1] = np.where(np.arange(8)[:, None, None] % 2, 1e9, -1e9)
    cat = VariableCatalog(("U10M", "V10M"), static_vars=("PHIS",))
    ds = make_ds(v, cat=cat)
    s = compute_norm_stats(ds)
    assert s.sigma[0] == SIGMA_MIN and s.sigma[1] == SIGMA_MAX
    clim = Climatology(np.zeros((365 * 8, 2, 2, 2), np.float32), 8, 61, quadratic_weights(),
                       np.ones(365 * 8, np.int64), 1.0)
    v2 = v.copy()
    v2[:, 1] *= 1e10
    sc = compute_anomaly_stats(make_ds(v2, cat=cat), clim)
    assert sc[0] == SIGMA_C_MIN and sc[1] == SIGMA_C_MAX


def test_quadratic_weights():
    w = quadratic_weights()
    assert w.size == 61
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.array_equal(w, w[::-1])
    assert (w > 0).all()
    d = np.arange(-30, 31)
    ratio = w / w[30]
    assert np.allclose(ratio, 1 - (d / 31) ** 2)


def test_climatology_of_constant_is_constant():
    ds = make_ds(np.full((365 * 8, 1, 2, 2), 4.5))
    clim = build_climatology(ds)
    assert np.allclose(clim.table, 4.5)
    assert clim.counts.min() == 61


def test_twenty_year_count():
    # counts only depend on timestamps, so a 1x1 grid keeps this cheap
    # twenty whole non-leap years, so every (day, slot) occurs once per year
    years = [y for y in range(1981, 2010) if y % 4][:20]
    ts = [datetime(y, 1, 1) + timedelta(hours=3 * i) for y in years for i in range(365 * 8)]
    n = len(ts)
    ds = Dataset(ONE, Grid.regular(1, 1), ts, np.zeros((n, 1, 1, 1), np.float32),
                 StaticFields(np.zeros((1, 1, 1), np.float32)))
    clim = build_climatology(ds)
    assert clim.counts.min() == clim.counts.max() == 20 * 61 == 1220


def test_partial_year_warns_and_records_counts(small_dataset):
    with pytest.warns(RuntimeWarning):
        clim = build_climatology(small_dataset)
    assert (clim.counts == 0).any()
    assert not clim.covers(datetime(2001, 7, 1))
    with pytest.raises(DataError):
        clim.lookup(datetime(2001, 7, 1))


def test_climatology_save_load(tmp_path):
    clim = build_climatology(make_ds(np.full((365 * 8, 1, 2, 2), 1.0)))
    clim.save(tmp_path / "c")
    back = Climatology.load(tmp_path / "c")
    assert np.array_equal(back.table, clim.table)
    assert back.window_days == 61 and back.slots_per_day == 8


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 7), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (2, 5), elements=st.floats(-1e3, 1e3)))
def test_running_moments_merge(a, b):
    merged = RunningMoments(2).update(a).merge(RunningMoments(2).update(b))
    both = np.concatenate([a, b], axis=1)
    assert np.allclose(merged.mean, both.mean(axis=1), atol=1e-9)
    assert np.allclose(merged.std, both.std(axis=1), atol=1e-6)


def test_state_scaler_estimator():
    rng = np.random.default_rng(0)
    X = rng.normal(3.0, 2.0, (10, 2, 4, 4))
    sc = StateScaler()
    Z = sc.fit_transform(X)
    assert np.allclose(Z.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(sc.inverse_transform(Z), X)
    assert sc.get_params() == {}
    with pytest.raises(ValueError):
        sc.transform(np.zeros((2, 2, 2)))


def test_climatology_anomaly_estimator(small_dataset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        est = ClimatologyAnomaly(window_days=61).fit(small_dataset)
    out = est.transform(small_dataset.subset(0, 4))
    i = 0
    expect = normalize_anomaly(small_dataset.values[i],
                               est.climatology_.lookup(small_dataset.timestamps[i]), est.stats_)
    assert np.allclose(out[i], expect)
    assert est.get_params()["window_days"] == 61
