import math
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wxfm.catalog import Grid
from wxfm.evaluation import (EARTH_RADIUS_KM, MetricReport, TrackFix, composite_errors,
                             eval_forecast, eval_reconstruction, great_circle_km,
                             read_track_csv, rmse, spectral_distance, step_times, track_cyclone,
                             track_errors, write_track_csv, zonal_power_spectrum)
from wxfm.exceptions import DataError
from wxfm.model import WxCModel, desk_config
from wxfm.training import TrainPhaseConfig, valid_anchors

lats = st.floats(-90, 90)
lons = st.floats(-180, 180)


def test_rmse_examples():
    assert rmse(np.zeros((1, 2, 2)), np.ones((1, 2, 2)))[0] == 1.0
    truth = np.array([[[1.0, 1.0], [1.0, 3.0]]])
    assert rmse(np.zeros((1, 2, 2)), truth)[0] == pytest.approx(math.sqrt(3))
    assert rmse(truth, truth)[0] == 0.0
    with pytest.raises(ValueError):
        rmse(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_rmse_latitude_weighting():
    err = np.zeros((1, 2, 3))
    err[0, 0] = 2.0
    assert rmse(err, np.zeros_like(err), [3.0, 1.0])[0] == pytest.approx(math.sqrt(3.0))
    assert rmse(err, np.zeros_like(err), [1.0, 1.0])[0] == pytest.approx(rmse(err, 0 * err)[0])


def test_haversine_reference_distances():
    quarter = math.pi / 2 * EARTH_RADIUS_KM
    assert great_circle_km(0, 0, 0, 90) == pytest.approx(quarter)
    assert great_circle_km(0, 0, 90, 0) == pytest.approx(quarter)
    assert great_circle_km(10, 20, -10, -160) == pytest.approx(2 * quarter)
    assert great_circle_km(5, 179.5, 5, -179.5) == pytest.approx(great_circle_km(5, 0, 5, 1))


@settings(max_examples=100, deadline=None)
@given(lats, lons, lats, lons, lats, lons)
def test_haversine_metric_properties(a1, o1, a2, o2, a3, o3):
    d12 = great_circle_km(a1, o1, a2, o2)
    assert d12 == pytest.approx(great_circle_km(a2, o2, a1, o1), abs=1e-6)
    assert 0 <= d12 <= math.pi * EARTH_RADIUS_KM + 1e-6
    assert great_circle_km(a1, o1, a1, o1) == pytest.approx(0.0, abs=1e-6)
    d13, d32 = great_circle_km(a1, o1, a3, o3), great_circle_km(a3, o3, a2, o2)
    assert d12 <= d13 + d32 + 1e-6


def moving_low(grid, centres, depth=3000.0, width_km=600.0):
    lat, lon = grid.mesh()
    out = []
    for c in centres:
        d = great_circle_km(c[0], c[1], lat, lon)
        out.append(101325.0 - depth * np.exp(-(d / width_km) ** 2))
    return np.stack(out)


def test_tracker_follows_pressure_minimum():
    grid = Grid.regular(72, 144)
    centres = [(13.75 + 2.5 * k, -60.0 - 2.5 * k) for k in range(6)]
    times = step_times(datetime(2005, 8, 25), 6, 6)
    track = track_cyclone(moving_low(grid, centres), grid, times, TrackFix(times[0], 14, -60, 0),
                          search_radius_km=900)
    assert len(track) == 6
    for fix, c in zip(track, centres):
        assert great_circle_km(fix.lat, fix.lon, *c) < 1.0
        assert fix.mslp_hpa() == pytest.approx(1013.25 - 30.0, abs=0.01)
        assert not fix.boundary


def test_tracker_flags_disc_edge_and_stops_on_empty_disc():
    grid = Grid.regular(36, 72)
    times = step_times(datetime(2005, 1, 1), 2, 6)
    # minimum far outside the disc: the lowest point sits on its edge
    field_ = moving_low(grid, [(0.0, 60.0)] * 2)
    track = track_cyclone(field_, grid, times, TrackFix(times[0], 0, 0, 0), search_radius_km=500)
    assert track[0].boundary
    tiny = track_cyclone(field_, grid, times, TrackFix(times[0], 1.0, 1.0, 0), search_radius_km=10)
    assert tiny == []
    with pytest.raises(ValueError):
        track_cyclone(field_[:1], grid, times, TrackFix(times[0], 0, 0, 0))


def test_track_errors_interpolate_reference():
    t0 = datetime(2005, 1, 1)
    ref = [TrackFix(t0, 0, 0, 1000.0, 30.0), TrackFix(t0 + timedelta(hours=12), 0, 10, 980.0, 50.0)]
    model = [TrackFix(t0 + timedelta(hours=6), 0, 5, 995.0, 35.0),
             TrackFix(t0 + timedelta(hours=18), 0, 20, 900.0, 0.0)]
    rows = track_errors(model, ref)
    assert len(rows) == 1       # the second fix lies after the reference ends
    assert rows[0]["track_km"] == pytest.approx(0.0, abs=1e-6)
    assert rows[0]["mslp_hPa"] == pytest.approx(5.0)
    assert rows[0]["wind_ms"] == pytest.approx(5.0)
    with pytest.raises(DataError):
        track_errors(model[1:], ref)


def test_track_errors_across_dateline():
    t0 = datetime(2005, 1, 1)
    ref = [TrackFix(t0, 10, 179, 990.0), TrackFix(t0 + timedelta(hours=6), 10, -179, 990.0)]
    rows = track_errors([TrackFix(t0 + timedelta(hours=3), 10, 180, 990.0)], ref)
    assert rows[0]["track_km"] < 1.0


def test_composite_and_csv_roundtrip(tmp_path):
    runs = [[{"lead_hours": 0.0, "track_km": 10.0, "mslp_hPa": 1.0, "wind_ms": 2.0}],
            [{"lead_hours": 0.0, "track_km": 30.0, "mslp_hPa": 3.0, "wind_ms": 4.0}]]
    assert composite_errors(runs) == [{"lead_hours": 0.0, "n": 2, "track_km": 20.0,
                                       "mslp_hPa": 2.0, "wind_ms": 3.0}]
    track = [TrackFix(datetime(2005, 1, 1), 12.5, 200.0, 987.6, 40.0)]
    write_track_csv(track, tmp_path / "t.csv")
    back = read_track_csv(tmp_path / "t.csv")
    assert back[0].lon == pytest.approx(-160.0) and back[0].mslp == pytest.approx(987.6)
    with pytest.raises(ValueError):
        TrackFix(datetime(2005, 1, 1), 95.0, 0.0, 1000.0)


def test_spectrum_single_wave():
    W = 64
    x = 2.0 * np.cos(2 * np.pi * 5 * np.arange(W) / W + 0.3)
    s = zonal_power_spectrum(np.tile(x, (3, 1)))
    assert s.shape == (33,)
    assert s[5] == pytest.approx(2.0)
    assert np.delete(s, 5).max() < 1e-20


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 1000))
def test_spectrum_parseval(W, seed):
    x = np.random.default_rng(seed).normal(size=(3, W))
    assert zonal_power_spectrum(x).sum() == pytest.approx((x ** 2).mean(), rel=1e-10)


def test_spectral_distance():
    r = np.linspace(1, 2, 31) ** -3
    assert spectral_distance(r, r) == 0.0
    assert spectral_distance(10 * r, r) == pytest.approx(1.0)
    damped = r.copy()
    damped[:5] *= 100       # low wavenumbers are outside the scored band
    assert spectral_distance(damped, r) == 0.0


def test_metric_report_roundtrip(tmp_path):
    rep = MetricReport(["A", "B"], ["lead_time"])
    rep.add([1.0, 2.0], 3, lead_time=6)
    assert rep.value("B", lead_time=6) == 2.0
    with pytest.raises(ValueError):
        rep.add([-1.0, 0.0], 1, lead_time=12)
    with pytest.raises(ValueError):
        rep.add([1.0, 0.0], 0, lead_time=12)
    back = MetricReport.from_dict(rep.to_dict())
    assert back.value("A", lead_time=6) == 1.0
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "lead_time,A,B,count"


@pytest.fixture(scope="module")
def zero_model():
    return WxCModel(desk_config(embed_dim=16, n_heads=2, n_encoder_blocks=1,
                                n_decoder_blocks=1)).zero_head_()


def test_forecast_rows_and_zero_model_equals_climatology(small_forecast_data, zero_model):
    data = small_forecast_data
    anchors = valid_anchors(data, TrainPhaseConfig(lead_times=(6,), input_deltas=(-6,)), 2)[:3]
    rep = eval_forecast(zero_model, data, anchors, 12)
    assert len(rep) == 9
    for lead in (6, 12):
        for v in rep.variables:
            assert rep.value(v, source="model", lead_time=lead) == pytest.approx(
                rep.value(v, source="climatology", lead_time=lead), rel=1e-4)
    assert all(rep.value(v, source="persistence", lead_time=0) == 0.0 for v in rep.variables)
    with pytest.raises(ValueError):
        eval_forecast(zero_model, data, anchors, 9)
    with pytest.raises(DataError):
        eval_forecast(zero_model, data, [0], 12)


def test_reconstruction_grid(small_forecast_data, zero_model):
    data = small_forecast_data
    anchors = valid_anchors(data, TrainPhaseConfig(lead_times=(0,), input_deltas=(-6,)))[:2]
    rep = eval_reconstruction(zero_model, data, anchors, ratios=(0.5, 0.9), lead_times=(0,),
                              n_draws=1)
    assert len(rep) == 4
    assert {r["strategy"] for r in rep.rows} == {"local", "global"}
