import json
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wxfm.catalog import Grid, VariableCatalog, desk_catalog, get_catalog, merra_catalog
from wxfm.data import (Dataset, GriddedState, SynthSettings, climatology_row, generate_synthetic,
                       julian_day, load_dataset, read_container, save_dataset, time_encoding,
                       write_container)
from wxfm.exceptions import ConfigError, DataError


def test_merra_catalog_has_160_channels():
    cat = merra_catalog()
    assert cat.n_channels == 20 + 10 * 14 == 160
    assert cat.n_static == 8


def test_channel_order_surface_then_levels():
    cat = desk_catalog()
    assert cat.channel_names == ["U10M", "T2M", "SLP", "T850", "T500", "T250",
                                 "U850", "U500", "U250"]
    assert cat.channel_info()[3] == ("T", 850.0)
    assert cat.channel_index("U500") == 7


def test_levels_must_decrease():
    with pytest.raises(ConfigError):
        VariableCatalog(("A",), ("T",), (500.0, 850.0))


def test_unknown_catalog_preset():
    with pytest.raises(ConfigError):
        get_catalog("nope")


def test_catalog_roundtrip():
    cat = merra_catalog()
    assert VariableCatalog.from_dict(json.loads(json.dumps(cat.to_dict()))) == cat


def test_regular_grid_geometry():
    g = Grid.regular(24, 48)
    assert g.shape == (24, 48)
    assert g.lat[0] == pytest.approx(-86.25)
    assert g.dlon == pytest.approx(7.5)
    assert g.periodic
    assert not Grid.regional(10.0, 20.0, 5, 6, 0.5).periodic


def test_gridded_state_rejects_nan():
    g = Grid.regular(2, 4)
    vals = np.zeros((1, 2, 4))
    vals[0, 1, 1] = np.nan
    with pytest.raises(DataError):
        GriddedState(vals, datetime(2001, 1, 1), g)


def test_leap_day_aliases_day_365():
    assert julian_day(datetime(2004, 12, 31)) == 365
    assert climatology_row(datetime(2004, 12, 31, 21), 8) == climatology_row(datetime(2001, 12, 31, 21), 8)


@given(st.datetimes(min_value=datetime(1980, 1, 1), max_value=datetime(2030, 1, 1)))
def test_time_encoding_on_unit_circle(ts):
    enc = time_encoding(ts)
    assert abs(enc[0] ** 2 + enc[1] ** 2 - 1) < 1e-12
    assert abs(enc[2] ** 2 + enc[3] ** 2 - 1) < 1e-12


def test_statics_fractions_in_unit_interval(small_dataset):
    f = small_dataset.statics.fields
    assert f.shape[0] == 4
    assert (f[1:] >= 0).all() and (f[1:] <= 1).all()
    assert small_dataset.statics.stack(small_dataset.timestamps[0]).shape == (8, 24, 48)


def test_generator_is_deterministic(tmp_path):
    cat, g = desk_catalog(), Grid.regular(24, 48)
    a = generate_synthetic(7, cat, g, n_steps=6)
    b = generate_synthetic(7, cat, g, n_steps=6)
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_generator_constant_without_noise_cycles_or_anomaly():
    s = SynthSettings(noise=0.0, cycles=0.0, modes=0.0, anomaly=0.0)
    ds = generate_synthetic(1, desk_catalog(), Grid.regular(12, 16), n_steps=5, settings=s)
    per_channel = ds.values.reshape(5, 9, -1)
    assert np.ptp(per_channel, axis=(0, 2)).max() == 0.0


def test_generator_diurnal_cycle_recovered():
    # only the diurnal cycle and noise remain; slot means over 60 days recover it
    s = SynthSettings(noise=0.1, cycles=1.0, modes=0.0, anomaly=0.0)
    cat = VariableCatalog(("U10M",), static_vars=("PHIS",))
    g = Grid.regular(6, 8)
    ds = generate_synthetic(2, cat, g, n_steps=8 * 60, settings=s)
    a = ds.attrs
    lat, lon = g.mesh()
    scale = a["scale"][0]
    for slot in range(8):
        hour = 3 * slot
        x = ds.values[slot::8, 0] / scale
        # remove the annual term analytically, then average over days
        ann = np.array([a["annual_amp"][0] * np.cos(2 * np.pi * (julian_day(t) - 1) / 365
                                                     - a["annual_phase"][0])
                        for t in ds.timestamps[slot::8]])
        resid = (x - ann[:, None, None] * np.sin(np.deg2rad(lat))).mean(axis=0)
        expect = a["diurnal_amp"][0] * np.cos(2 * np.pi * hour / 24 + np.deg2rad(lon)
                                             - a["diurnal_phase"][0]) * np.cos(np.deg2rad(lat))
        # 60 draws of unit-scale noise 0.1: standard error 0.013
        assert np.abs(resid - expect).max() < 4 * 0.1 / np.sqrt(60)


def test_storm_mode_records_track():
    ds = generate_synthetic(0, desk_catalog(), Grid.regular(24, 48), n_steps=4,
                            settings=SynthSettings(storm=True))
    assert len(ds.attrs["storm_track"]) == 4
    assert ds.attrs["storm_track"][0][1] == pytest.approx(20.0)


def test_container_roundtrip(tmp_path, small_dataset):
    sub = small_dataset.subset(0, 3)
    save_dataset(sub, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert np.array_equal(back.values, sub.values)
    assert back.timestamps == sub.timestamps
    assert back.grid == sub.grid
    assert back.catalog == sub.catalog
    assert np.array_equal(back.statics.fields, sub.statics.fields)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["dtype"] == "float32le"
    assert all(e["nbytes"] == 9 * 24 * 48 * 4 for e in manifest["arrays"] if e["name"] != "statics")


def test_truncated_payload_rejected(tmp_path):
    write_container(tmp_path / "c", "x", {"a": np.arange(6, dtype=np.float32)})
    f = tmp_path / "c" / "a.bin"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DataError):
        read_container(tmp_path / "c")


def test_wrong_kind_rejected(tmp_path):
    write_container(tmp_path / "c", "normstats", {"a": np.zeros(2)})
    with pytest.raises(DataError):
        read_container(tmp_path / "c", "dataset")


def test_dataset_shape_validation():
    g = Grid.regular(2, 4)
    with pytest.raises(DataError):
        Dataset(desk_catalog(), g, [datetime(2001, 1, 1)], np.zeros((1, 8, 2, 4)))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=24))
def test_container_bit_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("c")
    arr = np.array(values, np.float32)
    write_container(path, "x", {"v": arr})
    _, back = read_container(path, "x")
    assert back["v"].tobytes() == arr.tobytes()
