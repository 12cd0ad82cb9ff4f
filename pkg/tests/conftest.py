import warnings

import numpy as np
import pytest
import torch

from wxfm.catalog import Grid, desk_catalog
from wxfm.data import generate_synthetic
from wxfm.model import desk_config
from wxfm.stats import build_climatology, compute_anomaly_stats, compute_norm_stats
from wxfm.training import ForecastData

_CRITERIA: dict[str, tuple[int, str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n, title = marker.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _CRITERIA[item.nodeid] = (n, title, "PASS" if rep.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, status, detail in sorted(_CRITERIA.values()):
        line = f"criterion {n:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def tiny_config(**changes):
    """A model small enough for float64 finite differences (about 20k parameters)."""
    base = dict(grid_shape=(12, 16), token_size=(2, 2), window_size=(6, 8), embed_dim=16,
                n_heads=2, n_encoder_blocks=3, n_decoder_blocks=3, n_channels=2, n_static=2)
    base.update(changes)
    return desk_config(**base)


@pytest.fixture(scope="session")
def small_dataset():
    """50 days of 3-hourly desk-catalog data on the desk grid."""
    return generate_synthetic(3, desk_catalog(), Grid.regular(24, 48), n_steps=400)


@pytest.fixture(scope="session")
def small_forecast_data(small_dataset):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        clim = build_climatology(small_dataset)
    stats = compute_norm_stats(small_dataset)
    stats = stats.with_sigma_c(compute_anomaly_stats(small_dataset, clim))
    return ForecastData(small_dataset, clim, stats)
