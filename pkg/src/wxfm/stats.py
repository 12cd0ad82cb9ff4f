"""Normalization statistics and the day-of-year x hour-of-day climatology."""
from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import (DAYS_PER_YEAR, Dataset, GriddedState, climatology_row, julian_day,
                   read_container, write_container)
from .exceptions import DataError

logger = logging.getLogger(__name__)

SIGMA_MIN, SIGMA_MAX = 1e-4, 1e4
SIGMA_C_MIN, SIGMA_C_MAX = 1e-7, 1e7


class RunningMoments:
    """Per-channel count/mean/M2 accumulator that merges across shards (Chan et al.)."""

    def __init__(self, n_channels: int):
        self.n = 0
        self.mean = np.zeros(n_channels)
        self.m2 = np.zeros(n_channels)

    def update(self, x: np.ndarray) -> "RunningMoments":
        # x: [C, ...]; reduce over everything but the channel axis
        x = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
        other = RunningMoments(x.shape[0])
        other.n = x.shape[1]
        other.mean = x.mean(axis=1)
        other.m2 = ((x - other.mean[:, None]) ** 2).sum(axis=1)
        return self.merge(other)

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean = self.mean + delta * other.n / n
        self.m2 = self.m2 + other.m2 + delta ** 2 * self.n * other.n / n
        self.n = n
        return self

    @property
    def std(self) -> np.ndarray:
        """Population standard deviation."""
        if self.n == 0:
            raise DataError("no samples accumulated")
        return np.sqrt(self.m2 / self.n)


@dataclass(frozen=True)
class NormStats:
    mu: np.ndarray
    sigma: np.ndarray
    sigma_c: np.ndarray | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.clip(np.asarray(self.sigma, dtype=np.float64), SIGMA_MIN, SIGMA_MAX)
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise ValueError("mu and sigma must be matching 1-D arrays")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        if self.sigma_c is not None:
            sigma_c = np.clip(np.asarray(self.sigma_c, dtype=np.float64), SIGMA_C_MIN, SIGMA_C_MAX)
            if sigma_c.shape != mu.shape:
                raise ValueError("sigma_c must match mu")
            object.__setattr__(self, "sigma_c", sigma_c)

    @property
    def n_channels(self) -> int:
        return self.mu.size

    def with_sigma_c(self, sigma_c: np.ndarray) -> "NormStats":
        return NormStats(self.mu, self.sigma, sigma_c)

    def save(self, path: str | os.PathLike):
        arrays = {"mu": self.mu, "sigma": self.sigma}
        if self.sigma_c is not None:
            arrays["sigma_c"] = self.sigma_c
        return write_container(path, "normstats", arrays)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NormStats":
        _, arrays = read_container(path, "normstats")
        return cls(arrays["mu"], arrays["sigma"], arrays.get("sigma_c"))


def _check_nonempty(dataset: Dataset):
    if len(dataset) == 0:
        raise DataError("dataset is empty")


def _check_state(x: np.ndarray, dataset: Dataset, i: int):
    bad = ~np.isfinite(x)
    if bad.any():
        c = int(np.argwhere(bad.reshape(x.shape[0], -1).any(axis=1))[0, 0])
        raise DataError(f"NaN encountered in channel {dataset.catalog.channel_names[c]!r} "
                        f"at {dataset.timestamps[i].isoformat()}")


def compute_norm_stats(dataset: Dataset) -> NormStats:
    """Per-channel mean and population std over all pixels and timestamps."""
    _check_nonempty(dataset)
    acc = RunningMoments(dataset.catalog.n_channels)
    for i in range(len(dataset)):
        x = dataset.values[i]
        _check_state(x, dataset, i)
        acc.update(x)
    return NormStats(acc.mean, acc.std)


def compute_anomaly_stats(dataset: Dataset, clim: "Climatology") -> np.ndarray:
    """Clamped per-channel population std of X_t - C_t."""
    _check_nonempty(dataset)
    acc = RunningMoments(dataset.catalog.n_channels)
    for i, ts in enumerate(dataset.timestamps):
        x = dataset.values[i]
        _check_state(x, dataset, i)
        acc.update(x.astype(np.float64) - clim.lookup(ts))
    return np.clip(acc.std, SIGMA_C_MIN, SIGMA_C_MAX)


def _as_array(state) -> np.ndarray:
    return state.values if isinstance(state, GriddedState) else np.asarray(state)


def _check_channels(x: np.ndarray, n: int):
    if x.ndim < 3 or x.shape[-3] != n:
        raise ValueError(f"expected {n} channels on axis -3, got shape {x.shape}")


def normalize(state, stats: NormStats) -> np.ndarray:
    x = _as_array(state)
    _check_channels(x, stats.n_channels)
    out = (x - stats.mu[:, None, None]) / stats.sigma[:, None, None]
    return out.astype(x.dtype, copy=False)


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    x = np.asarray(x)
    _check_channels(x, stats.n_channels)
    return (x * stats.sigma[:, None, None] + stats.mu[:, None, None]).astype(x.dtype, copy=False)


def normalize_anomaly(x: np.ndarray, clim_state: np.ndarray, stats: NormStats) -> np.ndarray:
    """(X - C) / sigma_C, the forecast target."""
    if stats.sigma_c is None:
        raise DataError("stats carry no sigma_c; run compute_anomaly_stats first")
    x = np.asarray(x)
    _check_channels(x, stats.n_channels)
    return ((x - clim_state) / stats.sigma_c[:, None, None]).astype(x.dtype, copy=False)


# --------------------------------------------------------------------------
# climatology
# --------------------------------------------------------------------------

def quadratic_weights(window_days: int = 61) -> np.ndarray:
    """w(d) proportional to 1 - (d / (half + 1))^2 for d in [-half, half], summing to one."""
    if window_days < 1 or window_days % 2 == 0:
        raise ValueError("window_days must be a positive odd integer")
    half = window_days // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    w = 1.0 - (d / (half + 1)) ** 2
    return w / w.sum()


@dataclass(frozen=True)
class Climatology:
    table: np.ndarray            # [365 * slots_per_day, C, H, W]
    slots_per_day: int
    window_days: int
    weights: np.ndarray
    counts: np.ndarray           # raw samples aggregated per row (per pixel)
    years: float
    weight_rule: str = "1-(d/(half+1))^2"
    extra: dict = field(default_factory=dict)

    def row(self, ts) -> int:
        return climatology_row(ts, self.slots_per_day)

    def lookup(self, ts) -> np.ndarray:
        r = self.row(ts)
        if self.counts[r] == 0 or not np.isfinite(self.table[r]).all():
            raise DataError(f"climatology has no entry for day {julian_day(ts)}, "
                            f"slot {r % self.slots_per_day}")
        return self.table[r]

    def covers(self, ts) -> bool:
        try:
            self.lookup(ts)
        except DataError:
            return False
        return True

    def save(self, path: str | os.PathLike):
        meta = {"slots_per_day": self.slots_per_day, "window_days": self.window_days,
                "years": self.years, "weight_rule": self.weight_rule, "extra": self.extra}
        return write_container(path, "climatology",
                               {"table": self.table, "weights": self.weights,
                                "counts": self.counts}, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Climatology":
        meta, arrays = read_container(path, "climatology")
        return cls(arrays["table"], meta["slots_per_day"], meta["window_days"],
                   arrays["weights"].astype(np.float64), arrays["counts"].astype(np.int64),
                   meta["years"], meta["weight_rule"], meta.get("extra", {}))


def build_climatology(dataset: Dataset, years: float | None = None, window_days: int = 61,
                      slots_per_day: int | None = None,
                      weights: np.ndarray | None = None) -> Climatology:
    """Slot means across years, then a circular weighted average along the day axis.

    Slots with no data are skipped and the weights renormalised over the
    available days, so a partial year still yields a (warned) climatology.
    """
    _check_nonempty(dataset)
    if slots_per_day is None:
        slots_per_day = int(round(24.0 / dataset.cadence_hours)) if len(dataset) > 1 else 1
    if weights is None:
        weights = quadratic_weights(window_days)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != window_days:
        raise ValueError("weights length must equal window_days")

    n_rows = DAYS_PER_YEAR * slots_per_day
    shape = dataset.values.shape[1:]
    sums = np.zeros((n_rows,) + shape)
    counts = np.zeros(n_rows, np.int64)
    for i, ts in enumerate(dataset.timestamps):
        x = dataset.values[i]
        _check_state(x, dataset, i)
        r = climatology_row(ts, slots_per_day)
        sums[r] += x
        counts[r] += 1

    have = counts > 0
    if not have.all():
        warnings.warn(f"climatology: {np.count_nonzero(~have)} of {n_rows} (day, hour) slots "
                      "have no samples; smoothing over available days only", RuntimeWarning)
    means = np.zeros_like(sums)
    means[have] = sums[have] / counts[have, None, None, None]
    del sums

    # [day, slot, ...] so that rolling along axis 0 moves whole days
    means = means.reshape((DAYS_PER_YEAR, slots_per_day) + shape)
    have_d = have.reshape(DAYS_PER_YEAR, slots_per_day).astype(np.float64)
    count_d = counts.reshape(DAYS_PER_YEAR, slots_per_day)
    # circular correlation along days: out[d] = sum_j w[j] * in[d + j - half]
    smooth = correlate1d(means, weights, axis=0, mode="wrap")
    wsum = correlate1d(have_d, weights, axis=0, mode="wrap")
    n_agg = correlate1d(count_d, np.ones(window_days, np.int64), axis=0, mode="wrap")
    ok = wsum > 0
    smooth[ok] /= wsum[ok][:, None, None, None]
    smooth[~ok] = np.nan
    table = smooth.reshape((n_rows,) + shape).astype(np.float32)
    if years is None:
        years = round(len(dataset) / n_rows, 3)
    agg = n_agg.reshape(n_rows)
    agg[~ok.reshape(n_rows)] = 0
    return Climatology(table, slots_per_day, window_days, weights, agg, float(years))


# --------------------------------------------------------------------------
# estimator wrappers
# --------------------------------------------------------------------------

class StateScaler(TransformerMixin, BaseEstimator):
    """Per-channel standardisation of [N, C, H, W] stacks with clamped sigma."""

    def fit(self, X, y=None):
        X = _stack(X)
        acc = RunningMoments(X.shape[1])
        for x in X:
            acc.update(x)
        self.stats_ = NormStats(acc.mean, acc.std)
        self.n_channels_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return normalize(_stack(X), self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return denormalize(_stack(X), self.stats_)


class ClimatologyAnomaly(TransformerMixin, BaseEstimator):
    """Fits a climatology on a Dataset; transforms a Dataset into normalized anomalies."""

    def __init__(self, window_days: int = 61, slots_per_day: int | None = None):
        self.window_days = window_days
        self.slots_per_day = slots_per_day

    def fit(self, X: Dataset, y=None):
        self.climatology_ = build_climatology(X, window_days=self.window_days,
                                              slots_per_day=self.slots_per_day)
        self.stats_ = compute_norm_stats(X).with_sigma_c(
            compute_anomaly_stats(X, self.climatology_))
        return self

    def transform(self, X: Dataset):
        check_is_fitted(self, "climatology_")
        out = np.empty_like(X.values)
        for i, ts in enumerate(X.timestamps):
            out[i] = normalize_anomaly(X.values[i], self.climatology_.lookup(ts), self.stats_)
        return out


def _stack(X) -> np.ndarray:
    if isinstance(X, Dataset):
        return X.values
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected [N, C, H, W], got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DataError("input contains NaN or Inf")
    return X
