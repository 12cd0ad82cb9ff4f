"""Verification: RMSE tables, reconstruction sweeps, rollouts, storm tracks, spectra."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import torch

from .catalog import Grid
from .data import parse_time
from .exceptions import DataError
from .masking import MaskSpec, Strategy, sample_mask
from .model.core import WxCModel
from .training import ForecastData, Sample, latitude_weights

EARTH_RADIUS_KM = 6371.0
RECONSTRUCTION_RATIOS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def rmse(pred, truth, lat_weights=None) -> np.ndarray:
    """Per-channel RMSE over [C, H, W] (or [N, C, H, W]); optional per-row weights."""
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.ndim == 3:
        pred, truth = pred[None], truth[None]
    se = (pred - truth) ** 2                                  # [N, C, H, W]
    if lat_weights is None:
        return np.sqrt(se.mean(axis=(0, 2, 3)))
    w = np.asarray(lat_weights, np.float64)
    if w.shape != (se.shape[2],):
        raise ValueError(f"lat_weights must have length {se.shape[2]}")
    row_mse = se.mean(axis=(0, 3))                            # [C, H]
    return np.sqrt((row_mse * w).sum(axis=1) / w.sum())


@dataclass
class MetricReport:
    """RMSE rows keyed by experiment coordinates, one column per variable."""
    variables: list[str]
    keys: list[str]
    rows: list[dict] = field(default_factory=list)
    lat_weighted: bool = False

    def add(self, values, count: int, **coords):
        values = np.asarray(values, np.float64)
        if values.shape != (len(self.variables),):
            raise ValueError("one RMSE per variable expected")
        if count <= 0:
            raise ValueError("sample count must be positive")
        if (values < 0).any() or not np.isfinite(values).all():
            raise ValueError("RMSE values must be finite and non-negative")
        self.rows.append({**coords, "rmse": values, "count": int(count)})

    def __len__(self) -> int:
        return len(self.rows)

    def select(self, **coords) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in coords.items())]

    def value(self, variable: str, **coords) -> float:
        rows = self.select(**coords)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {coords}")
        return float(rows[0]["rmse"][self.variables.index(variable)])

    def to_csv(self, path: str | os.PathLike):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.keys + self.variables + ["count"])
            for r in self.rows:
                w.writerow([r[k] for k in self.keys] + [f"{v:.8g}" for v in r["rmse"]]
                           + [r["count"]])

    def to_dict(self) -> dict:
        return {"variables": self.variables, "keys": self.keys,
                "lat_weighted": self.lat_weighted,
                "rows": [{**{k: r[k] for k in self.keys}, "rmse": r["rmse"].tolist(),
                          "count": r["count"]} for r in self.rows]}

    def to_json(self, path: str | os.PathLike):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        rep = cls(list(d["variables"]), list(d["keys"]), lat_weighted=d["lat_weighted"])
        for r in d["rows"]:
            rep.add(r["rmse"], r["count"], **{k: r[k] for k in rep.keys})
        return rep


# --------------------------------------------------------------------------
# model evaluation
# --------------------------------------------------------------------------

def _lat_w(data: ForecastData, lat_weighted: bool):
    return latitude_weights(data.dataset.grid.lat) if lat_weighted else None


def _default_delta(model: WxCModel) -> int:
    deltas = model.cfg.input_deltas
    return -6 if -6 in deltas else deltas[0]


@torch.no_grad()
def predict_states(model: WxCModel, data: ForecastData, samples: list[Sample], n_steps: int = 1,
                   mask=None) -> list[np.ndarray]:
    """Physical-unit predictions [B, C, H, W] for each of ``n_steps`` rollout steps.

    The mask, if any, applies to the first step; later steps feed the
    prediction back as the newest input.
    """
    model.eval()
    stats = data.stats
    dtype = data.dtype
    mu = torch.as_tensor(stats.mu, dtype=dtype)[:, None, None]
    sigma = torch.as_tensor(stats.sigma, dtype=dtype)[:, None, None]
    sigma_c = torch.as_tensor(stats.sigma_c, dtype=dtype)[:, None, None]
    leads = [s.lead_time for s in samples]
    deltas = [s.input_delta for s in samples]
    x_t, x_prev = data.inputs(samples)
    out_states = []
    for k in range(1, n_steps + 1):
        clim_n, statics, clim = data.context(samples, k)
        out = model(x_t, x_prev, clim_n, statics, leads, deltas, mask if k == 1 else None)
        x_hat = out * sigma_c + clim
        out_states.append(x_hat.numpy().astype(np.float64))
        x_prev, x_t = x_t, (x_hat - mu) / sigma
    return out_states


def _batches(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def eval_reconstruction(model: WxCModel, data: ForecastData, anchors: list[int],
                        ratios=RECONSTRUCTION_RATIOS, strategies=(Strategy.LOCAL, Strategy.GLOBAL),
                        lead_times=(0, 6), input_delta: int | None = None, seed: int = 0,
                        lat_weighted: bool = False, batch_size: int = 8,
                        n_draws: int = 4) -> MetricReport:
    """RMSE sweep over masking ratio x strategy x lead time.

    Each cell averages ``n_draws`` masks. Draw d of a strategy uses the same
    seed at every ratio, so masks are nested: a higher ratio hides a superset
    of the tokens hidden at a lower one, and equal mask counts give equal masks.
    """
    cfg = model.cfg
    delta = input_delta if input_delta is not None else _default_delta(model)
    report = MetricReport(data.dataset.catalog.channel_names, ["ratio", "strategy", "lead_time"],
                          lat_weighted=lat_weighted)
    lw = _lat_w(data, lat_weighted)
    for ratio in ratios:
        for si, strategy in enumerate(strategies):
            strategy = Strategy(strategy)
            masks = [sample_mask([seed, si, d], MaskSpec(strategy, ratio), cfg.n_windows,
                                 cfg.tokens_per_window) for d in range(n_draws)]
            for lead in lead_times:
                samples = [Sample(a, lead, delta) for a in anchors]
                samples = [s for s in samples if data.valid(s)]
                if not samples:
                    raise DataError(f"no valid samples for lead {lead}, delta {delta}")
                mse = 0.0
                for batch in _batches(samples, batch_size):
                    truth = data.target(batch, 1)[0].numpy()
                    for mask in masks:
                        pred = predict_states(model, data, batch, 1, mask)[0]
                        mse = mse + _sq_err(pred, truth, lw) * len(batch)
                report.add(np.sqrt(mse / (len(samples) * n_draws)), len(samples) * n_draws,
                           ratio=ratio, strategy=strategy.value, lead_time=lead)
    return report


def eval_forecast(model: WxCModel, data: ForecastData, anchors: list[int], max_lead_hours: int,
                  step_hours: int = 6, input_delta: int | None = None,
                  lat_weighted: bool = False, batch_size: int = 8) -> MetricReport:
    """Dense autoregressive rollout with persistence and climatology references.

    Rows cover leads 0, step, 2 step, ... max_lead for sources model,
    persistence and climatology. At lead 0 every source is scored on X_t.
    """
    if max_lead_hours % step_hours:
        raise ValueError("max_lead_hours must be a multiple of step_hours")
    n_steps = max_lead_hours // step_hours
    delta = input_delta if input_delta is not None else _default_delta(model)
    samples = [Sample(a, step_hours, delta) for a in anchors]
    samples = [s for s in samples if data.valid(s, n_steps)]
    if not samples:
        raise DataError("no anchors support the requested rollout")
    lw = _lat_w(data, lat_weighted)
    ds = data.dataset
    report = MetricReport(ds.catalog.channel_names, ["source", "lead_time"],
                          lat_weighted=lat_weighted)
    sums = {}
    for batch in _batches(samples, batch_size):
        x0 = np.stack([ds.values[s.index] for s in batch]).astype(np.float64)
        preds = predict_states(model, data, batch, n_steps) if n_steps else []
        for k in range(n_steps + 1):
            if k == 0:
                truth, model_k, clim_k = x0, x0, x0
            else:
                truth = data.target(batch, k)[0].numpy().astype(np.float64)
                model_k = preds[k - 1]
                clim_k = data.context(batch, k)[2].numpy().astype(np.float64)
            for source, pred in (("model", model_k), ("persistence", x0), ("climatology", clim_k)):
                se = _sq_err(pred, truth, lw)
                acc = sums.setdefault((source, k * step_hours), [0.0, 0])
                acc[0] = acc[0] + se * len(batch)
                acc[1] += len(batch)
    for (source, lead), (total, n) in sums.items():
        report.add(np.sqrt(total / n), n, source=source, lead_time=lead)
    return report


def _sq_err(pred, truth, lw) -> np.ndarray:
    return rmse(pred, truth, lw) ** 2


# --------------------------------------------------------------------------
# great-circle distance and storm tracking
# --------------------------------------------------------------------------

def great_circle_km(lat1, lon1, lat2, lon2):
    """Haversine distance in km on a sphere of radius 6371.0 km."""
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dphi = p2 - p1
    dlam = np.deg2rad(np.asarray(lon2, np.float64) - np.asarray(lon1, np.float64))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def wrap_lon(lon):
    return (np.asarray(lon, np.float64) + 180.0) % 360.0 - 180.0


@dataclass
class TrackFix:
    time: datetime
    lat: float
    lon: float
    mslp: float
    wind: float = float("nan")
    mslp_unit: str = "hPa"
    boundary: bool = False

    def __post_init__(self):
        self.time = parse_time(self.time)
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        self.lon = float(wrap_lon(self.lon))

    def mslp_hpa(self) -> float:
        return self.mslp / 100.0 if self.mslp_unit == "Pa" else self.mslp


def track_cyclone(mslp: np.ndarray, grid: Grid, timestamps: list[datetime], init: TrackFix,
                  search_radius_km: float = 450.0, wind: np.ndarray | None = None,
                  mslp_unit: str = "Pa") -> list[TrackFix]:
    """Follow the pressure minimum within ``search_radius_km`` of the previous fix.

    ``mslp`` is [T, H, W]. A fix whose minimum lies on the edge of the search
    disc or on the outer grid row is flagged ``boundary``; an empty disc ends
    the track.
    """
    mslp = np.asarray(mslp, np.float64)
    if mslp.ndim != 3 or mslp.shape[1:] != grid.shape or len(timestamps) != len(mslp):
        raise ValueError("mslp must be [T, H, W] on the grid with one timestamp per step")
    lat, lon = grid.mesh()
    if len(timestamps) > 2:
        steps = np.diff([t.timestamp() for t in timestamps])
        if not np.allclose(steps, steps[0]):
            raise ValueError("timestamps must be uniformly spaced")
    if not (lat.min() - grid.dlat <= init.lat <= lat.max() + grid.dlat):
        raise ValueError("initial fix lies outside the grid")
    fixes = []
    prev = (init.lat, init.lon)
    H, W = grid.shape
    for t in range(len(mslp)):
        dist = great_circle_km(prev[0], prev[1], lat, lon)
        disc = dist <= search_radius_km
        if not disc.any():
            break
        field_ = np.where(disc, mslp[t], np.inf)
        i, j = np.unravel_index(np.argmin(field_), field_.shape)
        boundary = _on_disc_edge(disc, i, j, grid.periodic) or i in (0, H - 1) \
            or (not grid.periodic and j in (0, W - 1))
        w = float(np.max(np.where(disc, wind[t], -np.inf))) if wind is not None else float("nan")
        p = mslp[t, i, j] / 100.0 if mslp_unit == "Pa" else mslp[t, i, j]
        fix = TrackFix(timestamps[t], float(lat[i, j]), float(lon[i, j]), float(p), w,
                       "hPa", bool(boundary))
        fixes.append(fix)
        prev = (fix.lat, fix.lon)
    return fixes


def _on_disc_edge(disc: np.ndarray, i: int, j: int, periodic: bool) -> bool:
    H, W = disc.shape
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ii, jj = i + di, j + dj
        if periodic:
            jj %= W
        if not (0 <= ii < H and 0 <= jj < W) or not disc[ii, jj]:
            return True
    return False


def track_errors(model_track: list[TrackFix], reference: list[TrackFix]) -> list[dict]:
    """Per-fix great-circle, MSLP (hPa) and wind errors against the reference.

    The reference is interpolated linearly in time to each model fix; fixes
    outside the reference period are skipped.
    """
    if not model_track or not reference:
        raise DataError("empty track")
    ref = sorted(reference, key=lambda f: f.time)
    rt = np.array([f.time.timestamp() for f in ref])
    rlat = np.array([f.lat for f in ref])
    rlon = np.rad2deg(np.unwrap(np.deg2rad([f.lon for f in ref])))
    rp = np.array([f.mslp_hpa() for f in ref])
    rw = np.array([f.wind for f in ref])
    t0 = model_track[0].time
    out = []
    for fix in model_track:
        t = fix.time.timestamp()
        if t < rt[0] - 1e-6 or t > rt[-1] + 1e-6:
            continue
        lat = np.interp(t, rt, rlat)
        lon = wrap_lon(np.interp(t, rt, rlon))
        out.append({"lead_hours": (fix.time - t0).total_seconds() / 3600.0,
                    "time": fix.time,
                    "track_km": float(great_circle_km(fix.lat, fix.lon, lat, lon)),
                    "mslp_hPa": abs(fix.mslp_hpa() - float(np.interp(t, rt, rp))),
                    "wind_ms": abs(fix.wind - float(np.interp(t, rt, rw)))})
    if not out:
        raise DataError("model and reference tracks do not overlap in time")
    return out


def composite_errors(runs: list[list[dict]]) -> list[dict]:
    """Mean error per lead time over several storms or initialisations."""
    by_lead: dict[float, list[dict]] = {}
    for run in runs:
        for row in run:
            by_lead.setdefault(row["lead_hours"], []).append(row)
    out = []
    for lead in sorted(by_lead):
        rows = by_lead[lead]
        out.append({"lead_hours": lead, "n": len(rows),
                    **{k: float(np.nanmean([r[k] for r in rows]))
                       for k in ("track_km", "mslp_hPa", "wind_ms")}})
    return out


TRACK_FIELDS = ["timestamp", "lat", "lon", "mslp_hPa", "wind_ms"]


def write_track_csv(track: list[TrackFix], path: str | os.PathLike):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_FIELDS)
        for f in track:
            w.writerow([f.time.isoformat(), f"{f.lat:.4f}", f"{f.lon:.4f}",
                        f"{f.mslp_hpa():.3f}", f"{f.wind:.3f}"])


def read_track_csv(path: str | os.PathLike) -> list[TrackFix]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRACK_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        return [TrackFix(r["timestamp"], float(r["lat"]), float(r["lon"]),
                         float(r["mslp_hPa"]), float(r["wind_ms"])) for r in reader]


def fixes_from_list(rows, mslp=float("nan"), wind=float("nan")) -> list[TrackFix]:
    """[iso time, lat, lon] rows (as stored by the synthetic generator) to fixes."""
    return [TrackFix(r[0], float(r[1]), float(r[2]), mslp, wind) for r in rows]


def step_times(start: datetime, n: int, hours: float) -> list[datetime]:
    return [start + timedelta(hours=hours * i) for i in range(n)]


# --------------------------------------------------------------------------
# spectra
# --------------------------------------------------------------------------

def zonal_power_spectrum(field_) -> np.ndarray:
    """One-sided power per zonal wavenumber 0..W/2, averaged over latitude rows.

    Normalised so the sum over wavenumbers equals the mean of the squared field.
    """
    x = np.asarray(field_, np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("field must be [H, W] with W >= 2")
    W = x.shape[1]
    power = np.abs(np.fft.rfft(x, axis=1) / W) ** 2
    power[:, 1:] *= 2.0
    if W % 2 == 0:
        power[:, -1] /= 2.0     # Nyquist appears once
    return power.mean(axis=0)


def spectral_distance(spectrum, reference, fraction: float = 1 / 3) -> float:
    """L2 distance in log power over the top ``fraction`` of wavenumbers (k >= 1)."""
    s = np.asarray(spectrum, np.float64)
    r = np.asarray(reference, np.float64)
    n = len(r)
    start = max(1, n - int(np.ceil(fraction * (n - 1))))
    tiny = 1e-30
    return float(np.sqrt(np.mean((np.log10(s[start:] + tiny) - np.log10(r[start:] + tiny)) ** 2)))
