"""Gridded states, static fields, the on-disk container and a synthetic reanalysis.

Container layout: a directory holding ``manifest.json`` plus one flat
little-endian float32 file per array (C-order). The manifest records the
shape and byte length of every payload so a reader can refuse truncated or
mismatched files.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .catalog import Grid, VariableCatalog
from .exceptions import DataError

logger = logging.getLogger(__name__)

FORMAT = "wxfm-container"
DTYPE = "float32le"
_LE_F32 = np.dtype("<f4")

DAYS_PER_YEAR = 365


# --------------------------------------------------------------------------
# calendar helpers
# --------------------------------------------------------------------------

def julian_day(ts: datetime) -> int:
    """Day of year in 1..365; day 366 of leap years aliases day 365."""
    return min(ts.timetuple().tm_yday, DAYS_PER_YEAR)


def hour_slot(ts: datetime, slots_per_day: int) -> int:
    step = 24 // slots_per_day
    if ts.hour % step or ts.minute or ts.second:
        raise DataError(f"{ts.isoformat()} is not aligned to {step}-hourly slots")
    return ts.hour // step


def climatology_row(ts: datetime, slots_per_day: int) -> int:
    return (julian_day(ts) - 1) * slots_per_day + hour_slot(ts, slots_per_day)


def time_encoding(ts: datetime) -> np.ndarray:
    """cos/sin of day of year and of hour of day, shape [4]."""
    day_angle = 2.0 * math.pi * (julian_day(ts) - 1) / DAYS_PER_YEAR
    hour = ts.hour + ts.minute / 60.0 + ts.second / 3600.0
    hour_angle = 2.0 * math.pi * hour / 24.0
    return np.array([math.cos(day_angle), math.sin(day_angle),
                     math.cos(hour_angle), math.sin(hour_angle)])


def parse_time(value: str | datetime) -> datetime:
    if isinstance(value, datetime):
        return value.replace(tzinfo=None)
    return datetime.fromisoformat(value).replace(tzinfo=None)


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GriddedState:
    values: np.ndarray  # [C, H, W]
    timestamp: datetime
    grid: Grid

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"state values must be [C, H, W], got {self.values.shape}")
        if self.values.shape[1:] != self.grid.shape:
            raise ValueError(f"state shape {self.values.shape[1:]} does not match "
                             f"grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"non-finite values in state at {self.timestamp.isoformat()}")


@dataclass(frozen=True)
class StaticFields:
    """Geophysical statics [S_geo, H, W] plus per-time cos/sin encodings."""

    fields: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.fields.ndim != 3:
            raise ValueError("static fields must be [S, H, W]")

    def time_encoding(self, ts: datetime) -> np.ndarray:
        enc = time_encoding(ts)
        return np.broadcast_to(enc[:, None, None], (4,) + self.fields.shape[1:])

    def stack(self, ts: datetime) -> np.ndarray:
        """[S_geo + 4, H, W] in the order statics then time encodings."""
        return np.concatenate([self.fields, self.time_encoding(ts)], axis=0)


@dataclass
class Dataset:
    """In-memory form of a dataset container."""

    catalog: VariableCatalog
    grid: Grid
    timestamps: list[datetime]
    values: np.ndarray  # [N, C, H, W] float32
    statics: StaticFields | None = None
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        n, c, h, w = self.values.shape
        if n != len(self.timestamps):
            raise DataError(f"{n} payloads but {len(self.timestamps)} timestamps")
        if c != self.catalog.n_channels:
            raise DataError(f"catalog has {self.catalog.n_channels} channels, data {c}")
        if (h, w) != self.grid.shape:
            raise DataError(f"data grid {(h, w)} does not match descriptor {self.grid.shape}")
        self._index = {ts: i for i, ts in enumerate(self.timestamps)}

    def __len__(self) -> int:
        return len(self.timestamps)

    def state(self, i: int) -> GriddedState:
        return GriddedState(self.values[i], self.timestamps[i], self.grid)

    def index_of(self, ts: datetime) -> int | None:
        return self._index.get(ts)

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.catalog, self.grid, self.timestamps[start:stop],
                       self.values[start:stop], self.statics, dict(self.attrs))

    @property
    def cadence_hours(self) -> float:
        if len(self) < 2:
            raise DataError("cadence undefined for fewer than two states")
        return (self.timestamps[1] - self.timestamps[0]).total_seconds() / 3600.0

    def check_finite(self) -> None:
        bad = ~np.isfinite(self.values)
        if bad.any():
            i, c = np.argwhere(bad.any(axis=(2, 3)))[0]
            raise DataError(f"NaN/Inf in channel {self.catalog.channel_names[c]!r} "
                            f"at {self.timestamps[i].isoformat()}")


# --------------------------------------------------------------------------
# container IO
# --------------------------------------------------------------------------

def write_container(path: str | os.PathLike, kind: str, arrays: dict[str, np.ndarray],
                    meta: dict | None = None) -> Path:
    """Write named arrays as flat little-endian float32 files plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=_LE_F32)
        fname = f"{name}.bin"
        (path / fname).write_bytes(data.tobytes(order="C"))
        entries.append({"name": name, "file": fname, "shape": list(data.shape),
                        "nbytes": int(data.nbytes)})
    manifest = {"format": FORMAT, "version": 1, "kind": kind, "dtype": DTYPE,
                "byte_order": "little", "arrays": entries}
    manifest.update(meta or {})
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no manifest.json in {path}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT or manifest.get("dtype") != DTYPE:
        raise DataError(f"{mpath}: not a {FORMAT} ({DTYPE}) manifest")
    return manifest


def read_container(path: str | os.PathLike, kind: str | None = None
                   ) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = read_manifest(path)
    if kind is not None and manifest["kind"] != kind:
        raise DataError(f"{path}: expected a {kind!r} container, found {manifest['kind']!r}")
    arrays = {}
    for entry in manifest["arrays"]:
        raw = (path / entry["file"]).read_bytes()
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if len(raw) != entry["nbytes"] or len(raw) != expected:
            raise DataError(f"{entry['file']}: {len(raw)} bytes, manifest says "
                            f"{entry['nbytes']} for shape {entry['shape']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=_LE_F32).reshape(entry["shape"]).astype(np.float32)
    return manifest, arrays


def save_dataset(ds: Dataset, path: str | os.PathLike) -> Path:
    arrays = {f"state_{i:06d}": ds.values[i] for i in range(len(ds))}
    meta = {
        "catalog": ds.catalog.to_dict(),
        "grid": ds.grid.to_dict(),
        "timestamps": [ts.isoformat() for ts in ds.timestamps],
        "state_shape": list(ds.values.shape[1:]),
        "attrs": ds.attrs,
    }
    if ds.statics is not None:
        arrays["statics"] = ds.statics.fields
        meta["static_names"] = list(ds.statics.names)
    return write_container(path, "dataset", arrays, meta)


def load_dataset(path: str | os.PathLike) -> Dataset:
    manifest, arrays = read_container(path, "dataset")
    timestamps = [parse_time(t) for t in manifest["timestamps"]]
    shape = tuple(manifest["state_shape"])
    if timestamps:
        values = np.stack([arrays[f"state_{i:06d}"] for i in range(len(timestamps))])
    else:
        values = np.zeros((0,) + shape, np.float32)
    if values.shape[1:] != shape:
        raise DataError(f"payload shape {values.shape[1:]} != manifest {shape}")
    statics = None
    if "statics" in arrays:
        statics = StaticFields(arrays["statics"], tuple(manifest.get("static_names", ())))
    ds = Dataset(VariableCatalog.from_dict(manifest["catalog"]),
                 Grid.from_dict(manifest["grid"]), timestamps, values, statics,
                 manifest.get("attrs", {}))
    ds.check_finite()
    return ds


# --------------------------------------------------------------------------
# synthetic reanalysis
# --------------------------------------------------------------------------

# (offset, scale) in physical units for variables the generator knows about
_PHYSICAL = {
    "U10M": (0.0, 5.0), "V10M": (0.0, 5.0), "T2M": (285.0, 10.0),
    "SLP": (101325.0, 1000.0), "PS": (98000.0, 1000.0), "TS": (287.0, 12.0),
    "T": (250.0, 8.0), "U": (8.0, 10.0), "V": (0.0, 8.0), "H": (5500.0, 100.0),
    "QV": (0.005, 0.002), "QL": (1e-5, 5e-6), "QI": (1e-5, 5e-6),
}


@dataclass(frozen=True)
class SynthSettings:
    noise: float = 0.2           # white-noise std, in channel scale units
    cycles: float = 1.0          # amplitude multiplier on annual + diurnal cycles
    modes: float = 1.0           # amplitude multiplier on static spatial modes
    anomaly: float = 1.0         # amplitude multiplier on the advecting anomaly
    advect_deg_per_hour: float = 1.25
    storm: bool = False
    storm_depth_pa: float = 3000.0
    storm_radius_km: float = 900.0
    storm_start: tuple[float, float] = (20.0, 300.0)
    storm_velocity: tuple[float, float] = (0.5, -1.25)   # deg / hour (lat, lon)
    storm_max_wind: float = 30.0


def make_statics(seed: int, grid: Grid, names=("PHIS", "FRLAND", "FROCEAN", "FRACI")
                 ) -> StaticFields:
    rng = np.random.default_rng([seed, 7])
    lat, lon = grid.mesh()
    lat_r, lon_r = np.deg2rad(lat), np.deg2rad(lon)
    elev = np.zeros_like(lat)
    for _ in range(6):
        k, l = rng.integers(1, 5), rng.integers(1, 4)
        elev += rng.normal() * np.cos(k * lon_r + rng.uniform(0, 2 * np.pi)) * np.cos(l * lat_r)
    land = 1.0 / (1.0 + np.exp(-3.0 * elev))
    elev = np.maximum(elev, 0.0)        # km above sea level
    ice = np.clip((np.abs(lat) - 60.0) / 20.0, 0.0, 1.0)
    fields = np.stack([elev, land, 1.0 - land, ice])[: len(names)]
    return StaticFields(fields.astype(np.float32), tuple(names))


def _timestamps(start: datetime, n_years: int, cadence_hours: float,
                n_steps: int | None) -> list[datetime]:
    step = timedelta(hours=cadence_hours)
    if n_steps is None:
        end = start.replace(year=start.year + n_years)
        n_steps = int((end - start) / step)
    return [start + i * step for i in range(n_steps)]


def generate_synthetic(seed: int, catalog: VariableCatalog, grid: Grid, n_years: int = 1,
                       cadence_hours: float = 3.0, *, n_steps: int | None = None,
                       start: datetime = datetime(2001, 1, 1),
                       settings: SynthSettings = SynthSettings()) -> Dataset:
    """Seeded synthetic reanalysis.

    Each channel is offset + scale * (spatial modes + annual/diurnal cycle +
    advecting anomaly + noise). The cycles are functions of the climatology
    slot (julian day, hour) so a built climatology can be checked against them
    analytically. With ``settings.storm`` a moving Gaussian low is added to SLP
    (and a vortex to U10M); its true centres go to ``attrs["storm_track"]``.
    """
    rng = np.random.default_rng(seed)
    timestamps = _timestamps(start, n_years, cadence_hours, n_steps)
    C = catalog.n_channels
    lat, lon = grid.mesh()
    lat_r, lon_r = np.deg2rad(lat), np.deg2rad(lon)
    names = catalog.channel_info()

    offset = np.empty(C)
    scale = np.empty(C)
    for c, (var, level) in enumerate(names):
        off, sc = _PHYSICAL.get(var, (0.0, 1.0))
        if level is not None:
            off = off * (1.0 + 0.1 * math.log(level / 500.0))
        offset[c], scale[c] = off, sc

    # static spatial modes, periodic in longitude
    mode_field = np.zeros((C,) + grid.shape)
    for c in range(C):
        for _ in range(3):
            k, l = rng.integers(0, 4), rng.integers(1, 4)
            mode_field[c] += rng.normal(0, 0.5) * np.cos(k * lon_r + rng.uniform(0, 2 * np.pi)) \
                * np.cos(l * lat_r)
    mode_field *= settings.modes

    ann_phase = rng.uniform(0, 2 * np.pi, C)
    diu_phase = rng.uniform(0, 2 * np.pi, C)
    ann_amp = settings.cycles * rng.uniform(0.5, 1.0, C)
    diu_amp = settings.cycles * rng.uniform(0.2, 0.5, C)

    # advecting anomaly: shared zonal modes drifting east, channel-specific gain
    n_modes = 4
    wavenum = rng.integers(1, 4, n_modes)
    merid = rng.integers(1, 3, n_modes)
    mode_phase = rng.uniform(0, 2 * np.pi, n_modes)
    mode_amp = rng.uniform(0.5, 1.0, n_modes)
    mode_speed = np.deg2rad(settings.advect_deg_per_hour) * rng.uniform(0.7, 1.3, n_modes)
    slow_freq = 2 * np.pi / (24.0 * rng.uniform(8.0, 30.0, n_modes))
    slow_phase = rng.uniform(0, 2 * np.pi, n_modes)
    gain = settings.anomaly * rng.uniform(0.6, 1.2, C) * rng.choice([-1.0, 1.0], C)
    chan_shift = rng.uniform(-0.3, 0.3, C)

    slp = catalog.channel_index("SLP") if "SLP" in catalog.channel_names else None
    u10 = catalog.channel_index("U10M") if "U10M" in catalog.channel_names else None
    track = []
    values = np.empty((len(timestamps), C) + grid.shape, np.float32)
    t0 = timestamps[0] if timestamps else start
    for i, ts in enumerate(timestamps):
        hours = (ts - t0).total_seconds() / 3600.0
        day_angle = 2 * np.pi * (julian_day(ts) - 1) / DAYS_PER_YEAR
        hour_angle = 2 * np.pi * ts.hour / 24.0
        anomaly = np.zeros(grid.shape)
        for m in range(n_modes):
            env = mode_amp[m] * math.cos(slow_freq[m] * hours + slow_phase[m])
            anomaly += env * np.cos(wavenum[m] * (lon_r - mode_speed[m] * hours)
                                    + merid[m] * lat_r + mode_phase[m]) * np.cos(lat_r)
        field_ = mode_field.copy()
        field_ += (ann_amp * np.cos(day_angle - ann_phase))[:, None, None] * np.sin(lat_r)
        field_ += diu_amp[:, None, None] * np.cos(hour_angle + lon_r[None] - diu_phase[:, None, None]) \
            * np.cos(lat_r)
        field_ += gain[:, None, None] * anomaly[None] * (1 + chan_shift[:, None, None] * np.sin(lat_r))
        if settings.noise:
            field_ += settings.noise * rng.standard_normal(field_.shape)
        phys = offset[:, None, None] + scale[:, None, None] * field_
        if settings.storm and slp is not None:
            clat = settings.storm_start[0] + settings.storm_velocity[0] * hours
            clon = (settings.storm_start[1] + settings.storm_velocity[1] * hours) % 360.0
            dist = _haversine_km(lat, lon, clat, clon)
            r = dist / settings.storm_radius_km
            phys[slp] -= settings.storm_depth_pa * np.exp(-0.5 * r ** 2)
            if u10 is not None:
                # tangential wind peaking at one radius, zonal component only
                north = _haversine_km(lat, clon, clat, clon) * np.sign(lat - clat)
                vt = settings.storm_max_wind * r * np.exp(1.0 - r)
                phys[u10] += -vt * np.divide(north, dist, out=np.zeros_like(dist), where=dist > 0)
            track.append([ts.isoformat(), clat, (clon + 180.0) % 360.0 - 180.0])
        values[i] = phys
    attrs = {"seed": seed, "generator": "synthetic", "cadence_hours": cadence_hours,
             "offset": offset.tolist(), "scale": scale.tolist(),
             "annual_amp": ann_amp.tolist(), "annual_phase": ann_phase.tolist(),
             "diurnal_amp": diu_amp.tolist(), "diurnal_phase": diu_phase.tolist()}
    if settings.storm:
        attrs["storm_track"] = track
    ds = Dataset(catalog, grid, timestamps, values,
                 make_statics(seed, grid, catalog.static_vars), attrs)
    ds.check_finite()
    return ds


def _haversine_km(lat1, lon1, lat2, lon2):
    # local copy to keep data independent of evaluation
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dphi = p2 - p1
    dlam = np.deg2rad(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2 * 6371.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
