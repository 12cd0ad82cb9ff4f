"""Variable catalogs and lat/lon grid descriptors.

Channel order is fixed by the catalog: surface variables first, then each
vertical variable at every level (level index varies fastest).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError

MERRA_SURFACE = (
    "U10M", "V10M", "T2M", "QV2M", "PS", "SLP", "TS", "TQI", "TQL", "TQV",
    "GWETROOT", "LAI", "EFLUX", "HFLUX", "Z0M", "LWGEM", "LWGAB", "LWTUP",
    "SWGNT", "SWTNT",
)
MERRA_VERTICAL = ("U", "V", "OMEGA", "T", "QV", "PL", "H", "CLOUD", "QI", "QL")
MERRA_LEVELS = (985.0, 970.0, 925.0, 850.0, 700.0, 600.0, 525.0, 412.0, 288.0,
                245.0, 208.0, 150.0, 109.0, 48.0)
MERRA_STATIC = ("PHIS", "FRLAND", "FROCEAN", "FRACI")

CORDEX_SURFACE = ("psl", "tas", "uas", "vas")
CORDEX_VERTICAL = ("hus", "ta", "ua", "va", "zg")
CORDEX_LEVELS = (850.0, 700.0, 500.0)

# number of time-encoding channels appended to the geophysical statics
N_TIME_ENCODINGS = 4


@dataclass(frozen=True)
class VariableCatalog:
    surface_vars: tuple[str, ...]
    vertical_vars: tuple[str, ...] = ()
    levels: tuple[float, ...] = ()
    static_vars: tuple[str, ...] = MERRA_STATIC

    def __post_init__(self):
        object.__setattr__(self, "surface_vars", tuple(self.surface_vars))
        object.__setattr__(self, "vertical_vars", tuple(self.vertical_vars))
        object.__setattr__(self, "levels", tuple(float(p) for p in self.levels))
        object.__setattr__(self, "static_vars", tuple(self.static_vars))
        if self.vertical_vars and not self.levels:
            raise ConfigError("vertical variables need at least one level")
        if any(b >= a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigError(f"levels must be strictly decreasing, got {self.levels}")
        names = self.channel_names
        if len(set(names)) != len(names):
            raise ConfigError("duplicate channel names in catalog")

    @property
    def n_channels(self) -> int:
        return len(self.surface_vars) + len(self.vertical_vars) * len(self.levels)

    @property
    def n_static(self) -> int:
        """Geophysical statics plus the four time encodings."""
        return len(self.static_vars) + N_TIME_ENCODINGS

    @property
    def channel_names(self) -> list[str]:
        names = list(self.surface_vars)
        for var in self.vertical_vars:
            names.extend(f"{var}{level:g}" for level in self.levels)
        return names

    def channel_index(self, name: str) -> int:
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise KeyError(f"unknown channel {name!r}") from None

    def channel_info(self) -> list[tuple[str, float | None]]:
        """(variable, level) per channel; level is None for surface variables."""
        info: list[tuple[str, float | None]] = [(v, None) for v in self.surface_vars]
        for var in self.vertical_vars:
            info.extend((var, level) for level in self.levels)
        return info

    def to_dict(self) -> dict:
        return {
            "surface_vars": list(self.surface_vars),
            "vertical_vars": list(self.vertical_vars),
            "levels": list(self.levels),
            "static_vars": list(self.static_vars),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariableCatalog":
        return cls(**d)


def merra_catalog() -> VariableCatalog:
    return VariableCatalog(MERRA_SURFACE, MERRA_VERTICAL, MERRA_LEVELS, MERRA_STATIC)


def desk_catalog() -> VariableCatalog:
    """Three surface variables and two vertical variables on three levels."""
    return VariableCatalog(("U10M", "T2M", "SLP"), ("T", "U"), (850.0, 500.0, 250.0),
                           MERRA_STATIC)


def cordex_catalog() -> VariableCatalog:
    return VariableCatalog(CORDEX_SURFACE, CORDEX_VERTICAL, CORDEX_LEVELS,
                           ("orog", "sftlf", "sftof", "sftgif"))


CATALOGS = {"merra": merra_catalog, "desk": desk_catalog, "cordex": cordex_catalog}


def get_catalog(name: str) -> VariableCatalog:
    try:
        return CATALOGS[name]()
    except KeyError:
        raise ConfigError(f"unknown catalog preset {name!r}") from None


@dataclass(frozen=True, eq=False)
class Grid:
    """Cell-centre latitudes (south to north) and longitudes in degrees."""

    lat: np.ndarray
    lon: np.ndarray
    periodic: bool = True

    def __post_init__(self):
        lat = np.asarray(self.lat, dtype=np.float64)
        lon = np.asarray(self.lon, dtype=np.float64)
        if lat.ndim != 1 or lon.ndim != 1:
            raise ValueError("grid axes must be 1-D")
        if np.any(np.abs(lat) > 90.0):
            raise ValueError("latitudes must lie in [-90, 90]")
        lat.setflags(write=False)
        lon.setflags(write=False)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)

    @classmethod
    def regular(cls, n_lat: int, n_lon: int) -> "Grid":
        """Global grid with cell centres offset half a cell from the poles."""
        dlat = 180.0 / n_lat
        lat = -90.0 + dlat * (np.arange(n_lat) + 0.5)
        lon = np.arange(n_lon) * (360.0 / n_lon)
        return cls(lat, lon)

    @classmethod
    def regional(cls, lat0: float, lon0: float, n_lat: int, n_lon: int,
                 spacing: float) -> "Grid":
        lat = lat0 + spacing * np.arange(n_lat)
        lon = lon0 + spacing * np.arange(n_lon)
        return cls(lat, lon, periodic=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.lat.size, self.lon.size)

    @property
    def dlat(self) -> float:
        return float(abs(self.lat[1] - self.lat[0])) if self.lat.size > 1 else 180.0

    @property
    def dlon(self) -> float:
        return float(abs(self.lon[1] - self.lon[0])) if self.lon.size > 1 else 360.0

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.lat, self.lon, indexing="ij")

    def trim_lat(self, n: int) -> "Grid":
        return Grid(self.lat[:n], self.lon, self.periodic)

    def to_dict(self) -> dict:
        return {"lat": self.lat.tolist(), "lon": self.lon.tolist(),
                "periodic": self.periodic}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(np.asarray(d["lat"]), np.asarray(d["lon"]), d.get("periodic", True))

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (self.periodic == other.periodic
                and np.array_equal(self.lat, other.lat)
                and np.array_equal(self.lon, other.lon))

    def __hash__(self):
        return hash((self.lat.tobytes(), self.lon.tobytes(), self.periodic))
