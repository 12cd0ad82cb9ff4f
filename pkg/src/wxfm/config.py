"""Run configuration: a JSON document with data/model/training/finetune/eval sections.

Every key has a default; user documents are merged over the defaults and any
key outside the schema is rejected with its dotted path.
"""
from __future__ import annotations

import copy
import json
import os
from importlib import resources
from pathlib import Path

from .exceptions import ConfigError
from .heads import DownscaleConfig, GWHeadConfig, get_head_preset
from .masking import Strategy
from .model.config import ModelConfig, desk_config
from .training import TrainPhaseConfig

_PHASE1 = TrainPhaseConfig.phase1().to_dict()
_PHASE2 = TrainPhaseConfig.phase2().to_dict()

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "catalog": "desk",
        "grid": [24, 48],
        "n_years": 1,
        "cadence_hours": 3.0,
        "n_steps": None,
        "start": "2001-01-01T00:00:00",
        "noise": 0.2,
        "cycles": 1.0,
        "modes": 1.0,
        "anomaly": 1.0,
        "advect_deg_per_hour": 1.25,
        "storm": False,
        "climatology_window_days": 61,
        "holdout_fraction": 0.2,
    },
    "model": desk_config().to_dict(),
    "training": {
        "pretrain_steps": 1500,
        "rollout_tune_steps": 200,
        "checkpoint_every": 0,
        "log_every": 100,
        "phase1": _PHASE1,
        "phase2": _PHASE2,
    },
    "finetune": {
        "downscale": {
            "preset": "merra6x",
            "grid": [72, 144],
            "n_samples": 48,
            "n_train": 40,
            "steps": 400,
            "batch_size": 4,
            "lr": 1e-3,
            "noise": 0.05,
            "features": 32,
        },
        "gw": {
            "base_channels": 16,
            "n_levels": 4,
            "grid": [16, 32],
            "n_samples": 272,
            "n_test": 16,
            "steps": 2000,
            "batch_size": 4,
            "lr": 2e-3,
            "noise": 0.1,
        },
    },
    "eval": {
        "ratios": [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
        "strategies": ["local", "global"],
        "lead_times": [0, 6],
        "n_draws": 4,
        "n_anchors": 48,
        "max_lead_hours": 24,
        "step_hours": 6,
        "search_radius_km": 450.0,
        "track_step_hours": 3,
        "spectra_variable": "T2M",
    },
}

def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


class RunConfig:
    """Resolved configuration with typed accessors."""

    def __init__(self, doc: dict | None = None):
        self.doc = _merge(DEFAULTS, doc or {})
        self._validate()

    # ------------------------------------------------------------ loading
    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            p = _preset_path(str(path))
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(doc)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        doc = copy.deepcopy(self.doc)
        doc["seed"] = int(seed)
        return RunConfig(doc)

    def save(self, path: str | os.PathLike):
        Path(path).write_text(json.dumps(self.doc, indent=2, sort_keys=True))

    # ------------------------------------------------------------ accessors
    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def data(self) -> dict:
        return self.doc["data"]

    @property
    def training(self) -> dict:
        return self.doc["training"]

    @property
    def finetune(self) -> dict:
        return self.doc["finetune"]

    @property
    def eval(self) -> dict:
        return self.doc["eval"]

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.doc["model"])

    def phase(self, n: int) -> TrainPhaseConfig:
        return TrainPhaseConfig.from_dict(self.training[f"phase{n}"])

    def downscale_config(self) -> DownscaleConfig:
        d = self.finetune["downscale"]
        return get_head_preset(d["preset"], features=d["features"])

    def gw_config(self) -> GWHeadConfig:
        d = self.finetune["gw"]
        return GWHeadConfig(base_channels=d["base_channels"], n_levels=d["n_levels"],
                            grid_shape=tuple(d["grid"]))

    # ------------------------------------------------------------ validation
    def _validate(self):
        for name in ("seed",):
            if not isinstance(self.doc[name], int):
                raise ConfigError(f"config key '{name}' must be an integer")
        _check_types(DEFAULTS, self.doc)
        try:
            self.model_config()
            self.phase(1)
            self.phase(2)
            self.downscale_config()
            self.gw_config()
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None
        if not 0.0 <= self.data["holdout_fraction"] < 1.0:
            raise ConfigError("data.holdout_fraction must lie in [0, 1)")
        for s in self.eval["strategies"]:
            try:
                Strategy(s)
            except ValueError:
                raise ConfigError(f"eval.strategies: unknown strategy {s!r}") from None
        for r in self.eval["ratios"]:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"eval.ratios: {r} outside [0, 1)")
        ds = self.finetune["downscale"]
        if ds["n_train"] >= ds["n_samples"]:
            raise ConfigError("finetune.downscale.n_train must be below n_samples")
        gw = self.finetune["gw"]
        if not 0 < gw["n_test"] < gw["n_samples"]:
            raise ConfigError("finetune.gw.n_test must lie between 0 and n_samples")


def _check_types(default, value, path=""):
    """Numbers where defaults are numbers, lists where lists, and so on."""
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"config key '{path}' must be an object")
        for k in default:
            _check_types(default[k], value[k], f"{path}.{k}" if path else k)
        return
    if default is None:
        return
    if value is None:
        raise ConfigError(f"config key '{path}' must not be null")
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key '{path}' has the wrong type ({type(value).__name__})")


def _preset_path(name: str) -> Path:
    stem = name[:-5] if name.endswith(".json") else name
    ref = resources.files("wxfm") / "presets" / f"{stem}.json"
    if not ref.is_file():
        raise ConfigError(f"config file or preset not found: {name}")
    return Path(str(ref))


def preset(name: str) -> RunConfig:
    return RunConfig.load(_preset_path(name))
