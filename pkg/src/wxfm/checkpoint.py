"""Model checkpoints in the container format: config manifest + named float32 arrays."""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .catalog import Grid
from .data import read_container, read_manifest, write_container
from .exceptions import DataError
from .model.config import ModelConfig
from .model.core import WxCModel


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in module.state_dict().items()}


def content_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())
    return h.hexdigest()


def save_module(module: nn.Module, path: str | os.PathLike, kind: str, meta: dict) -> str:
    arrays = state_arrays(module)
    digest = content_hash(arrays)
    write_container(path, kind, arrays, {**meta, "content_hash": digest})
    return digest


def load_state(module: nn.Module, arrays: dict[str, np.ndarray]):
    ref = module.state_dict()
    missing = set(ref) - set(arrays)
    if missing:
        raise DataError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    state = {k: torch.from_numpy(arrays[k]).to(ref[k].dtype) for k in ref}
    module.load_state_dict(state)
    return module


def save_checkpoint(model: WxCModel, path: str | os.PathLike, extra: dict | None = None) -> str:
    """Write a core checkpoint; returns its content hash."""
    meta = {"model_config": model.cfg.to_dict(), "grid": model.grid.to_dict(),
            "extra": extra or {}}
    return save_module(model, path, "checkpoint", meta)


def load_checkpoint(path: str | os.PathLike, **config_changes) -> WxCModel:
    manifest, arrays = read_container(path, "checkpoint")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    if config_changes:
        cfg = cfg.replace(**config_changes)
    model = WxCModel(cfg, Grid.from_dict(manifest["grid"]))
    load_state(model, arrays)
    if content_hash(arrays) != manifest["content_hash"]:
        raise DataError(f"{path}: content hash mismatch")
    return model


def checkpoint_hash(path: str | os.PathLike) -> str:
    return read_manifest(Path(path))["content_hash"]
