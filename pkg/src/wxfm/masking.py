"""Local (tokens within each window) and global (whole windows) masking.

Masked tokens are dropped before the encoder, MAE style: ``gather`` packs
the kept tokens into a smaller rectangular tensor and ``scatter`` restores
the dense layout for the decoder, filling the gaps with a mask token.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .exceptions import ConfigError


class Strategy(str, Enum):
    LOCAL = "local"
    GLOBAL = "global"


@dataclass(frozen=True)
class MaskSpec:
    strategy: Strategy
    ratio: float

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"mask ratio must lie in [0, 1), got {self.ratio}")


def n_masked(ratio: float, n: int) -> int:
    """ceil(ratio * n), but always leaving at least one element."""
    # the epsilon keeps e.g. 0.95 * 240 from rounding up past 228
    return min(math.ceil(ratio * n - 1e-9), n - 1)


@dataclass(frozen=True, eq=False)
class MaskIndex:
    strategy: Strategy
    n_windows: int
    tokens_per_window: int
    kept: np.ndarray   # local: [n_windows, k]; global: [k]

    @property
    def is_identity(self) -> bool:
        if self.strategy is Strategy.LOCAL:
            return self.kept.shape[1] == self.tokens_per_window
        return self.kept.size == self.n_windows

    @property
    def n_kept(self) -> int:
        return self.kept.shape[-1]

    @property
    def packed_shape(self) -> tuple[int, int]:
        if self.strategy is Strategy.LOCAL:
            return (self.n_windows, self.n_kept)
        return (self.n_kept, self.tokens_per_window)

    def visible(self) -> np.ndarray:
        """Boolean [n_windows, tokens_per_window], True where a token is kept."""
        vis = np.zeros((self.n_windows, self.tokens_per_window), bool)
        if self.strategy is Strategy.LOCAL:
            np.put_along_axis(vis, self.kept, True, axis=1)
        else:
            vis[self.kept] = True
        return vis

    def __eq__(self, other):
        if not isinstance(other, MaskIndex):
            return NotImplemented
        return (self.strategy == other.strategy and self.n_windows == other.n_windows
                and self.tokens_per_window == other.tokens_per_window
                and np.array_equal(self.kept, other.kept))

    def to_json(self) -> str:
        return json.dumps({"strategy": self.strategy.value, "n_windows": self.n_windows,
                           "tokens_per_window": self.tokens_per_window,
                           "kept": self.kept.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "MaskIndex":
        d = json.loads(text)
        return cls(Strategy(d["strategy"]), d["n_windows"], d["tokens_per_window"],
                   np.asarray(d["kept"], dtype=np.int64))


def identity_mask(n_windows: int, tokens_per_window: int) -> MaskIndex:
    kept = np.broadcast_to(np.arange(tokens_per_window), (n_windows, tokens_per_window)).copy()
    return MaskIndex(Strategy.LOCAL, n_windows, tokens_per_window, kept)


def sample_mask(seed, spec: MaskSpec, n_windows: int, tokens_per_window: int) -> MaskIndex:
    if n_windows < 1 or tokens_per_window < 1:
        raise ConfigError("n_windows and tokens_per_window must be positive")
    rng = np.random.default_rng(seed)
    if spec.strategy is Strategy.LOCAL:
        k = tokens_per_window - n_masked(spec.ratio, tokens_per_window)
        order = rng.random((n_windows, tokens_per_window)).argsort(axis=1)
        kept = np.sort(order[:, :k], axis=1)
    else:
        k = n_windows - n_masked(spec.ratio, n_windows)
        kept = np.sort(rng.permutation(n_windows)[:k])
    return MaskIndex(spec.strategy, n_windows, tokens_per_window, kept.astype(np.int64))


def _check(x: torch.Tensor, idx: MaskIndex, dense: bool):
    if x.ndim != 4:
        raise ValueError(f"expected [B, W, T, D], got {tuple(x.shape)}")
    expected = (idx.n_windows, idx.tokens_per_window) if dense else idx.packed_shape
    if tuple(x.shape[1:3]) != expected:
        raise ValueError(f"token tensor {tuple(x.shape)} does not match mask {expected}")


def gather(tokens: torch.Tensor, idx: MaskIndex) -> torch.Tensor:
    _check(tokens, idx, dense=True)
    if idx.is_identity:
        return tokens
    kept = torch.as_tensor(idx.kept, device=tokens.device)
    if idx.strategy is Strategy.LOCAL:
        B, W, _, D = tokens.shape
        index = kept[None, :, :, None].expand(B, W, idx.n_kept, D)
        return torch.gather(tokens, 2, index)
    return tokens[:, kept]


def scatter(packed: torch.Tensor, idx: MaskIndex, mask_token: torch.Tensor) -> torch.Tensor:
    _check(packed, idx, dense=False)
    if idx.is_identity:
        return packed
    B, _, _, D = packed.shape
    dense = mask_token.to(packed.dtype).expand(B, idx.n_windows, idx.tokens_per_window, D)
    kept = torch.as_tensor(idx.kept, device=packed.device)
    if idx.strategy is Strategy.LOCAL:
        index = kept[None, :, :, None].expand(B, idx.n_windows, idx.n_kept, D)
        return dense.scatter(2, index, packed)
    index = kept[None, :, None, None].expand(B, idx.n_kept, idx.tokens_per_window, D)
    return dense.scatter(1, index, packed)
