"""Tokenisation, position encoding and the window/grid attention blocks.

Token tensors use the layout [B, windows, tokens, features]. Local attention
runs over the token axis with windows folded into the batch; global attention
transposes windows and tokens first, so the n-th token of every window
attends to the n-th token of all other windows.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import GLOBAL, LOCAL


# --------------------------------------------------------------------------
# layout transforms
# --------------------------------------------------------------------------

def patchify(x: torch.Tensor, token_size, window_tokens) -> torch.Tensor:
    """[B, C, H, W] -> [B, n_windows, tokens_per_window, C * ph * pw].

    Windows are numbered row-major over the window grid, tokens row-major
    within a window, and features ordered (channel, patch row, patch col).
    """
    B, C, H, W = x.shape
    ph, pw = token_size
    th, tw = window_tokens
    wh, ww = ph * th, pw * tw
    if H % wh or W % ww:
        raise ValueError(f"field {H}x{W} not divisible by window {wh}x{ww} px")
    nr, nc = H // wh, W // ww
    x = x.reshape(B, C, nr, th, ph, nc, tw, pw)
    x = x.permute(0, 2, 5, 3, 6, 1, 4, 7)
    return x.reshape(B, nr * nc, th * tw, C * ph * pw)


def unpatchify(tokens: torch.Tensor, token_size, window_tokens, grid_shape) -> torch.Tensor:
    B, nW, T, F_ = tokens.shape
    ph, pw = token_size
    th, tw = window_tokens
    H, W = grid_shape
    nr, nc = H // (ph * th), W // (pw * tw)
    C = F_ // (ph * pw)
    if nr * nc != nW or th * tw != T or C * ph * pw != F_:
        raise ValueError(f"tokens {tuple(tokens.shape)} incompatible with grid {grid_shape}")
    x = tokens.reshape(B, nr, nc, th, tw, C, ph, pw)
    x = x.permute(0, 5, 1, 3, 6, 2, 4, 7)
    return x.reshape(B, C, H, W)


def to_grid(tokens: torch.Tensor, window_grid, window_tokens) -> torch.Tensor:
    """[B, nW, T, D] -> [B, Ht, Wt, D]."""
    B, _, _, D = tokens.shape
    nr, nc = window_grid
    th, tw = window_tokens
    x = tokens.reshape(B, nr, nc, th, tw, D).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, nr * th, nc * tw, D)


def to_windows(grid: torch.Tensor, window_tokens) -> torch.Tensor:
    """[B, Ht, Wt, D] -> [B, nW, T, D]."""
    B, Ht, Wt, D = grid.shape
    th, tw = window_tokens
    nr, nc = Ht // th, Wt // tw
    x = grid.reshape(B, nr, th, nc, tw, D).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, nr * nc, th * tw, D)


def swin_shift(tokens: torch.Tensor, window_grid, window_tokens, shift) -> torch.Tensor:
    """Cyclically roll the token grid by ``shift`` tokens (lat, lon) and re-window."""
    if shift == (0, 0):
        return tokens
    g = to_grid(tokens, window_grid, window_tokens)
    g = torch.roll(g, shifts=(-shift[0], -shift[1]), dims=(1, 2))
    return to_windows(g, window_tokens)


def swin_unshift(tokens: torch.Tensor, window_grid, window_tokens, shift) -> torch.Tensor:
    return swin_shift(tokens, window_grid, window_tokens, (-shift[0], -shift[1]))


# --------------------------------------------------------------------------
# encodings
# --------------------------------------------------------------------------

def fourier_features(lat_deg: np.ndarray, lon_deg: np.ndarray, dim: int,
                     harmonics: int) -> np.ndarray:
    """sin/cos of integer harmonics of longitude and latitude, zero-padded to ``dim``.

    Integer harmonics make the longitude part exactly 360-degree periodic.
    """
    lat = np.deg2rad(np.asarray(lat_deg, np.float64)).reshape(-1, 1)
    lon = np.deg2rad(np.mod(np.asarray(lon_deg, np.float64), 360.0)).reshape(-1, 1)
    k = np.arange(1, harmonics + 1, dtype=np.float64)[None]
    feats = np.concatenate([np.sin(k * lon), np.cos(k * lon),
                            np.sin(k * lat), np.cos(k * lat)], axis=1)
    out = np.zeros((feats.shape[0], dim))
    out[:, : feats.shape[1]] = feats
    return out


def token_centres(lat: np.ndarray, lon: np.ndarray, token_size) -> tuple[np.ndarray, np.ndarray]:
    """Mean pixel-centre coordinates per token, each shaped [Ht, Wt]."""
    ph, pw = token_size
    lat_t = np.asarray(lat, np.float64).reshape(-1, ph).mean(axis=1)
    lon_t = np.asarray(lon, np.float64).reshape(-1, pw).mean(axis=1)
    return np.meshgrid(lat_t, lon_t, indexing="ij")


def fourier_position_encoding(lat: np.ndarray, lon: np.ndarray, token_size, window_tokens,
                              dim: int, harmonics: int) -> torch.Tensor:
    """Static encoding laid out as [n_windows, tokens_per_window, dim]."""
    lat_t, lon_t = token_centres(lat, lon, token_size)
    enc = fourier_features(lat_t.ravel(), lon_t.ravel(), dim, harmonics)
    enc = torch.from_numpy(enc.reshape(lat_t.shape + (dim,)))
    return to_windows(enc[None], window_tokens)[0]


# --------------------------------------------------------------------------
# transformer pieces
# --------------------------------------------------------------------------

class DropPath(nn.Module):
    """Per-sample stochastic depth on a residual branch."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        return x * x.new_empty(shape).bernoulli_(keep) / keep


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.record = False
        self.last_weights: torch.Tensor | None = None

    def forward(self, x):
        N, L, D = x.shape
        qkv = self.qkv(x).reshape(N, L, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)
        attn = attn.softmax(dim=-1)
        if self.record:
            self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(N, L, D)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP over the token axis of [B, W, T, D].

    ``kind="L"`` attends within windows, ``kind="G"`` across windows.
    """

    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0, drop_path: float = 0.0,
                 kind: str = LOCAL):
        super().__init__()
        if kind not in (LOCAL, GLOBAL):
            raise ValueError(f"unknown block kind {kind!r}")
        self.kind = kind
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.drop_path = DropPath(drop_path)

    def _attend(self, x):
        # drop path acts per sample, so branches are reshaped back to [B, W, T, D]
        B, W, T, D = x.shape
        branch = self.attn(self.norm1(x.reshape(B * W, T, D))).reshape(B, W, T, D)
        x = x + self.drop_path(branch)
        branch = self.mlp(self.norm2(x))
        return x + self.drop_path(branch)

    def forward(self, x):
        if self.kind == GLOBAL:
            return self._attend(x.transpose(1, 2)).transpose(1, 2)
        return self._attend(x)


class Stage(nn.Module):
    """A run of alternating local/global blocks.

    With ``shift`` set, every second local block sees the token grid rolled by
    half a window, so window borders move between consecutive local blocks.
    """

    def __init__(self, pattern: list[str], dim: int, n_heads: int, mlp_ratio: float,
                 drop_path_rates: list[float]):
        super().__init__()
        self.pattern = list(pattern)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, n_heads, mlp_ratio, dp, kind)
            for kind, dp in zip(pattern, drop_path_rates))
        n_local = 0
        self.shifted = []
        for kind in pattern:
            self.shifted.append(kind == LOCAL and n_local % 2 == 1)
            n_local += kind == LOCAL

    def forward(self, x, layout=None, shift=(0, 0)):
        """``layout`` is (window_grid, window_tokens); required when shifting."""
        for block, shifted in zip(self.blocks, self.shifted):
            if shifted and shift != (0, 0):
                wg, wt = layout
                x = swin_unshift(block(swin_shift(x, wg, wt, shift)), wg, wt, shift)
            else:
                x = block(x)
        return x


def init_weights(module: nn.Module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, std=0.02)
