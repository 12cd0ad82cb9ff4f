"""Fine-tuning heads around a frozen core: downscaling and gravity-wave flux.

Both heads reuse only the core's encoder and decoder stages (plus its frozen
lead-time embedding); embeddings, convolutions and outputs are fresh.
"""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .catalog import Grid
from .checkpoint import content_hash, load_state, save_module, state_arrays
from .data import read_container
from .exceptions import ConfigError, DataError
from .model.core import WxCModel
from .model.layers import fourier_position_encoding, patchify, unpatchify


class FrozenCoreError(RuntimeError):
    """A core parameter received a gradient or changed during fine-tuning."""


# --------------------------------------------------------------------------
# coarsening and interpolation baselines
# --------------------------------------------------------------------------

def _trim(field_: np.ndarray, factor: int) -> np.ndarray:
    H, W = field_.shape[-2:]
    if H % factor and (H - 1) % factor == 0:
        field_ = field_[..., : H - 1, :]     # e.g. 361 rows -> 360
    H = field_.shape[-2]
    if H % factor or W % factor:
        raise ValueError(f"field {H}x{W} not divisible by coarsening factor {factor}")
    return field_


def coarsen(field_: np.ndarray, factor: int) -> np.ndarray:
    """Block mean over factor x factor pixels on the last two axes.

    One trailing latitude row is dropped when that makes the height divisible.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    x = _trim(np.asarray(field_), factor)
    H, W = x.shape[-2:]
    x = x.reshape(x.shape[:-2] + (H // factor, factor, W // factor, factor))
    return x.mean(axis=(-3, -1))


def smooth(field_: np.ndarray, size: int = 3, periodic: bool = True) -> np.ndarray:
    """Uniform size x size average: edge replication in latitude, wrap in longitude."""
    x = np.asarray(field_, dtype=np.float64)
    modes = ["nearest"] * x.ndim
    if periodic:
        modes[-1] = "wrap"
    sizes = [1] * (x.ndim - 2) + [size, size]
    return ndimage.uniform_filter(x, size=sizes, mode=modes)


def coarsen_smooth(field_: np.ndarray, factor: int, size: int = 3,
                   periodic: bool = True) -> np.ndarray:
    return smooth(coarsen(field_, factor), size, periodic)


def _pad_grid(x: torch.Tensor, pad: int, periodic: bool) -> torch.Tensor:
    """Pad [B, C, H, W]: replicate in latitude, circular or replicate in longitude."""
    if pad == 0:
        return x
    x = F.pad(x, (0, 0, pad, pad), mode="replicate")
    return F.pad(x, (pad, pad, 0, 0), mode="circular" if periodic else "replicate")


def upsample(x: torch.Tensor, factor: int, method: str = "bilinear",
             periodic: bool = True) -> torch.Tensor:
    """Cell-centred upsampling of [B, C, H, W] by an integer factor."""
    if method == "nearest":
        return F.interpolate(x, scale_factor=factor, mode="nearest")
    if method != "bilinear":
        raise ValueError(f"unknown interpolation method {method!r}")
    if not periodic:
        return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
    x = F.pad(x, (1, 1, 0, 0), mode="circular")
    x = F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)
    return x[..., factor:-factor]


def interpolate_baseline(field_: np.ndarray, factor: int, method: str = "bilinear",
                         periodic: bool = True) -> np.ndarray:
    """Nearest or bilinear upsampling of [..., H, W]; longitude wraps when periodic."""
    x = np.asarray(field_, dtype=np.float64)
    lead = x.shape[:-2]
    t = torch.from_numpy(x.reshape((-1, 1) + x.shape[-2:]))
    out = upsample(t, factor, method, periodic).numpy()
    return out.reshape(lead + out.shape[-2:])


# --------------------------------------------------------------------------
# shared building blocks
# --------------------------------------------------------------------------

class GridConv(nn.Module):
    """3x3 convolution with latitude replicate / longitude wrap padding."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, periodic: bool = True):
        super().__init__()
        self.pad = kernel // 2
        self.periodic = periodic
        self.conv = nn.Conv2d(c_in, c_out, kernel)

    def forward(self, x):
        return self.conv(_pad_grid(x, self.pad, self.periodic))


class Upscale(nn.Module):
    """Interpolate by ``factor`` then refine with a convolution."""

    def __init__(self, channels: int, factor: int, periodic: bool = True):
        super().__init__()
        self.factor = factor
        self.periodic = periodic
        self.conv = GridConv(channels, channels, 3, periodic)

    def forward(self, x):
        return F.gelu(self.conv(upsample(x, self.factor, "bilinear", self.periodic)))


def freeze(module: nn.Module):
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def check_frozen(core: nn.Module):
    """Raise if any core parameter is trainable or carries a nonzero gradient."""
    for name, p in core.named_parameters():
        if p.requires_grad:
            raise FrozenCoreError(f"core parameter {name} is trainable")
        if p.grad is not None and bool(p.grad.abs().sum() > 0):
            raise FrozenCoreError(f"core parameter {name} received a gradient")


def _pad_coords(coords: np.ndarray, n: int) -> np.ndarray:
    """Extend a regularly spaced coordinate vector by linear extrapolation."""
    if n <= len(coords):
        return coords[:n]
    step = coords[1] - coords[0] if len(coords) > 1 else 1.0
    extra = coords[-1] + step * np.arange(1, n - len(coords) + 1)
    return np.concatenate([coords, extra])


class CoreAdapter(nn.Module):
    """Runs the frozen core stages on a feature map.

    Features [B, F, H, W] are tokenised at ``patch``, projected to the core
    width, given a Fourier position encoding for the supplied coordinates and
    the core's lead-time-zero embedding, passed through the frozen encoder and
    decoder, then projected back. The token grid is padded up to a whole
    number of windows and cropped afterwards.
    """

    def __init__(self, core: WxCModel, features: int, grid_shape, lat, lon, patch: int = 1,
                 window_tokens=None, encoder_shift: bool = True, periodic: bool = True):
        super().__init__()
        self.core = freeze(core)
        cfg = core.cfg
        d = cfg.embed_dim
        self.patch = patch
        self.periodic = periodic
        self.encoder_shift = encoder_shift
        H, W = grid_shape
        if H % patch or W % patch:
            raise ConfigError(f"core grid {H}x{W} not divisible by patch {patch}")
        self.grid_shape = (H, W)
        th, tw = window_tokens or cfg.window_tokens
        self.window_tokens = (th, tw)
        ht, wt = H // patch, W // patch
        self.token_pad = ((-ht) % th, (-wt) % tw)
        hp, wp = ht + self.token_pad[0], wt + self.token_pad[1]
        self.window_grid = (hp // th, wp // tw)
        self.padded_shape = (hp * patch, wp * patch)
        self.shift = (th // 2 if cfg.shift_latitude else 0, tw // 2)

        self.to_core = nn.Linear(features * patch * patch, d)
        self.from_core = nn.Linear(d, features * patch * patch)
        self.norm = nn.LayerNorm(d)
        lat_p = _pad_coords(np.asarray(lat, np.float64), self.padded_shape[0])
        lon_p = _pad_coords(np.asarray(lon, np.float64), self.padded_shape[1])
        pos = fourier_position_encoding(lat_p, lon_p, (patch, patch), self.window_tokens, d,
                                        cfg.harmonics)
        self.register_buffer("pos_enc", pos.to(torch.get_default_dtype()), persistent=False)
        self._lead0 = cfg.lead_times.index(0) if 0 in cfg.lead_times else None

    def train(self, mode: bool = True):
        super().train(mode)
        self.core.eval()        # frozen core never uses drop path
        return self

    def _pad(self, x):
        ph, pw = self.token_pad[0] * self.patch, self.token_pad[1] * self.patch
        if ph == 0 and pw == 0:
            return x
        x = F.pad(x, (0, 0, 0, ph), mode="replicate")
        return F.pad(x, (0, pw, 0, 0), mode="circular" if self.periodic else "replicate")

    def forward(self, x):
        H, W = self.grid_shape
        layout = (self.window_grid, self.window_tokens)
        p = (self.patch, self.patch)
        tokens = self.to_core(patchify(self._pad(x), p, self.window_tokens))
        tokens = tokens + self.pos_enc.to(tokens.dtype)
        if self._lead0 is not None:
            idx = torch.tensor([self._lead0], device=tokens.device)
            tokens = tokens + self.core.lead_time_embed(idx).to(tokens.dtype)[:, None, None, :]
        enc_shift = self.shift if self.encoder_shift else (0, 0)
        dec_shift = self.shift if self.core.cfg.swin_shift_decoder else (0, 0)
        tokens = self.core.encoder(tokens, layout, enc_shift)
        tokens = self.core.decoder(tokens, layout, dec_shift)
        out = self.from_core(self.norm(tokens))
        out = unpatchify(out, p, self.window_tokens, self.padded_shape)
        return out[..., :H, :W]


# --------------------------------------------------------------------------
# downscaling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DownscaleConfig:
    coarsen_factor: int = 6
    pre_upscale: int = 2
    post_upscale: tuple[int, ...] = (3,)
    patch_size: int = 1
    smoothing_size: int = 3
    out_vars: tuple[str, ...] = ("T2M",)
    features: int = 64
    window_tokens: tuple[int, int] | None = None
    encoder_shift: bool = True
    hires_statics: bool = True
    global_residual: bool = True
    periodic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "post_upscale", tuple(int(f) for f in self.post_upscale))
        object.__setattr__(self, "out_vars", tuple(self.out_vars))
        if self.window_tokens is not None:
            object.__setattr__(self, "window_tokens", tuple(self.window_tokens))
        chain = self.pre_upscale * math.prod(self.post_upscale)
        if chain != self.coarsen_factor:
            raise ConfigError(f"upscale chain {self.pre_upscale} x {list(self.post_upscale)} = "
                              f"{chain} != coarsen_factor {self.coarsen_factor}")
        if self.patch_size < 1 or self.features < 1:
            raise ConfigError("patch_size and features must be positive")
        if not self.out_vars:
            raise ConfigError("out_vars must name at least one variable")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DownscaleConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown downscale keys: {sorted(unknown)}")
        return cls(**d)


def merra6x(**changes) -> DownscaleConfig:
    return DownscaleConfig(**{**dict(coarsen_factor=6, pre_upscale=2, post_upscale=(3,),
                                     patch_size=1, out_vars=("T2M",)), **changes})


def cordex12x(**changes) -> DownscaleConfig:
    return DownscaleConfig(**{**dict(coarsen_factor=12, pre_upscale=3, post_upscale=(2, 2),
                                     patch_size=1, out_vars=("tas",), periodic=False),
                              **changes})


class DownscaleModel(nn.Module):
    """Shallow upscaling, frozen deep features with a residual, then learned upscaling.

    ``coarse_grid`` holds the low-resolution coordinates; the core operates on
    the grid after the pre-core upscaling.
    """

    def __init__(self, core: WxCModel, cfg: DownscaleConfig, in_channels: int, n_static: int,
                 coarse_grid: Grid, residual_index: list[int] | None = None):
        super().__init__()
        self.cfg = cfg
        f = cfg.features
        self.in_channels = in_channels
        self.n_static = n_static
        self.coarse_shape = coarse_grid.shape
        self.n_out = len(cfg.out_vars)
        if cfg.global_residual:
            if residual_index is None or len(residual_index) != self.n_out:
                raise ConfigError("global_residual needs one input channel per output variable")
        self.residual_index = list(residual_index) if residual_index is not None else None

        h, w = coarse_grid.shape
        core_shape = (h * cfg.pre_upscale, w * cfg.pre_upscale)
        lat = _refine(coarse_grid.lat, cfg.pre_upscale)
        lon = _refine(coarse_grid.lon, cfg.pre_upscale)
        self.patch_embed = GridConv(in_channels + n_static, f, 3, cfg.periodic)
        self.pre = Upscale(f, cfg.pre_upscale, cfg.periodic)
        self.deep = CoreAdapter(core, f, core_shape, lat, lon, cfg.patch_size, cfg.window_tokens,
                                cfg.encoder_shift, cfg.periodic)
        self.post_conv = GridConv(f, f, 3, cfg.periodic)
        self.post = nn.ModuleList(Upscale(f, k, cfg.periodic) for k in cfg.post_upscale)
        n_hr = n_static if cfg.hires_statics else 0
        self.out = GridConv(f + n_hr, self.n_out, 3, cfg.periodic)

    @property
    def core(self) -> WxCModel:
        return self.deep.core

    @property
    def output_shape(self) -> tuple[int, int]:
        h, w = self.coarse_shape
        return (h * self.cfg.coarsen_factor, w * self.cfg.coarsen_factor)

    def head_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def shallow(self, coarse, statics_lr):
        return self.pre(self.patch_embed(torch.cat([coarse, statics_lr], dim=1)))

    def forward(self, coarse, statics_lr, statics_hr=None):
        """coarse [B, C, h, w], statics_lr [B, S, h, w], statics_hr [B, S, H, W]."""
        if coarse.shape[-2:] != self.coarse_shape:
            raise ValueError(f"coarse input {tuple(coarse.shape[-2:])} != {self.coarse_shape}")
        s = self.shallow(coarse, statics_lr)
        x = s + self.post_conv(self.deep(s))
        for stage in self.post:
            x = stage(x)
        if self.cfg.hires_statics:
            if statics_hr is None:
                raise ValueError("statics_hr required when hires_statics is set")
            x = torch.cat([x, statics_hr.to(x.dtype)], dim=1)
        out = self.out(x)
        if self.cfg.global_residual:
            base = coarse[:, self.residual_index]
            out = out + upsample(base, self.cfg.coarsen_factor, "bilinear", self.cfg.periodic)
        return out

    def train(self, mode: bool = True):
        super().train(mode)
        self.core.eval()
        return self


def _refine(coords: np.ndarray, factor: int) -> np.ndarray:
    """Cell-centre coordinates of a grid refined by ``factor``."""
    coords = np.asarray(coords, np.float64)
    step = (coords[1] - coords[0]) if len(coords) > 1 else 1.0
    offsets = (np.arange(factor) + 0.5) / factor - 0.5
    return (coords[:, None] + step * offsets[None]).ravel()


def finetune_downscale_step(model: DownscaleModel, optimizer: torch.optim.Optimizer,
                            coarse, statics_lr, statics_hr, target) -> float:
    """One MSE step on the full-resolution target; the core must stay frozen."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    pred = model(coarse, statics_lr, statics_hr)
    value = F.mse_loss(pred, target)
    value.backward()
    check_frozen(model.core)
    optimizer.step()
    return float(value.detach())


@dataclass
class DownscaleTask:
    """Paired high-resolution truth and coarsened, smoothed inputs (normalized)."""
    hires: np.ndarray           # [N, C, H, W]
    coarse: np.ndarray          # [N, C, h, w]
    statics_hr: np.ndarray      # [S, H, W]
    statics_lr: np.ndarray      # [S, h, w]
    channel_names: tuple[str, ...]
    factor: int
    grid: Grid

    @property
    def coarse_grid(self) -> Grid:
        f = self.factor
        lat = self.grid.lat[: len(self.grid.lat) // f * f].reshape(-1, f).mean(axis=1)
        lon = self.grid.lon.reshape(-1, f).mean(axis=1)
        return Grid(lat, lon, self.grid.periodic)

    def split(self, n_train: int) -> tuple["DownscaleTask", "DownscaleTask"]:
        a = DownscaleTask(self.hires[:n_train], self.coarse[:n_train], self.statics_hr,
                          self.statics_lr, self.channel_names, self.factor, self.grid)
        b = DownscaleTask(self.hires[n_train:], self.coarse[n_train:], self.statics_hr,
                          self.statics_lr, self.channel_names, self.factor, self.grid)
        return a, b


def _random_field(rng, lat_r, lon_r, k_max: int, slope: float, n_terms: int) -> np.ndarray:
    out = np.zeros_like(lat_r)
    for _ in range(n_terms):
        k = int(rng.integers(1, k_max + 1))
        l = int(rng.integers(1, k_max // 2 + 2))
        amp = rng.normal() * k ** (-slope)
        out += amp * np.cos(k * lon_r + rng.uniform(0, 2 * np.pi)) \
            * np.cos(l * lat_r + rng.uniform(0, 2 * np.pi))
    return out


def synth_downscale_task(seed: int, grid: Grid, n_samples: int, factor: int,
                         noise: float = 0.05, size: int = 3) -> DownscaleTask:
    """Synthetic downscaling pairs with learnable fine structure.

    Near-surface temperature is a smooth, time-varying large-scale field plus a
    lapse-rate response to rough high-resolution terrain and a land-sea
    contrast, so detail lost by coarsening is recoverable from the statics.
    Wind and pressure channels carry large-scale context.
    """
    rng = np.random.default_rng([seed, 11])
    lat, lon = grid.mesh()
    lat_r, lon_r = np.deg2rad(lat), np.deg2rad(lon)
    terrain = _random_field(rng, lat_r, lon_r, grid.shape[1] // 4, 0.5, 60)
    terrain = np.maximum(terrain / terrain.std(), 0.0)
    land = 1.0 / (1.0 + np.exp(-4.0 * _random_field(rng, lat_r, lon_r, 8, 0.5, 12)))
    statics_hr = np.stack([terrain, land]).astype(np.float64)

    hires = np.empty((n_samples, 3) + grid.shape)
    for i in range(n_samples):
        large = _random_field(rng, lat_r, lon_r, 3, 0.0, 4) + 0.8 * np.cos(lat_r)
        season = rng.uniform(-1, 1)
        t2m = large - 0.65 * terrain + 0.4 * season * land
        u10 = _random_field(rng, lat_r, lon_r, 3, 0.0, 4)
        slp = -0.5 * large + 0.3 * _random_field(rng, lat_r, lon_r, 3, 0.0, 3)
        hires[i] = np.stack([t2m, u10, slp])
    hires += noise * rng.standard_normal(hires.shape)
    hires = _trim(hires, factor)
    statics_hr = _trim(statics_hr, factor)
    trimmed = Grid(grid.lat[: hires.shape[-2]], grid.lon, grid.periodic)
    coarse = coarsen_smooth(hires, factor, size, grid.periodic)
    statics_lr = coarsen_smooth(statics_hr, factor, size, grid.periodic)
    return DownscaleTask(hires.astype(np.float32), coarse.astype(np.float32),
                         statics_hr.astype(np.float32), statics_lr.astype(np.float32),
                         ("T2M", "U10M", "SLP"), factor, trimmed)


# --------------------------------------------------------------------------
# gravity-wave flux head
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GWHeadConfig:
    base_channels: int = 160
    n_levels: int = 122
    n_in_vars: int = 4          # u, v, T, p
    n_out_vars: int = 3         # potential temperature, u'w', v'w'
    grid_shape: tuple[int, int] = (64, 128)
    lead_time: int = 0
    patch_size: int = 2
    window_tokens: tuple[int, int] | None = (4, 4)
    encoder_shift: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(self.grid_shape))
        if self.window_tokens is not None:
            object.__setattr__(self, "window_tokens", tuple(self.window_tokens))
        if self.lead_time != 0:
            raise ConfigError("the flux head is instantaneous: lead_time must be 0")
        if min(self.base_channels, self.n_levels, self.patch_size) < 1:
            raise ConfigError("base_channels, n_levels and patch_size must be positive")

    @property
    def in_channels(self) -> int:
        return self.n_in_vars * self.n_levels

    @property
    def out_channels(self) -> int:
        return self.n_out_vars * self.n_levels

    @property
    def hidden_channels(self) -> list[int]:
        c = self.base_channels
        return [c, 2 * c, 4 * c, 8 * c]

    @property
    def channel_trace(self) -> list[int]:
        return [self.in_channels] + self.hidden_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GWHeadConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown gw head keys: {sorted(unknown)}")
        return cls(**d)


def gwflux(**changes) -> GWHeadConfig:
    return GWHeadConfig(**changes)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = GridConv(c_in, c_out, 3)

    def forward(self, x):
        return F.gelu(self.conv(x))


class GWHead(nn.Module):
    """U-Net style convolution stacks around the frozen encoder/decoder.

    Pre-core block k feeds its output, by concatenation, into the mirrored
    post-core block: the deepest pre block joins the first post block.
    """

    def __init__(self, core: WxCModel, cfg: GWHeadConfig, grid: Grid | None = None):
        super().__init__()
        self.cfg = cfg
        grid = grid if grid is not None else Grid.regular(*cfg.grid_shape)
        if grid.shape != cfg.grid_shape:
            raise ConfigError(f"grid {grid.shape} != head grid {cfg.grid_shape}")
        trace = cfg.channel_trace
        self.pre = nn.ModuleList(ConvBlock(a, b) for a, b in zip(trace[:-1], trace[1:]))
        self.deep = CoreAdapter(core, trace[-1], cfg.grid_shape, grid.lat, grid.lon,
                                cfg.patch_size, cfg.window_tokens, cfg.encoder_shift)
        hidden = cfg.hidden_channels
        post_out = hidden[-2::-1] + [hidden[0]]         # 4C, 2C, C, C
        post_in = [hidden[-1]] + post_out[:-1]           # 8C, 4C, 2C, C
        skips = hidden[::-1]                             # 8C, 4C, 2C, C
        self.post = nn.ModuleList(ConvBlock(a + s, b)
                                  for a, s, b in zip(post_in, skips, post_out))
        self.out = nn.Conv2d(post_out[-1], cfg.out_channels, 1)
        self.last_trace: list[int] = []

    @property
    def core(self) -> WxCModel:
        return self.deep.core

    def head_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, x):
        if x.shape[1:] != (self.cfg.in_channels,) + self.cfg.grid_shape:
            raise ValueError(f"input {tuple(x.shape[1:])} != "
                             f"{(self.cfg.in_channels,) + self.cfg.grid_shape}")
        trace = [x.shape[1]]
        skips = []
        for block in self.pre:
            x = block(x)
            skips.append(x)
            trace.append(x.shape[1])
        x = self.deep(x)
        for block, skip in zip(self.post, reversed(skips)):
            x = block(torch.cat([x, skip], dim=1))
        self.last_trace = trace
        return self.out(x)

    def train(self, mode: bool = True):
        super().train(mode)
        self.core.eval()
        return self


def gw_forward(head: GWHead, background: torch.Tensor) -> torch.Tensor:
    """[1, n_in, H, W] -> [n_out, H, W] at lead time zero."""
    if background.dim() != 4 or background.shape[0] != 1:
        raise ValueError(f"expected a single-sample batch [1, C, H, W], got {tuple(background.shape)}")
    return head(background)[0]


def finetune_gw_step(head: GWHead, optimizer: torch.optim.Optimizer, inputs, targets) -> float:
    head.train()
    optimizer.zero_grad(set_to_none=True)
    value = F.mse_loss(head(inputs), targets)
    value.backward()
    check_frozen(head.core)
    optimizer.step()
    return float(value.detach())


@dataclass
class GWTask:
    """Normalized background states, noisy flux targets and the noise-free oracle."""
    inputs: np.ndarray          # [N, 4L, H, W]
    targets: np.ndarray         # [N, 3L, H, W]
    oracle: np.ndarray          # [N, 3L, H, W]
    noise: float
    terrain: np.ndarray = field(repr=False, default=None)

    @property
    def noise_floor(self) -> float:
        """Expected MSE of the oracle against the noisy targets."""
        return self.noise ** 2


def synth_gw_task(seed: int, n_samples: int = 32, cfg: GWHeadConfig | None = None,
                  noise: float = 0.1) -> GWTask:
    """Background states on terrain-following levels and a known flux functional.

    Inputs are u, v, T and p per level. Targets per level are the potential
    temperature T (p0/p)^kappa and a terrain-forced momentum flux for each wind
    component, damped with height and modulated by the local vertical shear.
    Targets are standardised per channel before Gaussian noise is added, so
    the oracle's MSE against the targets is ``noise ** 2``.
    """
    cfg = cfg or GWHeadConfig(base_channels=16, n_levels=4, grid_shape=(16, 32))
    rng = np.random.default_rng([seed, 13])
    L = cfg.n_levels
    grid = Grid.regular(*cfg.grid_shape)
    lat, lon = grid.mesh()
    lat_r, lon_r = np.deg2rad(lat), np.deg2rad(lon)
    terrain = np.maximum(_random_field(rng, lat_r, lon_r, 6, 0.5, 10), 0.0)
    terrain = terrain / max(terrain.max(), 1e-9)                 # 0..1, ~km scale
    p_ref = np.linspace(1000.0, 200.0, L)
    z = np.arange(L) / max(L - 1, 1)
    kappa = 0.286

    inputs = np.empty((n_samples, 4, L) + grid.shape)
    oracle = np.empty((n_samples, 3, L) + grid.shape)
    for i in range(n_samples):
        u_sfc = 5.0 * _random_field(rng, lat_r, lon_r, 2, 0.0, 3)
        v_sfc = 5.0 * _random_field(rng, lat_r, lon_r, 2, 0.0, 3)
        shear = rng.uniform(0.5, 1.5) * (1.0 + 0.5 * np.cos(lat_r))
        u = u_sfc[None] + 20.0 * shear[None] * z[:, None, None]
        v = v_sfc[None] + 5.0 * rng.uniform(-1, 1) * z[:, None, None]
        t_sfc = 288.0 + 10.0 * np.cos(lat_r) + 2.0 * _random_field(rng, lat_r, lon_r, 2, 0.0, 2)
        temp = t_sfc[None] - 60.0 * z[:, None, None] - 6.5 * terrain[None]
        p = p_ref[:, None, None] * np.exp(-terrain[None] / 8.0)
        theta = temp * (1000.0 / p) ** kappa
        dudz = np.gradient(u, axis=0)
        dvdz = np.gradient(v, axis=0)
        damp = np.exp(-2.0 * z)[:, None, None]
        uw = -terrain[None] * u_sfc[None] * damp * (1.0 + np.tanh(dudz / 5.0))
        vw = -terrain[None] * v_sfc[None] * damp * (1.0 + np.tanh(dvdz / 5.0))
        inputs[i] = np.stack([u, v, temp, p])
        oracle[i] = np.stack([theta, uw, vw])

    def standardise(a):
        mu = a.mean(axis=(0, 3, 4), keepdims=True)
        sd = a.std(axis=(0, 3, 4), keepdims=True)
        return (a - mu) / np.maximum(sd, 1e-12)

    inputs = standardise(inputs).reshape((n_samples, 4 * L) + grid.shape)
    oracle = standardise(oracle).reshape((n_samples, 3 * L) + grid.shape)
    targets = oracle + noise * rng.standard_normal(oracle.shape)
    return GWTask(inputs.astype(np.float32), targets.astype(np.float32),
                  oracle.astype(np.float32), noise, terrain.astype(np.float32))


# --------------------------------------------------------------------------
# presets and head checkpoints
# --------------------------------------------------------------------------

HEAD_PRESETS = {"merra6x": merra6x, "cordex12x": cordex12x, "gwflux": gwflux}


def get_head_preset(name: str, **changes):
    try:
        return HEAD_PRESETS[name](**changes)
    except KeyError:
        raise ConfigError(f"unknown head preset {name!r}; choose from {sorted(HEAD_PRESETS)}") from None


def core_hash(core: WxCModel) -> str:
    return content_hash(state_arrays(core))


def save_head(head: nn.Module, path: str | os.PathLike, preset: str, meta: dict | None = None) -> str:
    """Write the head's own weights, referencing the frozen core by content hash."""
    trainable = {k: v for k, v in head.state_dict().items() if not k.startswith("deep.core.")}
    holder = nn.Module()
    arrays = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in trainable.items()}
    for k, v in arrays.items():
        holder.register_buffer(k.replace(".", "__"), torch.from_numpy(v))
    meta = {"preset": preset, "head_config": head.cfg.to_dict(),
            "core_hash": core_hash(head.core), **(meta or {})}
    return save_module(holder, path, "head", meta)


def load_head_weights(head: nn.Module, path: str | os.PathLike) -> nn.Module:
    manifest, arrays = read_container(path, "head")
    if manifest["core_hash"] != core_hash(head.core):
        raise DataError(f"{path}: head was trained against core {manifest['core_hash'][:12]}, "
                        f"got {core_hash(head.core)[:12]}")
    arrays = {k.replace("__", "."): v for k, v in arrays.items()}
    core_arrays = {f"deep.core.{k}": v for k, v in state_arrays(head.core).items()}
    return load_state(head, {**arrays, **core_arrays})
