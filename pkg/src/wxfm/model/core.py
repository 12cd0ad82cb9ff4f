"""The masked encoder-decoder that predicts normalized anomalies."""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import torch
from torch import nn

from ..catalog import Grid
from ..exceptions import ConfigError
from ..masking import MaskIndex, gather, identity_mask, scatter
from .config import ModelConfig
from .layers import Stage, fourier_position_encoding, init_weights, patchify, unpatchify


def _is_meta() -> bool:
    return torch.empty(0).device.type == "meta"


class WxCModel(nn.Module):
    """Encoder-decoder over windowed tokens.

    Inputs follow the anomaly objective: the two normalized dynamic states,
    the normalized climatology at the target time, the statics (geophysical
    fields plus time encodings), the lead time and the input delta. The
    output is the predicted normalized anomaly (X - C) / sigma_C at the target.
    """

    def __init__(self, cfg: ModelConfig, grid: Grid | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        ph, pw = cfg.token_size
        self.grid = grid if grid is not None else Grid.regular(*cfg.grid_shape)
        if self.grid.shape != cfg.grid_shape:
            raise ConfigError(f"grid {self.grid.shape} != config {cfg.grid_shape}")

        self.dynamic_embed = nn.Linear(cfg.dynamic_channels * ph * pw, d)
        self.context_embed = nn.Linear(cfg.context_channels * ph * pw, d)
        self.lead_time_embed = nn.Embedding(len(cfg.lead_times), d)
        self.input_delta_embed = nn.Embedding(len(cfg.input_deltas), d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.encoder = Stage(cfg.encoder_pattern, d, cfg.n_heads, cfg.mlp_ratio,
                             [cfg.drop_path_rate] * cfg.n_encoder_blocks)
        self.decoder = Stage(cfg.decoder_pattern, d, cfg.n_heads, cfg.mlp_ratio,
                             [cfg.drop_path_rate] * cfg.n_decoder_blocks)
        self.decoder_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.n_out * ph * pw)

        if _is_meta():
            pos = torch.empty(cfg.n_windows, cfg.tokens_per_window, d)
        else:
            pos = fourier_position_encoding(self.grid.lat, self.grid.lon, cfg.token_size,
                                            cfg.window_tokens, d, cfg.harmonics)
        self.register_buffer("pos_enc", pos.to(torch.get_default_dtype()), persistent=False)
        self._lead_index = {v: i for i, v in enumerate(cfg.lead_times)}
        self._delta_index = {v: i for i, v in enumerate(cfg.input_deltas)}
        self.apply(init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    # ---------------------------------------------------------------- helpers
    @property
    def layout(self):
        return (self.cfg.window_grid, self.cfg.window_tokens)

    def _time_index(self, values, table: dict, what: str, batch: int) -> torch.Tensor:
        if isinstance(values, torch.Tensor):
            values = values.tolist()
        if not isinstance(values, Sequence):
            values = [values] * batch
        try:
            idx = [table[int(v)] for v in values]
        except KeyError as err:
            raise ConfigError(f"{what} {err.args[0]} not in configured set {sorted(table)}") from None
        if len(idx) != batch:
            raise ValueError(f"{what}: expected {batch} values, got {len(idx)}")
        return torch.tensor(idx, device=self.pos_enc.device)

    def zero_head_(self) -> "WxCModel":
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        return self

    def core_parameters(self):
        """Transformer-core parameters: the encoder and decoder stages."""
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    # ---------------------------------------------------------------- stages
    def embed(self, x_t, x_prev, clim_target, statics, lead_time, input_delta) -> torch.Tensor:
        """Sum of both linear embeddings, the position encoding and the time encodings."""
        cfg = self.cfg
        B = x_t.shape[0]
        dynamic = torch.cat([x_t, x_prev], dim=1)
        context = torch.cat([clim_target, statics], dim=1)
        if dynamic.shape[1] != cfg.dynamic_channels:
            raise ConfigError(f"dynamic input has {dynamic.shape[1]} channels, "
                              f"config expects {cfg.dynamic_channels}")
        if context.shape[1] != cfg.context_channels:
            raise ConfigError(f"context input has {context.shape[1]} channels, "
                              f"config expects {cfg.context_channels}")
        tokens = self.dynamic_embed(patchify(dynamic, cfg.token_size, cfg.window_tokens))
        tokens = tokens + self.context_embed(patchify(context, cfg.token_size, cfg.window_tokens))
        tokens = tokens + self.pos_enc.to(tokens.dtype)
        lt = self.lead_time_embed(self._time_index(lead_time, self._lead_index, "lead time", B))
        dt = self.input_delta_embed(self._time_index(input_delta, self._delta_index,
                                                     "input delta", B))
        return tokens + (lt + dt)[:, None, None, :]

    def encode(self, packed: torch.Tensor, idx: MaskIndex | None = None) -> torch.Tensor:
        shift = (0, 0)
        if self.cfg.swin_shift_encoder:
            if idx is not None and not idx.is_identity:
                raise ConfigError("encoder Swin-shift needs dense tokens (mask ratio 0)")
            shift = self.cfg.shift
        return self.encoder(packed, self.layout, shift)

    def decode(self, latent: torch.Tensor, idx: MaskIndex | None = None) -> torch.Tensor:
        """Densify, run the decoder blocks and project back to [B, C_out, H, W]."""
        cfg = self.cfg
        if idx is None:
            idx = identity_mask(cfg.n_windows, cfg.tokens_per_window)
        dense = scatter(latent, idx, self.mask_token)
        if not idx.is_identity:
            hidden = torch.from_numpy(~idx.visible()).to(dense.device)
            dense = dense + self.pos_enc.to(dense.dtype) * hidden[None, :, :, None]
        shift = cfg.shift if cfg.swin_shift_decoder else (0, 0)
        dense = self.decoder(dense, self.layout, shift)
        out = self.head(self.decoder_norm(dense))
        return unpatchify(out, cfg.token_size, cfg.window_tokens, cfg.grid_shape)

    def forward(self, x_t, x_prev, clim_target, statics, lead_time, input_delta,
                mask: MaskIndex | None = None) -> torch.Tensor:
        tokens = self.embed(x_t, x_prev, clim_target, statics, lead_time, input_delta)
        if mask is not None:
            if (mask.n_windows, mask.tokens_per_window) != (self.cfg.n_windows,
                                                             self.cfg.tokens_per_window):
                raise ValueError("mask geometry does not match model config")
            tokens = gather(tokens, mask)
        return self.decode(self.encode(tokens, mask), mask)


def predict(output, clim_target, sigma_c):
    """Physical-units state from a normalized anomaly: output * sigma_C + C."""
    if isinstance(output, torch.Tensor):
        sc = torch.as_tensor(sigma_c, dtype=output.dtype, device=output.device)
        return output * sc[:, None, None] + torch.as_tensor(clim_target, dtype=output.dtype)
    sc = np.asarray(sigma_c)
    return np.asarray(output) * sc[:, None, None] + np.asarray(clim_target)


def count_parameters(cfg: ModelConfig) -> tuple[int, float]:
    """(exact parameter count, analytic transformer-core estimate 12 d^2 n_blocks).

    The model is built on the meta device, so no weights are allocated.
    """
    with torch.device("meta"):
        model = WxCModel(cfg)
    exact = sum(p.numel() for p in model.parameters())
    analytic = 12.0 * cfg.embed_dim ** 2 * (cfg.n_encoder_blocks + cfg.n_decoder_blocks)
    return exact, analytic


def block_pattern_counts(pattern: list[str]) -> tuple[int, int]:
    return pattern.count("L"), pattern.count("G")


__all__ = ["WxCModel", "predict", "count_parameters", "block_pattern_counts"]
