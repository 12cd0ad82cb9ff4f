from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..exceptions import ConfigError

LOCAL, GLOBAL = "L", "G"


def alternating_pattern(n_blocks: int) -> list[str]:
    """Strict L/G alternation that starts and ends with local attention."""
    if n_blocks < 0:
        raise ConfigError("block count must be non-negative")
    if n_blocks and n_blocks % 2 == 0:
        raise ConfigError(f"{n_blocks} blocks cannot alternate L/G and end with L; "
                          "use an odd block count")
    return [LOCAL if i % 2 == 0 else GLOBAL for i in range(n_blocks)]


@dataclass(frozen=True)
class ModelConfig:
    grid_shape: tuple[int, int] = (24, 48)
    token_size: tuple[int, int] = (2, 2)
    window_size: tuple[int, int] = (6, 8)      # pixels
    embed_dim: int = 64
    n_heads: int = 4
    mlp_ratio: float = 4.0
    n_encoder_blocks: int = 5
    n_decoder_blocks: int = 3
    drop_path_rate: float = 0.0
    swin_shift_encoder: bool = False
    swin_shift_decoder: bool = True
    shift_latitude: bool = True
    n_channels: int = 9
    n_static: int = 8
    out_channels: int | None = None
    lead_times: tuple[int, ...] = (0, 6, 12, 24)
    input_deltas: tuple[int, ...] = (-3, -6, -9, -12)
    fourier_harmonics: int | None = None

    def __post_init__(self):
        for name in ("grid_shape", "token_size", "window_size", "lead_times", "input_deltas"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        H, W = self.grid_shape
        ph, pw = self.token_size
        wh, ww = self.window_size
        if min(H, W, ph, pw, wh, ww) < 1:
            raise ConfigError("grid, token and window sizes must be positive")
        if H % wh or W % ww:
            raise ConfigError(f"grid {self.grid_shape} not divisible by window {self.window_size}")
        if wh % ph or ww % pw:
            raise ConfigError(f"window {self.window_size} not divisible by token {self.token_size}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must lie in [0, 1)")
        if len(set(self.lead_times)) != len(self.lead_times) or not self.lead_times:
            raise ConfigError("lead_times must be a non-empty set")
        if len(set(self.input_deltas)) != len(self.input_deltas) or not self.input_deltas:
            raise ConfigError("input_deltas must be a non-empty set")
        if 4 * self.harmonics > self.embed_dim:
            raise ConfigError("fourier_harmonics too large: need 4K <= embed_dim")
        alternating_pattern(self.n_encoder_blocks)
        alternating_pattern(self.n_decoder_blocks)

    @property
    def harmonics(self) -> int:
        return self.fourier_harmonics if self.fourier_harmonics is not None else self.embed_dim // 4

    @property
    def n_out(self) -> int:
        return self.out_channels if self.out_channels is not None else self.n_channels

    @property
    def dynamic_channels(self) -> int:
        return 2 * self.n_channels

    @property
    def context_channels(self) -> int:
        return self.n_channels + self.n_static

    @property
    def token_grid(self) -> tuple[int, int]:
        return (self.grid_shape[0] // self.token_size[0], self.grid_shape[1] // self.token_size[1])

    @property
    def window_tokens(self) -> tuple[int, int]:
        return (self.window_size[0] // self.token_size[0], self.window_size[1] // self.token_size[1])

    @property
    def window_grid(self) -> tuple[int, int]:
        return (self.grid_shape[0] // self.window_size[0], self.grid_shape[1] // self.window_size[1])

    @property
    def n_windows(self) -> int:
        r, c = self.window_grid
        return r * c

    @property
    def tokens_per_window(self) -> int:
        r, c = self.window_tokens
        return r * c

    @property
    def n_tokens(self) -> int:
        return self.n_windows * self.tokens_per_window

    @property
    def shift(self) -> tuple[int, int]:
        """Half-window roll in tokens (floor for odd counts)."""
        r, c = self.window_tokens
        return (r // 2 if self.shift_latitude else 0, c // 2)

    @property
    def encoder_pattern(self) -> list[str]:
        return alternating_pattern(self.n_encoder_blocks)

    @property
    def decoder_pattern(self) -> list[str]:
        return alternating_pattern(self.n_decoder_blocks)

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def paper_config() -> ModelConfig:
    """Full-scale geometry: 360x576 grid, 2x2 tokens, 30x32 px windows, d=2560."""
    return ModelConfig(grid_shape=(360, 576), token_size=(2, 2), window_size=(30, 32),
                       embed_dim=2560, n_heads=16, mlp_ratio=4.0, n_encoder_blocks=25,
                       n_decoder_blocks=5, drop_path_rate=0.05, swin_shift_decoder=True,
                       n_channels=160, n_static=8)


def desk_config(**changes) -> ModelConfig:
    return ModelConfig(**changes)
