"""Pretraining objective, variable weights, schedules and rollout training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import timedelta
from pathlib import Path

import numpy as np
import torch

from .catalog import VariableCatalog
from .data import Dataset
from .exceptions import ConfigError, DataError
from .masking import MaskIndex, MaskSpec, Strategy, sample_mask
from .model.core import WxCModel
from .model.layers import DropPath, unpatchify
from .stats import Climatology, NormStats

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    warmup_steps: int = 2500
    peak_lr: float = 1e-4
    final_lr: float = 1e-5
    total_steps: int = 100_000
    constant_lr: float | None = None

    def __post_init__(self):
        if self.constant_lr is None and not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps)")


def lr_at(step: int, schedule: LRSchedule) -> float:
    """Linear warm-up to the peak, then cosine annealing down to the final rate."""
    if schedule.constant_lr is not None:
        if step < 0:
            raise ValueError(f"step {step} is negative")
        return schedule.constant_lr
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    tau = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.final_lr + (schedule.peak_lr - schedule.final_lr) * (1 + math.cos(math.pi * tau)) / 2


# --------------------------------------------------------------------------
# variable weights
# --------------------------------------------------------------------------

_SURFACE_WEIGHT = {"U10M": 1.0, "V10M": 1.0, "SLP": 0.1, "T2M": 0.1}
_SURFACE_OTHER = {"QV2M", "PS", "TS", "TQI", "TQL", "TQV", "GWETROOT", "LAI", "EFLUX",
                  "HFLUX", "Z0M", "LWGEM", "LWGAB", "LWTUP", "SWGNT", "SWTNT"}
# QV is not listed with either group; it is weighted like the standard forecast variables
_VERTICAL_WEIGHT = {"H": 1.0, "OMEGA": 1.0, "T": 1.0, "U": 1.0, "V": 1.0, "QV": 1.0,
                    "CLOUD": 0.1, "PL": 0.1, "QI": 0.1, "QL": 0.1}
_ALIASES = {"U10": "U10M", "V10": "V10M", "UAS": "U10M", "VAS": "V10M", "PSL": "SLP",
            "TAS": "T2M", "W": "OMEGA", "ZG": "H", "TA": "T", "UA": "U", "VA": "V", "HUS": "QV"}


def _canonical(name: str) -> str:
    up = name.upper()
    return _ALIASES.get(up, up)


@dataclass(frozen=True)
class WeightTable:
    names: tuple[str, ...]
    parameter_weight: np.ndarray
    level_weight: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.parameter_weight * self.level_weight

    def __getitem__(self, name: str) -> float:
        return float(self.weights[self.names.index(name)])


def make_weight_table(catalog: VariableCatalog, level_weighting: str = "linear") -> WeightTable:
    """Per-channel loss weights; vertical channels scale with p / max(p)."""
    if level_weighting not in ("linear", "none"):
        raise ConfigError(f"unknown level weighting {level_weighting!r}")
    unmapped = []
    pw, lw = [], []
    pmax = max(catalog.levels) if catalog.levels else 1.0
    for var, level in catalog.channel_info():
        key = _canonical(var)
        if level is None:
            if key in _SURFACE_WEIGHT:
                pw.append(_SURFACE_WEIGHT[key])
            elif key in _SURFACE_OTHER:
                pw.append(0.01)
            else:
                unmapped.append(var)
                pw.append(np.nan)
            lw.append(1.0)
        else:
            if key not in _VERTICAL_WEIGHT:
                unmapped.append(var)
            pw.append(_VERTICAL_WEIGHT.get(key, np.nan))
            lw.append(level / pmax if level_weighting == "linear" else 1.0)
    if unmapped:
        raise ConfigError(f"no loss weight for variables: {sorted(set(unmapped))}")
    return WeightTable(tuple(catalog.channel_names), np.array(pw), np.array(lw))


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def latitude_weights(lat_deg: np.ndarray) -> np.ndarray:
    w = np.cos(np.deg2rad(lat_deg))
    return w / w.mean()


def loss(pred: torch.Tensor, target: torch.Tensor, weights, mask: MaskIndex | None = None,
         *, masked_only: bool = False, lat_weights=None, token_size=(1, 1),
         window_layout=None) -> torch.Tensor:
    """Weighted MSE: sum_c w_c mean_hw(err_c^2) / sum_c w_c, averaged over the batch.

    ``pred``/``target`` are [B, C, H, W] (a missing batch axis is added).
    By default every pixel counts; ``masked_only`` restricts the mean to
    pixels under hidden tokens, which needs the token and window layout.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim == 3:
        pred, target = pred[None], target[None]
    w = torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=pred.dtype)
    if w.shape != (pred.shape[1],):
        raise ValueError(f"{w.shape[0]} weights for {pred.shape[1]} channels")
    if not torch.all(w > 0):
        raise ConfigError("loss weights must be positive")
    sq = (pred - target) ** 2
    pix = torch.ones(pred.shape[-2:], dtype=pred.dtype)
    if lat_weights is not None:
        pix = pix * torch.as_tensor(np.asarray(lat_weights), dtype=pred.dtype)[:, None]
    if masked_only and mask is not None and not mask.is_identity:
        pix = pix * _hidden_pixels(mask, token_size, window_layout).to(pred.dtype)
    per_channel = (sq * pix).sum(dim=(-2, -1)) / pix.sum()
    return ((per_channel * w).sum(dim=1) / w.sum()).mean()


def _hidden_pixels(mask: MaskIndex, token_size, window_layout) -> torch.Tensor:
    window_grid, window_tokens = window_layout
    hidden = torch.from_numpy(~mask.visible()).double()[None, :, :, None]
    hidden = hidden.expand(-1, -1, -1, token_size[0] * token_size[1])
    H = window_grid[0] * window_tokens[0] * token_size[0]
    W = window_grid[1] * window_tokens[1] * token_size[1]
    return unpatchify(hidden, token_size, window_tokens, (H, W))[0, 0]


# --------------------------------------------------------------------------
# phase configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainPhaseConfig:
    mask_ratio: float = 0.5
    mask_alternation: bool = True
    drop_path_rate: float = 0.05
    swin_shift_encoder: bool = False
    lead_times: tuple[int, ...] = (0, 6, 12, 24)
    input_deltas: tuple[int, ...] = (-3, -6, -9, -12)
    rollout_steps: int = 1
    schedule: LRSchedule = field(default_factory=LRSchedule)
    use_variable_weights: bool = False
    latitude_weighting: bool = False
    masked_only_loss: bool = False
    batch_size: int = 1
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0

    def __post_init__(self):
        MaskSpec(Strategy.LOCAL, self.mask_ratio)
        if self.rollout_steps < 1:
            raise ConfigError("rollout_steps must be >= 1")
        for name in ("lead_times", "input_deltas", "betas"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", LRSchedule(**self.schedule))

    @classmethod
    def phase1(cls, **changes) -> "TrainPhaseConfig":
        return cls(**changes)

    @classmethod
    def phase2(cls, **changes) -> "TrainPhaseConfig":
        base = dict(mask_ratio=0.0, mask_alternation=False, drop_path_rate=0.0,
                    swin_shift_encoder=True, lead_times=(6,), input_deltas=(-6,),
                    rollout_steps=3, schedule=LRSchedule(constant_lr=1e-5),
                    use_variable_weights=True)
        base.update(changes)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPhaseConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def mask_strategy_for_step(step: int, phase: TrainPhaseConfig) -> Strategy:
    """Local on even steps, global on odd steps when alternating."""
    if phase.mask_alternation and step % 2 == 1:
        return Strategy.GLOBAL
    return Strategy.LOCAL


# --------------------------------------------------------------------------
# batch assembly
# --------------------------------------------------------------------------

@dataclass
class Sample:
    index: int
    lead_time: int
    input_delta: int


class ForecastData:
    """Builds normalized model inputs and targets from a dataset."""

    def __init__(self, dataset: Dataset, clim: Climatology, stats: NormStats,
                 dtype=torch.float32):
        if stats.sigma_c is None:
            raise DataError("stats need sigma_c for the anomaly target")
        if dataset.statics is None:
            raise DataError("dataset has no static fields")
        self.dataset = dataset
        self.clim = clim
        self.stats = stats
        self.dtype = dtype
        self._mu = stats.mu[:, None, None]
        self._sigma = stats.sigma[:, None, None]
        self._sigma_c = stats.sigma_c[:, None, None]

    def offset_index(self, i: int, hours: int) -> int | None:
        ts = self.dataset.timestamps[i] + timedelta(hours=hours)
        return self.dataset.index_of(ts)

    def valid(self, sample: Sample, n_steps: int = 1) -> bool:
        if self.offset_index(sample.index, sample.input_delta) is None:
            return False
        for k in range(1, n_steps + 1):
            j = self.offset_index(sample.index, k * sample.lead_time)
            if j is None or not self.clim.covers(self.dataset.timestamps[j]):
                return False
        return True

    def norm(self, x: np.ndarray) -> np.ndarray:
        return (x - self._mu) / self._sigma

    def tensor(self, arrays) -> torch.Tensor:
        return torch.as_tensor(np.stack(arrays), dtype=self.dtype)

    def inputs(self, samples: list[Sample]):
        ds = self.dataset
        x_t = [self.norm(ds.values[s.index]) for s in samples]
        x_prev = [self.norm(ds.values[self.offset_index(s.index, s.input_delta)]) for s in samples]
        return self.tensor(x_t), self.tensor(x_prev)

    def context(self, samples: list[Sample], step: int = 1):
        """Normalized climatology, statics and raw climatology at t + step * lead."""
        ds = self.dataset
        clim_n, statics, clim = [], [], []
        for s in samples:
            ts = ds.timestamps[self.offset_index(s.index, step * s.lead_time)]
            c = self.clim.lookup(ts)
            clim.append(c)
            clim_n.append(self.norm(c))
            statics.append(ds.statics.stack(ts))
        return self.tensor(clim_n), self.tensor(statics), self.tensor(clim)

    def target(self, samples: list[Sample], step: int = 1):
        """(physical state, normalized anomaly) at t + step * lead."""
        ds = self.dataset
        phys, anom = [], []
        for s in samples:
            j = self.offset_index(s.index, step * s.lead_time)
            x = ds.values[j]
            phys.append(x)
            anom.append((x - self.clim.lookup(ds.timestamps[j])) / self._sigma_c)
        return self.tensor(phys), self.tensor(anom)


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    lr: float
    strategy: str | None
    lead_times: list[int]
    input_deltas: list[int]
    masks: list[MaskIndex | None] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


class Trainer:
    """Single-writer optimizer loop for pretraining and rollout tuning."""

    def __init__(self, model: WxCModel, data: ForecastData, phase: TrainPhaseConfig,
                 seed: int = 0, weights: np.ndarray | None = None):
        self.model = model
        self.data = data
        self.phase = phase
        self.seed = seed
        cat = data.dataset.catalog
        if weights is None:
            weights = (make_weight_table(cat).weights if phase.use_variable_weights
                       else np.ones(cat.n_channels))
        self.weights = np.asarray(weights, dtype=np.float64)
        self.lat_weights = latitude_weights(data.dataset.grid.lat) if phase.latitude_weighting else None
        self.apply_phase(phase)
        self.optimizer = torch.optim.AdamW(
            [p for p in model.parameters() if p.requires_grad],
            lr=lr_at(0, phase.schedule), betas=phase.betas, weight_decay=phase.weight_decay)

    def apply_phase(self, phase: TrainPhaseConfig):
        """Switch drop path and encoder shift in place; weights are untouched."""
        self.phase = phase
        cfg = self.model.cfg.replace(drop_path_rate=phase.drop_path_rate,
                                     swin_shift_encoder=phase.swin_shift_encoder)
        self.model.cfg = cfg
        for m in self.model.modules():
            if isinstance(m, DropPath):
                m.p = phase.drop_path_rate

    # ------------------------------------------------------------ sampling
    def sample_batch(self, step: int, anchors: list[int] | None = None,
                     n_steps: int = 1) -> list[Sample]:
        """Per-sample lead times/deltas drawn from seeds (seed, step, sample index)."""
        phase = self.phase
        rng = np.random.default_rng([self.seed, step])
        if anchors is None:
            anchors = list(range(len(self.data.dataset)))
        picks = rng.choice(len(anchors), size=phase.batch_size,
                           replace=len(anchors) < phase.batch_size)
        samples = []
        for i, a in enumerate(picks):
            srng = np.random.default_rng([self.seed, step, i])
            s = Sample(int(anchors[a]), int(srng.choice(phase.lead_times)),
                       int(srng.choice(phase.input_deltas)))
            if self.data.valid(s, n_steps):
                samples.append(s)
            else:
                logger.warning("step %d: skipping sample at %s (lead %d, delta %d): "
                               "inputs or climatology unavailable", step,
                               self.data.dataset.timestamps[s.index].isoformat(),
                               s.lead_time, s.input_delta)
        return samples

    def mask_for_step(self, step: int) -> MaskIndex | None:
        if self.phase.mask_ratio == 0.0:
            return None
        spec = MaskSpec(mask_strategy_for_step(step, self.phase), self.phase.mask_ratio)
        cfg = self.model.cfg
        return sample_mask([self.seed, step, 1_000_003], spec, cfg.n_windows, cfg.tokens_per_window)

    # ------------------------------------------------------------ objective
    def forecast_loss(self, samples: list[Sample], step: int, n_steps: int = 1,
                      mask: MaskIndex | None | str = "auto"):
        """Loss averaged over ``n_steps`` autoregressive steps.

        The mask applies to the first step only; afterwards the prediction
        becomes X_t and the previous X_t becomes X_{t - delta}.
        """
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not samples:
            raise DataError("empty batch")
        if isinstance(mask, str):
            mask = self.mask_for_step(step)
        data, model, stats = self.data, self.model, self.data.stats
        dtype = data.dtype
        mu = torch.as_tensor(stats.mu, dtype=dtype)[:, None, None]
        sigma = torch.as_tensor(stats.sigma, dtype=dtype)[:, None, None]
        sigma_c = torch.as_tensor(stats.sigma_c, dtype=dtype)[:, None, None]
        leads = [s.lead_time for s in samples]
        deltas = [s.input_delta for s in samples]
        x_t, x_prev = data.inputs(samples)
        total = 0.0
        used_masks, step_losses = [], []
        for k in range(1, n_steps + 1):
            clim_n, statics, clim = data.context(samples, k)
            _, target = data.target(samples, k)
            m = mask if k == 1 else None
            out = model(x_t, x_prev, clim_n, statics, leads, deltas, m)
            lk = loss(out, target, self.weights, m, masked_only=self.phase.masked_only_loss,
                      lat_weights=self.lat_weights, token_size=model.cfg.token_size,
                      window_layout=model.layout)
            total = total + lk
            used_masks.append(m)
            step_losses.append(float(lk.detach()))
            if k < n_steps:
                x_hat = out * sigma_c + clim
                x_prev, x_t = x_t, (x_hat - mu) / sigma
        return total / n_steps, used_masks, step_losses

    def _update(self, value: torch.Tensor, step: int) -> float:
        lr = lr_at(min(step, self.phase.schedule.total_steps), self.phase.schedule)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        value.backward()
        if self.phase.grad_clip:
            torch.nn.utils.clip_grad_norm_(
                [p for p in self.model.parameters() if p.requires_grad], self.phase.grad_clip)
        self.optimizer.step()
        return lr

    def pretrain_step(self, step: int, anchors: list[int] | None = None,
                      samples: list[Sample] | None = None) -> StepResult | None:
        self.model.train()
        if samples is None:
            samples = self.sample_batch(step, anchors)
        if not samples:
            return None
        value, masks, step_losses = self.forecast_loss(samples, step, 1)
        lr = self._update(value, step)
        strategy = masks[0].strategy.value if masks[0] is not None else None
        return StepResult(float(value.detach()), lr, strategy,
                          [s.lead_time for s in samples], [s.input_delta for s in samples],
                          masks, step_losses)

    def rollout_step(self, step: int, n_steps: int | None = None,
                     anchors: list[int] | None = None,
                     samples: list[Sample] | None = None) -> StepResult | None:
        n_steps = n_steps or self.phase.rollout_steps
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        self.model.train()
        if samples is None:
            samples = self.sample_batch(step, anchors, n_steps)
        if not samples:
            return None
        value, masks, step_losses = self.forecast_loss(samples, step, n_steps)
        lr = self._update(value, step)
        strategy = masks[0].strategy.value if masks[0] is not None else None
        return StepResult(float(value.detach()), lr, strategy,
                          [s.lead_time for s in samples], [s.input_delta for s in samples],
                          masks, step_losses)

    # ------------------------------------------------------------ loop
    def fit(self, n_steps: int, anchors: list[int] | None = None, run_dir=None,
            start_step: int = 0, checkpoint_every: int = 0, log_every: int = 100,
            rollout: bool = False) -> list[StepResult]:
        history = []
        writer = None
        fh = None
        if run_dir is not None:
            run_dir = Path(run_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            fh = open(run_dir / "metrics.csv", "a", newline="")
            writer = csv.writer(fh)
            if fh.tell() == 0:
                writer.writerow(["step", "lr", "loss", "mask_strategy", "lead_times", "input_deltas"])
        try:
            for step in range(start_step, start_step + n_steps):
                res = (self.rollout_step(step, anchors=anchors) if rollout
                       else self.pretrain_step(step, anchors))
                if res is None:
                    continue
                history.append(res)
                if writer is not None:
                    writer.writerow([step, f"{res.lr:.6e}", f"{res.loss:.6e}", res.strategy or "none",
                                     "|".join(map(str, res.lead_times)),
                                     "|".join(map(str, res.input_deltas))])
                if log_every and step % log_every == 0:
                    logger.info("step %d lr %.3e loss %.5f", step, res.lr, res.loss)
                if run_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
                    from .checkpoint import save_checkpoint
                    save_checkpoint(self.model, run_dir / f"checkpoint_{step + 1:06d}")
        finally:
            if fh is not None:
                fh.close()
        return history


def valid_anchors(data: ForecastData, phase: TrainPhaseConfig, n_steps: int = 1) -> list[int]:
    """Indices whose every lead/delta combination is available."""
    out = []
    for i in range(len(data.dataset)):
        if all(data.valid(Sample(i, lt, dt), n_steps)
               for lt in phase.lead_times for dt in phase.input_deltas):
            out.append(i)
    return out

