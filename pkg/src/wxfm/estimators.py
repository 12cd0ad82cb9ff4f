"""scikit-learn style wrappers: fit/predict over datasets and head tasks."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Dataset
from .exceptions import DataError
from .heads import (DownscaleModel, DownscaleTask, GWHead, GWHeadConfig, finetune_downscale_step,
                    finetune_gw_step, get_head_preset)
from .model.config import ModelConfig, desk_config
from .model.core import WxCModel
from .stats import ClimatologyAnomaly, compute_norm_stats
from .training import ForecastData, Sample, Trainer, TrainPhaseConfig, valid_anchors


def check_fields(X, name: str = "X", ndim: int = 4, channels: int | None = None) -> np.ndarray:
    """Finite float32 array of the expected rank (and channel count on axis 1)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"{name} has {X.shape[1]} channels, expected {channels}")
    if not np.isfinite(X).all():
        raise DataError(f"{name} contains non-finite values")
    return X


def check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a Dataset, got {type(X).__name__}")
    X.check_finite()
    return X


class WxCForecaster(BaseEstimator):
    """Pretrain a core on a dataset and forecast ``lead_time`` hours ahead."""

    def __init__(self, model_config: ModelConfig | None = None,
                 phase: TrainPhaseConfig | None = None, n_steps: int = 1000,
                 lead_time: int = 6, input_delta: int = -6, window_days: int = 61, seed: int = 0):
        self.model_config = model_config
        self.phase = phase
        self.n_steps = n_steps
        self.lead_time = lead_time
        self.input_delta = input_delta
        self.window_days = window_days
        self.seed = seed

    def fit(self, X: Dataset, y=None):
        X = check_dataset(X)
        torch.manual_seed(self.seed)
        cfg = self.model_config or desk_config()
        phase = self.phase or TrainPhaseConfig()
        anomaly = ClimatologyAnomaly(self.window_days).fit(X)
        stats = compute_norm_stats(X).with_sigma_c(anomaly.stats_.sigma_c)
        self.data_ = ForecastData(X, anomaly.climatology_, stats)
        self.model_ = WxCModel(cfg, X.grid)
        self.trainer_ = Trainer(self.model_, self.data_, phase, self.seed)
        self.history_ = self.trainer_.fit(self.n_steps, valid_anchors(self.data_, phase),
                                          log_every=0)
        return self

    def predict(self, X: Dataset, indices=None) -> np.ndarray:
        """Forecasts [N, C, H, W] in physical units, valid at timestamps[i] + lead_time."""
        from .evaluation import predict_states
        check_is_fitted(self, "model_")
        X = check_dataset(X)
        data = ForecastData(X, self.data_.clim, self.data_.stats)
        if indices is None:
            indices = range(len(X))
        samples = [Sample(int(i), self.lead_time, self.input_delta) for i in indices]
        bad = [s.index for s in samples if not data.valid(s)]
        if bad:
            raise DataError(f"no inputs or climatology for indices {bad[:5]}")
        return predict_states(self.model_, data, samples, 1)[0]


class DownscaleRegressor(BaseEstimator):
    """Fine-tune a downscaling head over a frozen core."""

    def __init__(self, core: WxCModel | None = None, preset: str = "merra6x",
                 target: str | None = None, features: int = 32, n_steps: int = 400,
                 batch_size: int = 4, lr: float = 1e-3, seed: int = 0):
        self.core = core
        self.preset = preset
        self.target = target
        self.features = features
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X: DownscaleTask, y=None):
        torch.manual_seed(self.seed)
        check_fields(X.hires, "hires")
        coarse = check_fields(X.coarse, "coarse")
        core = self.core if self.core is not None else WxCModel(desk_config())
        cfg = get_head_preset(self.preset)
        target = self.target or cfg.out_vars[0]
        if target not in X.channel_names:
            raise ValueError(f"target {target!r} not among task channels {X.channel_names}")
        cfg = get_head_preset(self.preset, features=self.features, periodic=X.grid.periodic,
                              out_vars=(target,))
        cfg_out = [X.channel_names.index(target)]
        if cfg.coarsen_factor != X.factor:
            raise ValueError(f"task factor {X.factor} != preset factor {cfg.coarsen_factor}")
        self.out_index_ = cfg_out
        self.model_ = DownscaleModel(core, cfg, coarse.shape[1], X.statics_lr.shape[0],
                                     X.coarse_grid, cfg_out)
        opt = torch.optim.AdamW(self.model_.head_parameters(), lr=self.lr, weight_decay=0.0)
        rng = np.random.default_rng(self.seed)
        n = len(coarse)
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            idx = rng.choice(n, size=min(self.batch_size, n), replace=False)
            c, s_lr, s_hr, t = self._batch(X, idx)
            self.loss_curve_.append(finetune_downscale_step(self.model_, opt, c, s_lr, s_hr, t))
        return self

    def _batch(self, X: DownscaleTask, idx):
        B = len(idx)
        c = torch.from_numpy(np.ascontiguousarray(X.coarse[idx]))
        s_lr = torch.from_numpy(X.statics_lr)[None].expand(B, -1, -1, -1)
        s_hr = torch.from_numpy(X.statics_hr)[None].expand(B, -1, -1, -1)
        t = torch.from_numpy(np.ascontiguousarray(X.hires[idx][:, self.out_index_]))
        return c, s_lr, s_hr, t

    @torch.no_grad()
    def predict(self, X: DownscaleTask) -> np.ndarray:
        check_is_fitted(self, "model_")
        self.model_.eval()
        out = []
        for i in range(0, len(X.coarse), 8):
            c, s_lr, s_hr, _ = self._batch(X, np.arange(i, min(i + 8, len(X.coarse))))
            out.append(self.model_(c, s_lr, s_hr).numpy())
        return np.concatenate(out)


class GWRegressor(BaseEstimator):
    """Fine-tune the flux head: X [N, 4L, H, W] -> y [N, 3L, H, W]."""

    def __init__(self, core: WxCModel | None = None, head_config: GWHeadConfig | None = None,
                 n_steps: int = 2000, batch_size: int = 4, lr: float = 2e-3, seed: int = 0):
        self.core = core
        self.head_config = head_config
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        torch.manual_seed(self.seed)
        cfg = self.head_config or GWHeadConfig(base_channels=16, n_levels=4, grid_shape=(16, 32))
        X = check_fields(X, "X", channels=cfg.in_channels)
        y = check_fields(y, "y", channels=cfg.out_channels)
        if len(X) != len(y):
            raise ValueError("X and y hold different sample counts")
        core = self.core if self.core is not None else WxCModel(desk_config())
        self.model_ = GWHead(core, cfg)
        opt = torch.optim.AdamW(self.model_.head_parameters(), lr=self.lr, weight_decay=0.0)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, self.n_steps, self.lr / 20)
        rng = np.random.default_rng(self.seed)
        self.loss_curve_ = []
        for _ in range(self.n_steps):
            idx = rng.choice(len(X), size=min(self.batch_size, len(X)), replace=False)
            self.loss_curve_.append(finetune_gw_step(self.model_, opt, torch.from_numpy(X[idx]),
                                                     torch.from_numpy(y[idx])))
            sched.step()
        return self

    @torch.no_grad()
    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_fields(X, "X", channels=self.model_.cfg.in_channels)
        self.model_.eval()
        return np.concatenate([self.model_(torch.from_numpy(X[i:i + 8])).numpy()
                               for i in range(0, len(X), 8)])
