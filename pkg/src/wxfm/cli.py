"""Command-line pipeline: ``wxfm <command> --config PATH --seed INT --out DIR``.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
Every run writes its resolved config and a plain-text log into ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from datetime import timedelta
from pathlib import Path

import numpy as np
import torch

from .catalog import Grid, get_catalog
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SynthSettings, generate_synthetic, load_dataset, parse_time, save_dataset
from .exceptions import ConfigError, DataError

logger = logging.getLogger("wxfm")


# --------------------------------------------------------------------------
# shared plumbing
# --------------------------------------------------------------------------

def _setup(args) -> RunConfig:
    cfg = RunConfig.load(args.config).with_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    handler = logging.FileHandler(out / "log.txt", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root = logging.getLogger()
    root.handlers = [h for h in root.handlers if not isinstance(h, logging.FileHandler)]
    root.addHandler(handler)
    root.setLevel(getattr(logging, args.log_level.upper()))
    if args.workers:
        torch.set_num_threads(args.workers)
    torch.manual_seed(cfg.seed)
    logger.info("command %s seed %d out %s", args.command, cfg.seed, out)
    return cfg


def _synth_settings(cfg: RunConfig) -> SynthSettings:
    d = cfg.data
    return SynthSettings(noise=d["noise"], cycles=d["cycles"], modes=d["modes"],
                         anomaly=d["anomaly"], advect_deg_per_hour=d["advect_deg_per_hour"],
                         storm=d["storm"])


def _make_dataset(cfg: RunConfig):
    d = cfg.data
    return generate_synthetic(cfg.seed, get_catalog(d["catalog"]), Grid.regular(*d["grid"]),
                              d["n_years"], d["cadence_hours"], n_steps=d["n_steps"],
                              start=parse_time(d["start"]), settings=_synth_settings(cfg))


def _dataset(args, cfg: RunConfig):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    logger.info("no --data given; generating the synthetic dataset from the config")
    return _make_dataset(cfg)


def _forecast_data(args, cfg: RunConfig):
    from .stats import Climatology, NormStats, build_climatology, compute_anomaly_stats, \
        compute_norm_stats
    from .training import ForecastData
    ds = _dataset(args, cfg)
    if getattr(args, "climatology", None):
        clim = Climatology.load(args.climatology)
    else:
        clim = build_climatology(ds, window_days=cfg.data["climatology_window_days"])
    if getattr(args, "stats", None):
        stats = NormStats.load(args.stats)
        if stats.sigma_c is None:
            stats = stats.with_sigma_c(compute_anomaly_stats(ds, clim))
    else:
        stats = compute_norm_stats(ds).with_sigma_c(compute_anomaly_stats(ds, clim))
    return ForecastData(ds, clim, stats)


def _split(anchors: list[int], holdout: float) -> tuple[list[int], list[int]]:
    n_train = int(round(len(anchors) * (1.0 - holdout)))
    return anchors[:n_train], anchors[n_train:]


def _spread(anchors: list[int], n: int) -> list[int]:
    if len(anchors) <= n:
        return anchors
    idx = np.linspace(0, len(anchors) - 1, n).round().astype(int)
    return [anchors[i] for i in idx]


def _core(args, cfg: RunConfig):
    from .model.core import WxCModel
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint)
    logger.info("no --checkpoint given; using a freshly initialised core")
    return WxCModel(cfg.model_config())


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, default=str))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> int:
    ds = _make_dataset(cfg)
    path = save_dataset(ds, Path(args.out) / "dataset")
    logger.info("wrote %d states of shape %s to %s", len(ds), ds.values.shape[1:], path)
    print(path)
    return 0


def cmd_build_climatology(args, cfg: RunConfig) -> int:
    from .stats import build_climatology
    ds = _dataset(args, cfg)
    clim = build_climatology(ds, window_days=cfg.data["climatology_window_days"])
    clim.save(Path(args.out) / "climatology")
    logger.info("climatology table %s from %.2f years", clim.table.shape, clim.years)
    print(Path(args.out) / "climatology")
    return 0


def cmd_compute_stats(args, cfg: RunConfig) -> int:
    from .stats import Climatology, build_climatology, compute_anomaly_stats, compute_norm_stats
    ds = _dataset(args, cfg)
    stats = compute_norm_stats(ds)
    clim = (Climatology.load(args.climatology) if args.climatology
            else build_climatology(ds, window_days=cfg.data["climatology_window_days"]))
    stats = stats.with_sigma_c(compute_anomaly_stats(ds, clim))
    stats.save(Path(args.out) / "normstats")
    rows = [{"channel": n, "mu": float(m), "sigma": float(s), "sigma_c": float(c)}
            for n, m, s, c in zip(ds.catalog.channel_names, stats.mu, stats.sigma, stats.sigma_c)]
    _write_json(Path(args.out) / "normstats.json", rows)
    print(Path(args.out) / "normstats")
    return 0


def _train(args, cfg: RunConfig, phase_n: int) -> int:
    from .model.core import WxCModel
    from .training import Trainer, valid_anchors
    data = _forecast_data(args, cfg)
    phase = cfg.phase(phase_n)
    if phase_n == 1:
        model = (load_checkpoint(args.checkpoint) if args.checkpoint
                 else WxCModel(cfg.model_config(), data.dataset.grid))
        n_steps = cfg.training["pretrain_steps"]
    else:
        if not args.checkpoint:
            raise ConfigError("rollout-tune needs --checkpoint from a pretrain run")
        model = load_checkpoint(args.checkpoint)
        n_steps = cfg.training["rollout_tune_steps"]
    anchors = valid_anchors(data, phase, phase.rollout_steps)
    train, _ = _split(anchors, cfg.data["holdout_fraction"])
    if not train:
        raise DataError("no training anchors: dataset too short for the configured leads")
    trainer = Trainer(model, data, phase, cfg.seed)
    t0 = time.time()
    history = trainer.fit(n_steps, train, run_dir=args.out,
                          checkpoint_every=cfg.training["checkpoint_every"],
                          log_every=cfg.training["log_every"], rollout=phase_n == 2)
    digest = save_checkpoint(model, Path(args.out) / "checkpoint",
                             extra={"phase": phase_n, "steps": n_steps, "seed": cfg.seed,
                                    "parent": checkpoint_hash(args.checkpoint)
                                    if args.checkpoint else None})
    final = history[-1].loss if history else float("nan")
    logger.info("phase %d: %d steps in %.1fs, final loss %.5f, checkpoint %s", phase_n,
                len(history), time.time() - t0, final, digest[:12])
    print(f"final loss {final:.6f}  checkpoint {Path(args.out) / 'checkpoint'}")
    return 0


def cmd_pretrain(args, cfg: RunConfig) -> int:
    return _train(args, cfg, 1)


def cmd_rollout_tune(args, cfg: RunConfig) -> int:
    return _train(args, cfg, 2)


def _eval_anchors(data, cfg: RunConfig, leads, n_steps: int = 1) -> list[int]:
    from .training import Sample
    delta = -6
    ok = [i for i in range(len(data.dataset))
          if all(data.valid(Sample(i, lt, delta), n_steps) for lt in leads)]
    _, test = _split(ok, cfg.data["holdout_fraction"])
    test = test or ok
    if not test:
        raise DataError("no evaluation anchors available")
    return _spread(test, cfg.eval["n_anchors"])


def cmd_eval_reconstruction(args, cfg: RunConfig) -> int:
    from .evaluation import eval_reconstruction
    data = _forecast_data(args, cfg)
    model = _core(args, cfg)
    if model.cfg.swin_shift_encoder:
        logger.info("disabling encoder Swin-shift: masked inputs need unshifted windows")
        model.cfg = model.cfg.replace(swin_shift_encoder=False)
    e = cfg.eval
    anchors = _eval_anchors(data, cfg, e["lead_times"])
    out = Path(args.out)
    for weighted, stem in ((False, "reconstruction"), (True, "reconstruction_latweighted")):
        rep = eval_reconstruction(model, data, anchors, e["ratios"], e["strategies"],
                                  e["lead_times"], seed=cfg.seed, lat_weighted=weighted,
                                  n_draws=e["n_draws"])
        rep.to_csv(out / f"{stem}.csv")
        rep.to_json(out / f"{stem}.json")
    logger.info("reconstruction sweep: %d rows over %d anchors", len(rep), len(anchors))
    print(out / "reconstruction.csv")
    return 0


def cmd_eval_forecast(args, cfg: RunConfig) -> int:
    from .evaluation import eval_forecast
    data = _forecast_data(args, cfg)
    model = _core(args, cfg)
    e = cfg.eval
    n_steps = e["max_lead_hours"] // e["step_hours"]
    anchors = _eval_anchors(data, cfg, [e["step_hours"]], n_steps)
    out = Path(args.out)
    for weighted, stem in ((False, "forecast"), (True, "forecast_latweighted")):
        rep = eval_forecast(model, data, anchors, e["max_lead_hours"], e["step_hours"],
                            lat_weighted=weighted)
        rep.to_csv(out / f"{stem}.csv")
        rep.to_json(out / f"{stem}.json")
    print(out / "forecast.csv")
    return 0


def cmd_track_storm(args, cfg: RunConfig) -> int:
    from .evaluation import (TrackFix, fixes_from_list, read_track_csv, track_cyclone,
                             track_errors, write_track_csv)
    data = _forecast_data(args, cfg) if args.checkpoint else None
    ds = data.dataset if data is not None else _dataset(args, cfg)
    names = ds.catalog.channel_names
    if "SLP" not in names:
        raise DataError("dataset has no SLP channel to track")
    if args.reference:
        reference = read_track_csv(args.reference)
    elif "storm_track" in ds.attrs:
        reference = fixes_from_list(ds.attrs["storm_track"])
    else:
        raise DataError("no reference track: pass --reference or use a storm dataset")
    start = parse_time(args.init_time) if args.init_time else reference[0].time
    i0 = ds.index_of(start)
    if i0 is None:
        raise DataError(f"init time {start.isoformat()} not in dataset")
    ref_by_time = {f.time: f for f in reference}
    if start not in ref_by_time:
        raise DataError("reference track has no fix at the init time")
    init = ref_by_time[start]
    step = cfg.eval["track_step_hours"]
    n = args.steps
    slp, u10 = names.index("SLP"), names.index("U10M") if "U10M" in names else None
    if args.checkpoint:
        from .evaluation import predict_states
        from .training import Sample
        model = load_checkpoint(args.checkpoint)
        sample = Sample(i0, step, -6)
        if not data.valid(sample, n):
            raise DataError("dataset does not cover the requested forecast")
        states = np.concatenate([ds.values[i0][None]] +
                                [s for s in predict_states(model, data, [sample], n)])
    else:
        idx = [ds.index_of(start + k * timedelta(hours=step))
               for k in range(n + 1)]
        if any(i is None for i in idx):
            raise DataError("dataset does not cover the requested track period")
        states = ds.values[idx].astype(np.float64)
    times = [start + k * timedelta(hours=step) for k in range(n + 1)]
    wind = np.abs(states[:, u10]) if u10 is not None else None
    track = track_cyclone(states[:, slp], ds.grid, times, TrackFix(init.time, init.lat, init.lon,
                                                                   init.mslp, init.wind),
                          cfg.eval["search_radius_km"], wind)
    out = Path(args.out)
    write_track_csv(track, out / "track.csv")
    errors = track_errors(track, reference)
    with open(out / "track_errors.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["lead_hours", "time", "track_km", "mslp_hPa", "wind_ms"])
        w.writeheader()
        for row in errors:
            w.writerow({**row, "time": row["time"].isoformat()})
    mean_km = float(np.mean([r["track_km"] for r in errors]))
    logger.info("tracked %d fixes; mean track error %.1f km", len(track), mean_km)
    print(f"mean track error {mean_km:.1f} km over {len(errors)} fixes")
    return 0


def cmd_finetune_downscale(args, cfg: RunConfig) -> int:
    from .estimators import DownscaleRegressor
    from .evaluation import rmse, spectral_distance, zonal_power_spectrum
    from .heads import interpolate_baseline, save_head, synth_downscale_task
    d = cfg.finetune["downscale"]
    head_cfg = cfg.downscale_config()
    task = synth_downscale_task(cfg.seed, Grid.regular(*d["grid"]), d["n_samples"],
                                head_cfg.coarsen_factor, d["noise"], head_cfg.smoothing_size)
    train, test = task.split(d["n_train"])
    core = _core(args, cfg)
    reg = DownscaleRegressor(core, d["preset"], task.channel_names[0], d["features"], d["steps"],
                             d["batch_size"], d["lr"], cfg.seed).fit(train)
    pred = reg.predict(test)[:, 0]
    truth = test.hires[:, 0]
    f = task.factor
    base = {m: interpolate_baseline(test.coarse[:, 0], f, m, task.grid.periodic)
            for m in ("nearest", "bilinear")}
    out = Path(args.out)
    rows = [{"method": "model", "rmse": float(rmse(pred[:, None], truth[:, None])[0])}]
    rows += [{"method": m, "rmse": float(rmse(b[:, None], truth[:, None])[0])}
             for m, b in base.items()]
    spectra = {"truth": np.mean([zonal_power_spectrum(x) for x in truth], axis=0),
               "model": np.mean([zonal_power_spectrum(x) for x in pred], axis=0)}
    for m, b in base.items():
        spectra[m] = np.mean([zonal_power_spectrum(x) for x in b], axis=0)
    for r in rows:
        r["spectral_distance_top_third"] = spectral_distance(spectra[r["method"]], spectra["truth"])
    with open(out / "downscale_metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["method", "rmse", "spectral_distance_top_third"])
        w.writeheader()
        w.writerows(rows)
    _write_spectra(out / "downscale_spectra.csv", spectra)
    save_head(reg.model_, out / "head", d["preset"], {"seed": cfg.seed})
    for r in rows:
        logger.info("%s rmse %.4f", r["method"], r["rmse"])
    print(json.dumps(rows))
    return 0


def _write_spectra(path: Path, spectra: dict):
    names = list(spectra)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavenumber"] + names)
        for k in range(len(spectra[names[0]])):
            w.writerow([k] + [f"{spectra[n][k]:.8g}" for n in names])


def cmd_finetune_gw(args, cfg: RunConfig) -> int:
    from .estimators import GWRegressor
    from .heads import save_head, synth_gw_task
    g = cfg.finetune["gw"]
    head_cfg = cfg.gw_config()
    task = synth_gw_task(cfg.seed, g["n_samples"], head_cfg, g["noise"])
    n_train = g["n_samples"] - g["n_test"]
    reg = GWRegressor(_core(args, cfg), head_cfg, g["steps"], g["batch_size"], g["lr"],
                      cfg.seed).fit(task.inputs[:n_train], task.targets[:n_train])
    pred = reg.predict(task.inputs[n_train:])
    test_mse = float(np.mean((pred - task.targets[n_train:]) ** 2))
    summary = {"train_loss_final": float(np.mean(reg.loss_curve_[-50:])),
               "test_mse": test_mse, "noise_floor": task.noise_floor,
               "ratio_to_floor": test_mse / task.noise_floor}
    out = Path(args.out)
    _write_json(out / "gw_metrics.json", summary)
    with open(out / "gw_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(enumerate(reg.loss_curve_))
    save_head(reg.model_, out / "head", "gwflux", {"seed": cfg.seed})
    print(json.dumps(summary))
    return 0


def cmd_spectra(args, cfg: RunConfig) -> int:
    from .evaluation import zonal_power_spectrum
    ds = _dataset(args, cfg)
    var = args.variable or cfg.eval["spectra_variable"]
    c = ds.catalog.channel_index(var)
    idx = np.linspace(0, len(ds) - 1, min(len(ds), 64)).round().astype(int)
    spec = np.mean([zonal_power_spectrum(ds.values[i, c]) for i in idx], axis=0)
    _write_spectra(Path(args.out) / "spectra.csv", {var: spec})
    print(Path(args.out) / "spectra.csv")
    return 0


def cmd_param_count(args, cfg: RunConfig) -> int:
    from .model.core import count_parameters
    mc = cfg.model_config()
    exact, analytic = count_parameters(mc)
    enc, dec = mc.encoder_pattern, mc.decoder_pattern
    info = {"exact_parameters": exact, "analytic_core": analytic,
            "n_windows": mc.n_windows, "tokens_per_window": mc.tokens_per_window,
            "n_tokens": mc.n_tokens, "dynamic_channels": mc.dynamic_channels,
            "encoder_local_global": [enc.count("L"), enc.count("G")],
            "decoder_local_global": [dec.count("L"), dec.count("G")]}
    _write_json(Path(args.out) / "param_count.json", info)
    print(f"exact parameters: {exact:,}")
    print(f"analytic core 12*d^2*blocks: {analytic:.4e}")
    print(f"tokens: {mc.n_windows} windows x {mc.tokens_per_window} = {mc.n_tokens}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "build-climatology": cmd_build_climatology,
    "compute-stats": cmd_compute_stats,
    "pretrain": cmd_pretrain,
    "rollout-tune": cmd_rollout_tune,
    "eval-reconstruction": cmd_eval_reconstruction,
    "eval-forecast": cmd_eval_forecast,
    "track-storm": cmd_track_storm,
    "finetune-downscale": cmd_finetune_downscale,
    "finetune-gw": cmd_finetune_gw,
    "spectra": cmd_spectra,
    "param-count": cmd_param_count,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wxfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file or preset name (desk, paper)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--workers", type=int, default=0, help="cap on torch threads")
        p.add_argument("--log-level", default="info")
        if name not in ("synth-data", "param-count", "finetune-downscale", "finetune-gw"):
            p.add_argument("--data", help="dataset container directory")
        if name in ("compute-stats", "pretrain", "rollout-tune", "eval-reconstruction",
                    "eval-forecast", "track-storm"):
            p.add_argument("--climatology", help="climatology container")
        if name in ("pretrain", "rollout-tune", "eval-reconstruction", "eval-forecast",
                    "track-storm"):
            p.add_argument("--stats", help="normstats container")
        if name in ("pretrain", "rollout-tune", "eval-reconstruction", "eval-forecast",
                    "track-storm", "finetune-downscale", "finetune-gw"):
            p.add_argument("--checkpoint", help="core checkpoint directory")
        if name == "track-storm":
            p.add_argument("--reference", help="reference track CSV")
            p.add_argument("--init-time", help="ISO time of the first fix")
            p.add_argument("--steps", type=int, default=8, help="number of track steps")
        if name == "spectra":
            p.add_argument("--variable", help="channel name, e.g. T2M")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = _setup(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, DataError, FileNotFoundError) as err:
        logger.error("validation error: %s", err)
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - report any failure as a runtime error
        logger.exception("runtime failure")
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
