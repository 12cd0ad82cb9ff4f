import json

import pytest

from wxfm import cli
from wxfm.config import DEFAULTS, RunConfig, preset
from wxfm.exceptions import ConfigError

SMALL = {
    "data": {"n_steps": 120},
    "model": {"embed_dim": 16, "n_heads": 2, "n_encoder_blocks": 1, "n_decoder_blocks": 1},
    "training": {"pretrain_steps": 3, "rollout_tune_steps": 2, "log_every": 0,
                 "phase2": {"rollout_steps": 2}},
    "eval": {"n_anchors": 3, "max_lead_hours": 12},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_defaults_validate_and_presets_load():
    assert RunConfig().seed == 0
    assert preset("desk").model_config().grid_shape == (24, 48)
    assert preset("paper").model_config().embed_dim == 2560


def test_unknown_key_names_dotted_path():
    with pytest.raises(ConfigError, match="training.phase1.bogus"):
        RunConfig({"training": {"phase1": {"bogus": 1}}})
    with pytest.raises(ConfigError, match="wrong type"):
        RunConfig({"data": {"noise": "loud"}})
    with pytest.raises(ConfigError):
        RunConfig({"model": {"embed_dim": 62}})


def test_config_save_roundtrip(tmp_path):
    cfg = RunConfig({"seed": 4}).with_seed(9)
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back.seed == 9
    assert json.dumps(back.doc) == json.dumps(cfg.doc)
    assert set(back.doc) == set(DEFAULTS)


def test_cli_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert run("param-count", "--config", bad, "--out", tmp_path / "o") == 1
    assert run("no-such-command") == 1
    assert run("build-climatology", "--data", tmp_path / "missing", "--out", tmp_path / "o") == 1

    def boom(args, cfg):
        raise RuntimeError("disk on fire")
    monkeypatch.setitem(cli.COMMANDS, "param-count", boom)
    assert run("param-count", "--out", tmp_path / "o") == 2
    assert "runtime failure" in (tmp_path / "o" / "log.txt").read_text()


def test_param_count_paper(tmp_path, capsys):
    assert run("param-count", "--config", "paper", "--out", tmp_path) == 0
    info = json.loads((tmp_path / "param_count.json").read_text())
    assert info["n_tokens"] == 51840 and info["dynamic_channels"] == 320
    assert info["encoder_local_global"] == [13, 12]
    assert abs(info["analytic_core"] / 2.36e9 - 1) < 0.02
    assert "exact parameters" in capsys.readouterr().out


def test_synth_data_is_seed_deterministic(tmp_path, small_config):
    for name in ("a", "b"):
        assert run("synth-data", "--config", small_config, "--seed", 3, "--out", tmp_path / name) == 0
    for f in sorted((tmp_path / "a" / "dataset").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "dataset" / f.name).read_bytes()
    saved = json.loads((tmp_path / "a" / "config.json").read_text())
    assert saved["seed"] == 3


@pytest.mark.filterwarnings("ignore:climatology:RuntimeWarning")
def test_pipeline_end_to_end(tmp_path, small_config):
    c = ["--config", small_config]
    assert run("synth-data", *c, "--out", tmp_path / "d") == 0
    data = ["--data", tmp_path / "d" / "dataset"]
    assert run("build-climatology", *c, *data, "--out", tmp_path / "c") == 0
    clim = ["--climatology", tmp_path / "c" / "climatology"]
    assert run("compute-stats", *c, *data, *clim, "--out", tmp_path / "s") == 0
    stats = ["--stats", tmp_path / "s" / "normstats"]
    assert run("pretrain", *c, *data, *clim, *stats, "--out", tmp_path / "p") == 0
    assert len((tmp_path / "p" / "metrics.csv").read_text().splitlines()) == 4
    ck = ["--checkpoint", tmp_path / "p" / "checkpoint"]
    assert run("rollout-tune", *c, *data, *clim, *stats, *ck, "--out", tmp_path / "r") == 0
    assert run("rollout-tune", *c, *data, *clim, *stats, "--out", tmp_path / "r2") == 1
    assert run("eval-forecast", *c, *data, *clim, *stats, "--checkpoint",
               tmp_path / "r" / "checkpoint", "--out", tmp_path / "e") == 0
    assert any(p.suffix in (".csv", ".json") for p in (tmp_path / "e").iterdir())
