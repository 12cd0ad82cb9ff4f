import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from wxfm.catalog import Grid
from wxfm.exceptions import ConfigError
from wxfm.masking import MaskSpec, gather, sample_mask
from wxfm.model import (ModelConfig, TransformerBlock, WxCModel, alternating_pattern,
                        block_pattern_counts, count_parameters, desk_config,
                        fourier_position_encoding, paper_config, patchify, predict, swin_shift,
                        swin_unshift, unpatchify)
from wxfm.model.layers import fourier_features

from conftest import tiny_config


def inputs(cfg, B=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    H, W = cfg.grid_shape
    r = lambda c: torch.randn(B, c, H, W, generator=g, dtype=dtype)
    return r(cfg.n_channels), r(cfg.n_channels), r(cfg.n_channels), r(cfg.n_static)


def test_paper_geometry():
    cfg = paper_config()
    assert (cfg.n_windows, cfg.tokens_per_window, cfg.n_tokens) == (216, 240, 51840)
    assert block_pattern_counts(cfg.encoder_pattern) == (13, 12)
    assert block_pattern_counts(cfg.decoder_pattern) == (3, 2)
    assert cfg.dynamic_channels == 320
    assert cfg.window_tokens == (15, 16) and cfg.shift == (7, 8)


def test_patterns_start_and_end_local():
    assert alternating_pattern(5) == list("LGLGL")
    with pytest.raises(ConfigError):
        alternating_pattern(4)
    with pytest.raises(ConfigError):
        desk_config(n_encoder_blocks=4)


def test_config_divisibility_errors():
    with pytest.raises(ConfigError):
        desk_config(grid_shape=(25, 48))
    with pytest.raises(ConfigError):
        desk_config(window_size=(5, 8))
    with pytest.raises(ConfigError):
        desk_config(embed_dim=62)


def test_config_dict_roundtrip():
    cfg = paper_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_patchify_shapes():
    x = torch.zeros(1, 1, 360, 576)
    assert patchify(x, (2, 2), (15, 16)).shape == (1, 216, 240, 4)
    y = torch.zeros(1, 3, 24, 48)
    assert patchify(y, (2, 2), (3, 4)).shape == (1, 24, 12, 12)
    with pytest.raises(ValueError):
        patchify(torch.zeros(1, 1, 25, 48), (2, 2), (3, 4))


def test_patchify_index_arithmetic():
    # brute-force oracle: pixel (i, j) lands in window (i // 6, j // 8), token ((i % 6) // 2, (j % 8) // 2)
    H, W = 24, 48
    x = torch.arange(H * W, dtype=torch.float64).reshape(1, 1, H, W)
    t = patchify(x, (2, 2), (3, 4))
    for i in range(0, H, 5):
        for j in range(0, W, 7):
            w = (i // 6) * 6 + j // 8
            k = ((i % 6) // 2) * 4 + (j % 8) // 2
            f = (i % 2) * 2 + j % 2
            assert t[0, w, k, f].item() == i * W + j


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_patchify_roundtrip_exact(nr, nc, c, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, c, 6 * nr, 8 * nc, generator=g)
    t = patchify(x, (2, 2), (3, 4))
    assert torch.equal(unpatchify(t, (2, 2), (3, 4), x.shape[-2:]), x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5), st.integers(0, 7), st.integers(0, 10_000))
def test_swin_shift_roundtrip(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(1, 12, 12, 2, generator=g)
    s = swin_shift(t, (3, 4), (3, 4), (a, b))
    assert torch.equal(swin_unshift(s, (3, 4), (3, 4), (a, b)), t)


def test_swin_shift_zero_is_identity():
    t = torch.randn(1, 4, 6, 2)
    assert torch.equal(swin_shift(t, (2, 2), (2, 3), (0, 0)), t)


def test_fourier_longitude_periodic():
    a = fourier_features(np.array([10.0, -45.0]), np.array([0.0, 17.5]), 32, 8)
    b = fourier_features(np.array([10.0, -45.0]), np.array([360.0, 377.5]), 32, 8)
    assert np.array_equal(a, b)


def test_fourier_constant_latitude_row():
    f = fourier_features(np.full(5, 30.0), np.linspace(0, 300, 5), 32, 8)
    # latitude harmonics occupy columns 16..31 and are identical along the row
    assert np.ptp(f[:, 16:32], axis=0).max() == 0.0
    assert np.ptp(f[:, :16], axis=0).max() > 0


def test_fourier_injective_on_desk_grid():
    cfg = desk_config()
    g = Grid.regular(*cfg.grid_shape)
    enc = fourier_position_encoding(g.lat, g.lon, cfg.token_size, cfg.window_tokens,
                                    cfg.embed_dim, cfg.harmonics).reshape(-1, cfg.embed_dim)
    assert enc.shape[0] == 288
    d = torch.cdist(enc, enc) + torch.eye(288) * 1e9
    assert d.min() > 0


def test_embed_zero_inputs_gives_encodings_only():
    cfg = tiny_config()
    m = WxCModel(cfg)
    for lin in (m.dynamic_embed, m.context_embed):
        torch.nn.init.zeros_(lin.weight)
        torch.nn.init.zeros_(lin.bias)
    z = torch.zeros(1, cfg.n_channels, *cfg.grid_shape)
    s = torch.zeros(1, cfg.n_static, *cfg.grid_shape)
    tok = m.embed(z, z, z, s, [6], [-3])
    expect = m.pos_enc + m.lead_time_embed.weight[1] + m.input_delta_embed.weight[0]
    assert torch.allclose(tok[0], expect)


def test_embed_linear_in_dynamic_inputs():
    cfg = tiny_config()
    m = WxCModel(cfg).double()
    x, xp, c, s = inputs(cfg, 1, dtype=torch.float64)
    z = torch.zeros_like(x)
    e0 = m.embed(z, z, c, s, 0, -3)
    e1 = m.embed(x, xp, c, s, 0, -3)
    e3 = m.embed(2.5 * x, 2.5 * xp, c, s, 0, -3)
    assert torch.allclose(e3 - e0, 2.5 * (e1 - e0), atol=1e-12)


def test_embed_channel_mismatch():
    cfg = tiny_config()
    m = WxCModel(cfg)
    x, xp, c, s = inputs(cfg, 1)
    with pytest.raises(ConfigError):
        m.embed(x[:, :1], xp, c, s, 0, -3)
    with pytest.raises(ConfigError):
        m.embed(x, xp, c, s[:, :1], 0, -3)


def test_unknown_time_values_rejected():
    cfg = tiny_config()
    m = WxCModel(cfg)
    x, xp, c, s = inputs(cfg, 1)
    with pytest.raises(ConfigError):
        m(x, xp, c, s, 5, -3)
    with pytest.raises(ConfigError):
        m(x, xp, c, s, 6, -4)


def test_attention_rows_sum_to_one():
    for kind in ("L", "G"):
        blk = TransformerBlock(16, 2, kind=kind)
        blk.attn.record = True
        blk(torch.randn(2, 4, 6, 16))
        assert torch.allclose(blk.attn.last_weights.sum(-1), torch.ones(()), atol=1e-6)


def test_single_token_window_is_mlp_residual():
    blk = TransformerBlock(8, 2, kind="L").double().eval()
    x = torch.randn(1, 5, 1, 8, dtype=torch.float64)
    blk.attn.record = True
    blk(x)
    assert torch.all(blk.attn.last_weights == 1.0)


def test_local_block_window_permutation_equivariant():
    blk = TransformerBlock(16, 2, kind="L").eval()
    x = torch.randn(2, 5, 6, 16)
    perm = torch.randperm(5)
    assert torch.allclose(blk(x)[:, perm], blk(x[:, perm]), atol=1e-6)


def test_global_block_definition_and_slot_equivariance():
    g = TransformerBlock(16, 2, kind="G").eval()
    l = TransformerBlock(16, 2, kind="L").eval()
    l.load_state_dict(g.state_dict())
    x = torch.randn(2, 5, 6, 16)
    assert torch.allclose(g(x), l(x.transpose(1, 2)).transpose(1, 2))
    perm = torch.randperm(6)
    assert torch.allclose(g(x)[:, :, perm], g(x[:, :, perm]), atol=1e-6)


def test_global_block_connectivity():
    blk = TransformerBlock(8, 2, kind="G").double().eval()
    x = torch.randn(1, 4, 5, 8, dtype=torch.float64, requires_grad=True)
    out = blk(x)
    out[0, 1, 2].sum().backward()
    touched = x.grad.abs().sum(-1)[0] > 0
    assert touched[:, 2].all()
    assert not touched[:, [0, 1, 3, 4]].any()


def test_encoder_ignores_masked_values():
    cfg = tiny_config()
    m = WxCModel(cfg).eval()
    x, xp, c, s = inputs(cfg, 1)
    for strategy in ("local", "global"):
        mask = sample_mask(5, MaskSpec(strategy, 0.5), cfg.n_windows, cfg.tokens_per_window)
        tok = m.embed(x, xp, c, s, 0, -3)
        vis = torch.from_numpy(mask.visible())[None, :, :, None]
        noisy = torch.where(vis, tok, tok + 10 * torch.randn_like(tok))
        a = m.encode(gather(tok, mask), mask)
        b = m.encode(gather(noisy, mask), mask)
        assert (a - b).abs().max().item() == 0.0


def test_encoder_shift_requires_dense_tokens():
    cfg = tiny_config(swin_shift_encoder=True)
    m = WxCModel(cfg)
    x, xp, c, s = inputs(cfg, 1)
    mask = sample_mask(0, MaskSpec("local", 0.5), cfg.n_windows, cfg.tokens_per_window)
    with pytest.raises(ConfigError):
        m(x, xp, c, s, 0, -3, mask)


def test_zero_head_outputs_zero():
    cfg = tiny_config()
    m = WxCModel(cfg).zero_head_().eval()
    out = m(*inputs(cfg), 0, -3)
    assert out.shape == (2, cfg.n_channels, *cfg.grid_shape)
    assert torch.count_nonzero(out) == 0


def test_paper_scale_output_shape_on_meta():
    cfg = paper_config()
    with torch.device("meta"):
        m = WxCModel(cfg)
        H, W = cfg.grid_shape
        x = torch.empty(1, 160, H, W)
        out = m(x, x, x, torch.empty(1, 8, H, W), 6, -6)
    assert out.shape == (1, 160, 360, 576)


def test_forward_deterministic_in_eval_despite_drop_path():
    cfg = tiny_config(drop_path_rate=0.5)
    m = WxCModel(cfg).eval()
    args = inputs(cfg)
    torch.manual_seed(1)
    a = m(*args, [0, 24], [-3, -12])
    torch.manual_seed(2)
    b = m(*args, [0, 24], [-3, -12])
    assert torch.equal(a, b)
    m.train()
    assert not torch.equal(m(*args, 0, -3), m(*args, 0, -3))


def test_predict_examples():
    assert predict(np.zeros((1, 2, 2)), np.full((1, 2, 2), 10.0), np.array([2.0]))[0, 0, 0] == 10.0
    assert predict(np.ones((1, 2, 2)), np.full((1, 2, 2), 10.0), np.array([2.0]))[0, 0, 0] == 12.0
    rng = np.random.default_rng(0)
    x, c = rng.normal(300, 10, (3, 4, 4)), rng.normal(300, 10, (3, 4, 4))
    sc = rng.uniform(0.5, 5, 3)
    assert np.abs(predict((x - c) / sc[:, None, None], c, sc) - x).max() < 1e-5


def test_parameter_counts():
    exact, analytic = count_parameters(paper_config())
    assert 2.0e9 <= exact <= 2.6e9
    assert analytic == 12 * 2560 ** 2 * 30
    assert abs(analytic / 2.36e9 - 1) < 0.02
    # desk: eight blocks of (2 norms + qkv + proj + fc1 + fc2) plus embeddings and head
    d, hid = 64, 256
    block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * hid + hid) + (hid * d + d)
    rest = (72 * d + d) + (68 * d + d) + 4 * d + 4 * d + d + 2 * d + (d * 36 + 36)
    assert count_parameters(desk_config())[0] == 8 * block + rest == 412004
    zero = desk_config(n_encoder_blocks=0, n_decoder_blocks=0)
    assert count_parameters(zero) == (rest, 0.0)
