import math

import numpy as np
import pytest
import torch
from _numeric import fd_relative_error
from torch.func import functional_call

from dccomix.codec import CodeMatrix
from dccomix.config import preset_model_config
from dccomix.errors import ConfigurationError, InvalidInputError
from dccomix.refenc import (
    CodeFrontend,
    GSTReferenceEncoder,
    MixerBlock,
    MixerReferenceEncoder,
    build_style_encoder,
    code_to_channels,
    encode_style,
    gst_reference_encoder,
    mixer_block_forward,
)


def _codes(rng, D=8, T=75, K=64):
    return CodeMatrix(rng.integers(0, K, size=(D, T)), K, 75.0)


# -- code_to_channels -----------------------------------------------------------


def test_raw_endpoints():
    ch = code_to_channels(CodeMatrix(np.array([[0, 63, 31]]), 64, 75.0))
    assert ch[0, 0] == -1.0 and ch[0, 1] == 1.0
    assert ch[0, 2] == pytest.approx(2 * 31 / 63 - 1, abs=1e-15)
    assert ch[0, 2] == pytest.approx(-0.015873015873, abs=1e-12)


def test_raw_shape_and_monotone(rng):
    ch = code_to_channels(_codes(rng))
    assert ch.shape == (8, 75)
    vals = code_to_channels(CodeMatrix(np.arange(64)[None, :], 64, 75.0))[0]
    assert np.all(np.diff(vals) > 0)


def test_unknown_mode(rng):
    with pytest.raises(ConfigurationError):
        code_to_channels(_codes(rng), "bogus")
    with pytest.raises(ConfigurationError):
        CodeFrontend(8, 64, "bogus")


def test_frontend_matches_code_to_channels(rng):
    codes = _codes(rng)
    fe = CodeFrontend(8, 64).double()
    out = fe(torch.from_numpy(np.array(codes.indices))[None].long())
    # float64 default not set: compare at float32 precision
    np.testing.assert_allclose(out[0].numpy(), code_to_channels(codes), atol=1e-6)


def test_embed_mode_channels(rng):
    fe = CodeFrontend(8, 64, "embed", embed_dim=4)
    out = fe(torch.from_numpy(np.array(_codes(rng).indices))[None])
    assert out.shape == (1, 32, 75)


# -- mixer block ----------------------------------------------------------------


def test_zero_weights_identity():
    block = MixerBlock(4).eval()
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    x = torch.randn(4, 6)
    torch.testing.assert_close(mixer_block_forward(x, block), x, rtol=0, atol=0)


def test_single_frame():
    block = MixerBlock(4).eval()
    y = mixer_block_forward(torch.randn(4, 1), block)
    assert y.shape == (4, 1) and torch.isfinite(y).all()


def _naive_block(x, p):
    """Loop implementation of one pre-norm Mixer block on a C x T array."""
    C, T = x.shape

    def norm(v, w, b):
        out = np.empty_like(v)
        for t in range(T):
            col = v[:, t]
            mu = col.mean()
            var = ((col - mu) ** 2).mean()
            out[:, t] = (col - mu) / math.sqrt(var + 1e-5) * w + b
        return out

    h = norm(x, p["norm_time.norm.weight"], p["norm_time.norm.bias"])
    k = p["time_mix.weight"][:, 0, :]
    K = k.shape[1]
    conv = np.zeros_like(x)
    for c in range(C):
        for t in range(T):
            acc = p["time_mix.bias"][c]
            for j in range(K):
                s = t + j - K // 2
                if 0 <= s < T:
                    acc += k[c, j] * h[c, s]
            conv[c, t] = acc
    x1 = x + conv
    h = norm(x1, p["norm_channel.norm.weight"], p["norm_channel.norm.bias"])
    y = np.zeros_like(x1)
    w1, b1 = p["channel_mix.0.weight"], p["channel_mix.0.bias"]
    w2, b2 = p["channel_mix.3.weight"], p["channel_mix.3.bias"]
    for t in range(T):
        hid = w1 @ h[:, t] + b1
        hid = np.array([0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in hid])
        y[:, t] = w2 @ hid + b2
    return x1 + y


def test_block_matches_naive_oracle():
    torch.manual_seed(3)
    block = MixerBlock(4, kernel_size=3).double().eval()
    with torch.no_grad():
        block.time_mix.weight.copy_(torch.tensor([[[0.5, -1.0, 0.25]], [[1.0, 0.0, 0.0]],
                                                  [[0.0, 0.0, 1.0]], [[0.3, 0.3, 0.3]]], dtype=torch.float64))
        block.norm_time.norm.weight.normal_()
        block.norm_channel.norm.bias.normal_()
    x = torch.randn(4, 6, dtype=torch.float64)
    p = {k: v.detach().numpy() for k, v in block.state_dict().items()}
    np.testing.assert_allclose(mixer_block_forward(x, block).detach().numpy(), _naive_block(x.numpy(), p),
                               rtol=1e-12, atol=1e-12)


def test_block_depthwise():
    block = MixerBlock(4)
    assert block.time_mix.groups == 4 and block.time_mix.weight.shape == (4, 1, 3)


def test_mixer_block_gradients_fd():
    torch.manual_seed(0)
    block = MixerBlock(4).double().eval()
    names = [n for n, _ in block.named_parameters()]
    params = [p.detach().clone().requires_grad_(True) for p in block.parameters()]
    x = torch.randn(1, 4, 6, dtype=torch.float64, requires_grad=True)

    def fn(ts):
        return functional_call(block, dict(zip(names, ts[1:])), (ts[0],))

    assert fd_relative_error(fn, [x] + params) < 1e-4


# -- encode_style ---------------------------------------------------------------


@pytest.fixture
def desk_encoder():
    torch.manual_seed(0)
    return build_style_encoder("mixer", hidden=64).eval()


@pytest.mark.parametrize("T", [1, 2, 75, 600])
def test_style_shape(desk_encoder, rng, T):
    s = encode_style(_codes(rng, T=T), desk_encoder)
    assert s.shape == (64,) and np.all(np.isfinite(s))


def test_style_deterministic(desk_encoder, rng):
    c = _codes(rng)
    np.testing.assert_array_equal(encode_style(c, desk_encoder), encode_style(c, desk_encoder))


def test_style_zero_frames(desk_encoder):
    with pytest.raises(InvalidInputError):
        desk_encoder(torch.zeros(1, 8, 0, dtype=torch.long))
    with pytest.raises(InvalidInputError):
        CodeMatrix(np.zeros((8, 0), dtype=int), 64, 75.0)


def test_time_reversal_changes_embedding(desk_encoder):
    rng = np.random.default_rng(11)
    differ = 0
    for _ in range(100):
        c = _codes(rng, T=int(rng.integers(5, 60)))
        r = CodeMatrix(c.indices[:, ::-1], 64, 75.0)
        differ += not np.allclose(encode_style(c, desk_encoder), encode_style(r, desk_encoder), atol=1e-7)
    assert differ >= 95


def test_codebook_permutation_changes_embedding(desk_encoder):
    rng = np.random.default_rng(12)
    differ = 0
    for _ in range(100):
        c = _codes(rng, T=20)
        perm = rng.permutation(8)
        while np.all(perm == np.arange(8)):
            perm = rng.permutation(8)
        p = CodeMatrix(c.indices[perm], 64, 75.0)
        differ += not np.allclose(encode_style(c, desk_encoder), encode_style(p, desk_encoder), atol=1e-7)
    assert differ >= 95


@pytest.mark.parametrize("seed", range(5))
def test_gradient_reaches_every_parameter(seed):
    torch.manual_seed(seed)
    enc = build_style_encoder("mixer", hidden=16, num_blocks=6)
    codes = torch.randint(0, 64, (2, 8, 30), generator=torch.Generator().manual_seed(seed))
    enc(codes).sum().backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None and torch.count_nonzero(p.grad) > 0, name


def test_padding_does_not_leak(desk_encoder, rng):
    c = torch.from_numpy(np.array(_codes(rng, T=30).indices))[None]
    padded = torch.cat([c, torch.randint(0, 64, (1, 8, 10))], dim=-1)
    a = desk_encoder(c)
    b = desk_encoder(padded, torch.tensor([30]))
    torch.testing.assert_close(a, b, rtol=1e-5, atol=1e-6)


# -- GST encoder ----------------------------------------------------------------


def test_gst_time_reduction():
    enc = GSTReferenceEncoder(80, hidden=32)
    seen = {}

    def hook(module, inputs, output):
        seen["shape"] = output.shape

    enc.convs.register_forward_hook(hook)
    enc.eval()(torch.randn(1, 80, 100))
    assert seen["shape"][2] == math.ceil(100 / 2**6) == 2
    assert int(enc.reduced_length(torch.tensor([100]))) == 2


@pytest.mark.parametrize("T", [64, 100, 257])
def test_gst_output_length(T):
    enc = build_style_encoder("gst", hidden=32, input_kind="spectrogram", spec_channels=80)
    s = gst_reference_encoder(np.random.default_rng(T).standard_normal((80, T)), enc)
    assert s.shape == (32,)


def test_gst_too_short():
    enc = build_style_encoder("gst", hidden=32, input_kind="spectrogram", spec_channels=80)
    with pytest.raises(InvalidInputError):
        gst_reference_encoder(np.zeros((80, 63)), enc)
    with pytest.raises(InvalidInputError):
        gst_reference_encoder(np.full((80, 100), np.nan), enc)


def test_gst_vs_mixer_parameter_gap():
    cfg = preset_model_config("paper_scale")

    def count(kind):
        enc = build_style_encoder(kind, cfg.style_dim, cfg.num_codebooks, cfg.codebook_size,
                                  num_blocks=cfg.refenc_blocks, mixer_channels=cfg.mixer_channels,
                                  gst_filters=tuple(cfg.gst_filters))
        return sum(p.numel() for p in enc.parameters())

    gap = count("gst") - count("mixer")
    assert 0.41e6 * 0.5 <= gap <= 0.41e6 * 1.5


def test_unknown_encoder_kind():
    with pytest.raises(ConfigurationError):
        build_style_encoder("transformer", 64)
    with pytest.raises(ConfigurationError):
        build_style_encoder("mixer", 64, input_kind="text")


def test_mixer_encoder_block_count():
    assert len(MixerReferenceEncoder(8).blocks) == 6
