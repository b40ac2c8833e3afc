from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import fd_gradcheck, randomize_
from mantalk.audio_features import AudioTrack
from mantalk.config import RunConfig
from mantalk.errors import CheckpointMissing, ShapeMismatch
from mantalk.gen_disc import (
    CamLayer,
    Generator,
    GeneratorConfig,
    MultiScaleDiscriminator,
    cam_layer,
    discriminate,
    generate_frame,
    run_inference,
)
from mantalk.losses import adversarial_loss, make_optimizer
from mantalk.man_norm import ManConfig, ModalityBundle

SMALL = RunConfig(frame_size=32, base_channels=16, min_channels=8, channel_width=8, disc_channels=8,
                  predictor_channels=4, spectral_norm=False)


def gen_inputs(b=1, size=64, motion=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    bundle = ModalityBundle(
        torch.rand(b, 3, size, size, generator=g) * 2 - 1,
        torch.randn(b, motion, size, size, generator=g),
        torch.randn(b, 256, generator=g) * 20,
        torch.zeros(b, 256).index_fill_(1, torch.tensor([40]), 1.0),
        torch.zeros(b, 256).index_fill_(1, torch.tensor([7]), 1.0),
    )
    return torch.randn(b, 13, generator=g) * 20, bundle


# --- CAM layer -----------------------------------------------------------------------

def test_cam_zero_input():
    layer = CamLayer(4)
    with torch.no_grad():
        layer.bias.fill_(0.37)
    out = cam_layer(layer, torch.zeros(2, 4, 3, 3))
    assert torch.allclose(out.logit, torch.full((2,), 0.37))
    assert out.attention_map.abs().max() == 0
    assert out.attention_map.shape == (2, 3, 3)


def test_cam_logit_matches_pool_dot():
    layer = randomize_(CamLayer(4), 1).double()
    x = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    want = layer.bias.item()
    for c in range(4):
        vals = [x[0, c, i, j].item() for i in range(2) for j in range(2)]
        want += layer.w_avg[c].item() * sum(vals) / 4 + layer.w_max[c].item() * max(vals)
    assert layer(x).logit.item() == pytest.approx(want, abs=1e-6)


def test_cam_attention_nonnegative():
    out = CamLayer(6)(torch.randn(3, 6, 5, 5))
    assert out.attention_map.min() >= 0
    assert out.features.shape == (3, 6, 5, 5)


def test_cam_gradient():
    layer = randomize_(CamLayer(4), 2).double()
    fd_gradcheck(lambda x: layer(x).logit, [torch.randn(1, 4, 4, 4)], layer.parameters())
    fd_gradcheck(lambda x: layer(x).features, [torch.randn(1, 4, 4, 4)], layer.parameters())


# --- generator ----------------------------------------------------------------------------

def test_generator_config_checks():
    with pytest.raises(ValueError):
        GeneratorConfig(frame_size=48)
    with pytest.raises(ValueError):
        GeneratorConfig(frame_size=256, n_man_blocks=4)
    assert GeneratorConfig(flow_or_heatmap="keypoint_heatmap").man.motion_channels == 15


def test_generator_upsamples_to_frame_size():
    for fs in (32, 64, 128):
        cfg = GeneratorConfig(frame_size=fs)
        assert len(cfg.upsample_after()) == cfg.n_upsamples
        assert len(set(cfg.upsample_after())) == cfg.n_upsamples
        assert all(0 <= i < cfg.n_man_blocks for i in cfg.upsample_after())


def test_generate_frame_desk_shape_and_range():
    gen = Generator(GeneratorConfig())
    randomize_(gen, 3, 0.5)
    mel, bundle = gen_inputs(2)
    gen.eval()
    with torch.no_grad():
        y = generate_frame(gen, mel, bundle)
    assert y.shape == (2, 3, 64, 64)
    assert y.min() >= -1 and y.max() <= 1


def test_generate_frame_deterministic():
    torch.manual_seed(0)
    gen = Generator(GeneratorConfig()).eval()
    mel, bundle = gen_inputs()
    with torch.no_grad():
        assert torch.equal(gen(mel, bundle), gen(mel, bundle))


def test_generator_rejects_bad_mel():
    gen = Generator(GeneratorConfig(frame_size=32))
    _, bundle = gen_inputs(1, 32)
    with pytest.raises(ShapeMismatch):
        gen(torch.zeros(1, 12), bundle)


def test_generator_overfits_single_sample():
    torch.manual_seed(0)
    cfg = GeneratorConfig(frame_size=32, min_channels=16, man=ManConfig(channel_width=32), spectral_norm=False)
    gen = Generator(cfg)
    mel, bundle = gen_inputs(1, 32, seed=4)
    g = torch.Generator().manual_seed(9)
    target = (torch.rand(1, 3, 4, 4, generator=g) * 1.6 - 0.8).repeat_interleave(8, 2).repeat_interleave(8, 3)
    opt = make_optimizer(gen.parameters())
    for _ in range(500):
        loss = (gen(mel, bundle) - target).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert (gen(mel, bundle) - target).abs().mean().item() < 0.05


# --- discriminator ---------------------------------------------------------------------------

def test_discriminator_scales_halve():
    d = MultiScaleDiscriminator(scales=3, channels=8)
    out = discriminate(d, torch.randn(2, 3, 64, 64))
    assert len(out.per_scale) == 3
    sizes = [p.shape[-1] for p in out.patch_logits]
    assert sizes == [16, 8, 4]
    assert all(c.shape == (2,) for c in out.cam_logits)
    assert len(out.features[0]) == 3


def test_discriminator_is_fully_convolutional():
    d = MultiScaleDiscriminator(channels=8)
    small = d(torch.randn(1, 3, 32, 32)).patch_logits
    big = d(torch.randn(1, 3, 64, 64)).patch_logits
    for s, b in zip(small, big):
        assert b.shape[-1] == 2 * s.shape[-1]


def test_discriminator_needs_two_scales():
    with pytest.raises(ValueError):
        MultiScaleDiscriminator(scales=1)


def test_discriminator_separates_white_from_black():
    torch.manual_seed(0)
    d = MultiScaleDiscriminator(channels=8)
    opt = make_optimizer(d.parameters())
    real = torch.ones(4, 3, 32, 32)
    fake = -torch.ones(4, 3, 32, 32)
    for _ in range(200):
        loss = adversarial_loss(d(real).patch_logits, d(fake).patch_logits, "discriminator")
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        r = torch.cat([p.flatten() for p in d(real).patch_logits]).mean()
        f = torch.cat([p.flatten() for p in d(fake).patch_logits]).mean()
    assert (r - f).item() > 2


# --- inference ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    model = SMALL.build_model()
    randomize_(model.generator, 1, 0.1)
    return model


def _tone(seconds):
    n = int(round(seconds * 16000))
    return AudioTrack(0.3 * np.sin(2 * np.pi * 150 * np.arange(n) / 16000))


def test_inference_one_second(small_model):
    ident = torch.rand(3, 32, 32) * 2 - 1
    out = run_inference(small_model, ident, _tone(1.0))
    assert out.frames.shape == (25, 3, 32, 32)
    assert out.frames.min() >= -1 and out.frames.max() <= 1
    assert out.fps == 25
    assert torch.equal(out.first_context, ident[None].repeat(1, 5, 1, 1))


def test_inference_deterministic(small_model):
    ident = torch.rand(3, 32, 32) * 2 - 1
    a = run_inference(small_model, ident, _tone(0.4))
    b = run_inference(small_model, ident, _tone(0.4))
    assert torch.equal(a.frames, b.frames)


@given(st.integers(1, 12))
@settings(max_examples=6, deadline=None)
def test_inference_frame_count(n):
    torch.manual_seed(0)
    model = SMALL.build_model()
    out = run_inference(model, torch.zeros(3, 32, 32), _tone(n / 25))
    assert len(out.frames) == n


def test_inference_resizes_identity(small_model):
    out = run_inference(small_model, torch.zeros(3, 64, 64), _tone(0.08))
    assert out.frames.shape[-1] == 32


def test_inference_heatmap_model_reports_keypoints():
    torch.manual_seed(0)
    model = replace(SMALL, flow_or_heatmap="keypoint_heatmap").build_model()
    out = run_inference(model, torch.zeros(3, 32, 32), _tone(0.12))
    assert out.keypoints.shape == (3, 15, 2)
    assert out.keypoints.min() >= 0 and out.keypoints.max() < 96


def test_inference_without_model():
    with pytest.raises(CheckpointMissing):
        run_inference(None, torch.zeros(3, 32, 32), _tone(0.04))
