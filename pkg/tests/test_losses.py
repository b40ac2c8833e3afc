import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from conftest import fd_gradcheck
from mantalk.errors import ExtractorMissing, OddHeight, ShapeMismatch, StructureMismatch
from mantalk.losses import (
    ADAM_BETAS,
    ADAM_LR,
    AdamState,
    LossWeights,
    RandomConvExtractor,
    adversarial_loss,
    cam_loss,
    feature_matching_loss,
    make_optimizer,
    optimizer_step,
    perceptual_loss,
    recon_lower_half,
    total_generator_loss,
)
from mantalk.predictors import predictor_mse_loss

LN2 = math.log(2.0)


def _log_sigmoid(z):
    return -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))


# --- adversarial ----------------------------------------------------------------------

def test_adversarial_at_zero_logits():
    z = [torch.zeros(2, 1, 4, 4), torch.zeros(2, 1, 2, 2)]
    assert adversarial_loss(z, z, "discriminator").item() == pytest.approx(2 * LN2, abs=1e-7)
    assert adversarial_loss(None, z, "generator").item() == pytest.approx(LN2, abs=1e-7)
    assert adversarial_loss(None, z, "generator", saturating=True).item() == pytest.approx(-LN2, abs=1e-7)


def test_adversarial_perfect_separation_limit():
    real = [torch.full((1, 1, 3, 3), 40.0)]
    fake = [torch.full((1, 1, 3, 3), -40.0)]
    assert adversarial_loss(real, fake, "discriminator").item() < 1e-12
    assert adversarial_loss(None, real, "generator").item() < 1e-12


def test_adversarial_matches_scalar_loop():
    g = torch.Generator().manual_seed(0)
    real = [torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64) * 3,
            torch.randn(2, 1, 2, 2, generator=g, dtype=torch.float64) * 3]
    fake = [torch.randn_like(r) * 3 for r in real]
    d_terms, g_terms, s_terms = [], [], []
    for r, f in zip(real, fake):
        rv, fv = r.flatten().tolist(), f.flatten().tolist()
        d_terms.append(sum(-_log_sigmoid(x) for x in rv) / len(rv) + sum(-_log_sigmoid(-x) for x in fv) / len(fv))
        g_terms.append(sum(-_log_sigmoid(x) for x in fv) / len(fv))
        s_terms.append(sum(_log_sigmoid(-x) for x in fv) / len(fv))
    assert adversarial_loss(real, fake, "discriminator").item() == pytest.approx(np.mean(d_terms), abs=1e-7)
    assert adversarial_loss(real, fake, "generator").item() == pytest.approx(np.mean(g_terms), abs=1e-7)
    assert adversarial_loss(real, fake, "generator", True).item() == pytest.approx(np.mean(s_terms), abs=1e-7)


def test_cam_loss_is_same_form():
    real = [torch.randn(3), torch.randn(3)]
    fake = [torch.randn(3), torch.randn(3)]
    assert cam_loss(real, fake).item() == adversarial_loss(real, fake).item()
    z = [torch.zeros(4)] * 2
    assert cam_loss(z, z).item() == pytest.approx(2 * LN2, abs=1e-7)


def test_adversarial_structure_checks():
    with pytest.raises(StructureMismatch):
        adversarial_loss([torch.zeros(1)], [torch.zeros(1)] * 2)
    with pytest.raises(ValueError):
        adversarial_loss([torch.zeros(1)], [torch.zeros(1)], "critic")


def test_adversarial_gradients():
    real = [torch.randn(1, 1, 3, 3), torch.randn(1, 1, 2, 2)]
    fake = [torch.randn(1, 1, 3, 3), torch.randn(1, 1, 2, 2)]
    fd_gradcheck(lambda r0, r1, f0, f1: adversarial_loss([r0, r1], [f0, f1], "discriminator"), real + fake)
    fd_gradcheck(lambda f0, f1: adversarial_loss(None, [f0, f1], "generator"), fake)
    fd_gradcheck(lambda f0, f1: cam_loss(None, [f0, f1], "generator", True), [torch.randn(2), torch.randn(2)])


# --- reconstruction ------------------------------------------------------------------------

def test_recon_values():
    x = torch.rand(2, 3, 8, 8)
    assert recon_lower_half(x, x).item() == 0
    y = x.clone()
    y[..., 4:, :] += 0.5
    assert recon_lower_half(x, y).item() == pytest.approx(0.5)


@given(st.integers(0, 10_000), st.integers(1, 8).map(lambda h: 2 * h))
@settings(max_examples=40, deadline=None)
def test_recon_ignores_top_half(seed, h):
    g = torch.Generator().manual_seed(seed)
    real = torch.rand(1, 3, h, 5, generator=g)
    fake = torch.rand(1, 3, h, 5, generator=g)
    noisy = fake.clone()
    noisy[..., : h // 2, :] = torch.randn(1, 3, h // 2, 5, generator=g) * 100
    assert recon_lower_half(real, noisy).item() == recon_lower_half(real, fake).item()


def test_recon_errors():
    with pytest.raises(OddHeight):
        recon_lower_half(torch.zeros(1, 3, 5, 4), torch.zeros(1, 3, 5, 4))
    with pytest.raises(ShapeMismatch):
        recon_lower_half(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 2))


def test_recon_gradient():
    fd_gradcheck(recon_lower_half, [torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)])


# --- feature matching -------------------------------------------------------------------------

def test_feature_matching_unit_gap():
    a = torch.zeros(1, 1, 2, 2)
    assert feature_matching_loss([[a]], [[a + 1]]).item() == 1.0


def test_feature_matching_matches_nested_loops():
    g = torch.Generator().manual_seed(1)
    real = [[torch.randn(1, 2, 3, 3, generator=g), torch.randn(1, 4, 2, 2, generator=g)] for _ in range(2)]
    fake = [[torch.randn_like(t) for t in scale] for scale in real]
    want = 0.0
    for rs, fs in zip(real, fake):
        for r, f in zip(rs, fs):
            rv, fv = r.flatten().tolist(), f.flatten().tolist()
            want += sum(abs(x - y) for x, y in zip(rv, fv)) / len(rv)
    assert feature_matching_loss(real, fake).item() == pytest.approx(want, rel=1e-6)


def test_feature_matching_identical_is_zero():
    feats = [[torch.randn(1, 3, 4, 4)], [torch.randn(1, 3, 2, 2)]]
    assert feature_matching_loss(feats, feats).item() == 0


def test_feature_matching_structure_checks():
    a = torch.zeros(1, 1, 2, 2)
    with pytest.raises(StructureMismatch):
        feature_matching_loss([[a]], [[a], [a]])
    with pytest.raises(StructureMismatch):
        feature_matching_loss([[a]], [[a, a]])
    with pytest.raises(StructureMismatch):
        feature_matching_loss([[a]], [[torch.zeros(1, 1, 3, 3)]])


def test_feature_matching_gradient():
    real = [[torch.randn(1, 2, 3, 3)], [torch.randn(1, 1, 3, 3)]]
    fd_gradcheck(lambda f0, f1: feature_matching_loss(real, [[f0], [f1]]),
                 [torch.randn(1, 2, 3, 3), torch.randn(1, 1, 3, 3)])


# --- perceptual ----------------------------------------------------------------------------------

class TwoLayer(nn.Module):
    def __init__(self):
        super().__init__()
        self.a = nn.Conv2d(3, 2, 1, bias=False)
        self.b = nn.Conv2d(2, 1, 1, bias=False)
        with torch.no_grad():
            self.a.weight.copy_(torch.tensor([[1.0, 0, 0], [0, 1, -1]]).view(2, 3, 1, 1))
            self.b.weight.copy_(torch.tensor([[2.0, 1.0]]).view(1, 2, 1, 1))

    def forward(self, x):
        h = self.a(x)
        return [h, self.b(h)]


def test_perceptual_identical_and_zero_weight():
    fx = RandomConvExtractor()
    x = torch.rand(1, 3, 16, 16)
    assert perceptual_loss(x, x, fx).item() == 0
    assert perceptual_loss(x, torch.rand(1, 3, 16, 16), fx, lam=0.0).item() == 0


def test_perceptual_with_toy_extractor():
    real = torch.zeros(1, 3, 1, 1)
    fake = torch.tensor([1.0, 2.0, 3.0]).view(1, 3, 1, 1)
    # layer 1: (1, 2 - 3) -> mean |.| = 1; layer 2: 2*1 + (-1) = 1
    assert perceptual_loss(real, fake, TwoLayer(), lam=0.5).item() == pytest.approx(0.5 * (1.0 + 1.0))


def test_perceptual_needs_extractor():
    with pytest.raises(ExtractorMissing):
        perceptual_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), None)


def test_random_extractor_is_frozen_and_seeded():
    a, b = RandomConvExtractor(seed=5), RandomConvExtractor(seed=5)
    assert all(not p.requires_grad for p in a.parameters())
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_perceptual_gradient():
    fx = RandomConvExtractor(channels=(4, 4)).double()
    real = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    fd_gradcheck(lambda f: perceptual_loss(real, f, fx, 1.0), [torch.rand(1, 3, 8, 8)])


def test_predictor_mse_gradient():
    fd_gradcheck(predictor_mse_loss, [torch.randn(1, 2, 4, 4), torch.randn(1, 2, 4, 4)])


# --- total -----------------------------------------------------------------------------------------

PARTS = {"gan": 0.7, "cam": 0.3, "recon": 0.25, "fm": 1.5, "perc": 0.4, "pred": 0.05}


def test_total_all_zero_weights():
    total, report = total_generator_loss({k: torch.tensor(v) for k, v in PARTS.items()}, LossWeights(0, 0, 0, 0, 0, 0))
    assert total.item() == 0
    assert report == pytest.approx(PARTS)


def test_total_single_weight():
    w = LossWeights(0, 0, 10.0, 0, 0, 0)
    total, _ = total_generator_loss({k: torch.tensor(v) for k, v in PARTS.items()}, w)
    assert total.item() == pytest.approx(2.5)


@given(st.lists(st.floats(0, 20), min_size=6, max_size=6), st.lists(st.floats(0, 5), min_size=6, max_size=6))
def test_total_is_dot_product(weights, values):
    w = LossWeights(*weights)
    parts = dict(zip(PARTS, (torch.tensor(v, dtype=torch.float64) for v in values)))
    total, _ = total_generator_loss(parts, w)
    assert total.item() == pytest.approx(float(np.dot(weights, values)), rel=1e-9, abs=1e-9)


@given(st.sampled_from(list(PARTS)), st.floats(0, 5), st.floats(0, 5))
def test_total_is_linear_in_each_component(name, a, b):
    w = LossWeights(1.0, 2.0, 3.0, 4.0, 5.0, 6.0)

    def t(v):
        return total_generator_loss({**PARTS, name: v}, w)[0]

    assert float(t(a + b)) == pytest.approx(float(t(a)) + float(t(b)) - float(t(0.0)), abs=1e-9)


def test_total_unknown_component():
    with pytest.raises(KeyError):
        total_generator_loss({"style": torch.tensor(1.0)}, LossWeights())


def test_weights_must_be_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(w_gan=-1.0)


def test_total_gradient():
    w = LossWeights(1.0, 0.5, 10.0, 2.0, 1.0, 3.0)
    fd_gradcheck(lambda x: total_generator_loss(dict(zip(PARTS, x)), w)[0], [torch.rand(6)])


# --- Adam -----------------------------------------------------------------------------------------------

def _adam_scalar(p, grads, lr=ADAM_LR, b1=ADAM_BETAS[0], b2=ADAM_BETAS[1], eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


def test_adam_zero_gradient_is_a_no_op():
    p = torch.randn(5, dtype=torch.float64)
    (q,) = optimizer_step([p], [torch.zeros(5, dtype=torch.float64)], AdamState())
    assert torch.equal(p, q)


def test_adam_first_step_is_signed_lr():
    p = torch.zeros(4, dtype=torch.float64)
    g = torch.tensor([3.0, -0.2, 1e-3, -50.0], dtype=torch.float64)
    (q,) = optimizer_step([p], [g], AdamState())
    assert torch.allclose(q, -ADAM_LR * torch.sign(g), atol=1e-7)


def test_adam_ten_step_trajectory():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(3)
    grads = rng.standard_normal((10, 3))
    state = AdamState()
    p = [torch.tensor(p0)]
    for g in grads:
        p = optimizer_step(p, [torch.tensor(g)], state)
        if state.step == 10:
            break
    for i in range(3):
        want = _adam_scalar(p0[i], grads[:, i])[-1]
        assert abs(p[0][i].item() - want) < 1e-10


def test_torch_adam_agrees_with_functional():
    rng = np.random.default_rng(1)
    p0 = rng.standard_normal(4)
    grads = rng.standard_normal((10, 4))
    param = nn.Parameter(torch.tensor(p0))
    opt = make_optimizer([param])
    state, q = AdamState(), [torch.tensor(p0)]
    for g in grads:
        param.grad = torch.tensor(g)
        opt.step()
        q = optimizer_step(q, [torch.tensor(g)], state)
    assert torch.allclose(param.detach(), q[0], atol=1e-10)


def test_adam_shape_checks():
    with pytest.raises(ShapeMismatch):
        optimizer_step([torch.zeros(2)], [torch.zeros(3)], AdamState())
    with pytest.raises(ShapeMismatch):
        optimizer_step([torch.zeros(2)], [], AdamState())
