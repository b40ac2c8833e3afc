"""Training objectives and the adaptive-moment optimizer step."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ExtractorMissing, OddHeight, ShapeMismatch, StructureMismatch

ADAM_LR = 0.002
ADAM_BETAS = (0.0, 0.9)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    w_gan: float = 1.0
    w_cam: float = 1.0
    w_recon: float = 10.0
    w_fm: float = 10.0
    w_perc: float = 1.0
    w_pred: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _as_list(x) -> list[torch.Tensor]:
    return [x] if isinstance(x, torch.Tensor) else list(x)


def adversarial_loss(real_logits, fake_logits, side: str = "discriminator", saturating: bool = False) -> torch.Tensor:
    """Cross-entropy GAN objective averaged over patches, then over scales.

    Discriminator side: ``-log D(real) - log(1 - D(fake))``. Generator side
    defaults to the non-saturating ``-log D(fake)``; ``saturating=True`` gives
    the literal minimax term ``log(1 - D(fake))``. ``real_logits`` is ignored on
    the generator side.
    """
    fakes = _as_list(fake_logits)
    if side == "discriminator":
        reals = _as_list(real_logits)
        if len(reals) != len(fakes):
            raise StructureMismatch(f"{len(reals)} real scales vs {len(fakes)} fake scales")
        terms = [F.softplus(-r).mean() + F.softplus(f).mean() for r, f in zip(reals, fakes)]
    elif side == "generator":
        if saturating:
            terms = [-F.softplus(f).mean() for f in fakes]
        else:
            terms = [F.softplus(-f).mean() for f in fakes]
    else:
        raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")
    return torch.stack(terms).mean()


def cam_loss(cam_real, cam_fake, side: str = "discriminator", saturating: bool = False) -> torch.Tensor:
    """The same cross-entropy form applied to per-scale CAM logits."""
    return adversarial_loss(cam_real, cam_fake, side, saturating)


def recon_lower_half(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over rows ``[H/2, H)`` of every channel."""
    if real.shape != fake.shape:
        raise ShapeMismatch(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    h = real.shape[-2]
    if h % 2:
        raise OddHeight(f"image height must be even, got {h}")
    return (real[..., h // 2:, :] - fake[..., h // 2:, :]).abs().mean()


def feature_matching_loss(real_features, fake_features) -> torch.Tensor:
    """Sum over scales and layers of the per-element mean L1 distance."""
    if len(real_features) != len(fake_features):
        raise StructureMismatch(f"{len(real_features)} real scales vs {len(fake_features)} fake scales")
    total = None
    for r_layers, f_layers in zip(real_features, fake_features):
        r_layers, f_layers = _as_list(r_layers), _as_list(f_layers)
        if len(r_layers) != len(f_layers):
            raise StructureMismatch(f"{len(r_layers)} real layers vs {len(f_layers)} fake layers")
        for r, f in zip(r_layers, f_layers):
            if r.shape != f.shape:
                raise StructureMismatch(f"layer shapes differ: {tuple(r.shape)} vs {tuple(f.shape)}")
            term = (r.detach() - f).abs().mean()
            total = term if total is None else total + term
    if total is None:
        raise StructureMismatch("no features to match")
    return total


class FeatureExtractor(Protocol):
    def __call__(self, x: torch.Tensor) -> Sequence[torch.Tensor]: ...


class RandomConvExtractor(nn.Module):
    """Frozen, randomly initialized conv stack used as a perceptual feature proxy.

    Drop-in replacement slot for a pretrained network: anything callable that
    maps an image batch to a list of feature maps works with
    :func:`perceptual_loss`.
    """

    def __init__(self, channels: Sequence[int] = (16, 32, 32), in_channels: int = 3, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], in_channels
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.layers:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def perceptual_loss(real: torch.Tensor, fake: torch.Tensor, fx: FeatureExtractor | None, lam: float = 1.0) -> torch.Tensor:
    if fx is None:
        raise ExtractorMissing("perceptual loss needs a feature extractor")
    if lam == 0:
        return fake.new_zeros(())
    real_feats = fx(real)
    fake_feats = fx(fake)
    if len(real_feats) != len(fake_feats):
        raise StructureMismatch("extractor returned different layer counts")
    total = fake.new_zeros(())
    for r, f in zip(real_feats, fake_feats):
        total = total + (r.detach() - f).abs().mean()
    return lam * total


LOSS_COMPONENTS = ("gan", "cam", "recon", "fm", "perc", "pred")


def total_generator_loss(parts: Mapping[str, torch.Tensor | float], weights: LossWeights):
    """Weighted sum of the named parts; returns ``(total, {name: float(part)})``."""
    w = weights.as_dict()
    total = None
    report = {}
    for name, value in parts.items():
        key = f"w_{name}"
        if key not in w:
            raise KeyError(f"no weight for loss component {name!r}")
        term = w[key] * value
        total = term if total is None else total + term
        report[name] = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if total is None:
        total = torch.zeros(())
    return total, report


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list | None = None
    v: list | None = None


def optimizer_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
                   lr: float = ADAM_LR, betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
    """Functional bias-corrected Adam; returns new parameter tensors and mutates ``state``."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
    if state.m is None:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (torch.sqrt(v_hat) + eps))
    return out


def make_optimizer(params, lr: float = ADAM_LR, betas: tuple[float, float] = ADAM_BETAS) -> torch.optim.Adam:
    """torch Adam with the same defaults, used by the training loop."""
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=ADAM_EPS)
