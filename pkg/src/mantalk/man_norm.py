"""Multi-modal adaptive normalization.

A MAN layer instance-normalizes a feature map and then applies a convex
combination of five affine transforms, one per conditioning source::

    y = sum_s rho_s * (gamma_s * x_in + beta_s),    rho = softmax(logits)

Video sources (identity image, optical flow or keypoint heatmaps) produce
spatially varying gamma/beta through small conv nets; audio sources (mel,
pitch one-hot, energy one-hot) produce per-channel gamma/beta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EvenKernel, MissingSource, ShapeMismatch

SOURCES = ("image", "flow_or_heatmap", "mel", "pitch", "energy")
VIDEO_SOURCES = ("image", "flow_or_heatmap")
AUDIO_SOURCES = ("mel", "pitch", "energy")
VIDEO_BRANCHES = ("conv2d", "partial_conv2d", "conv2d_eca")
AUDIO_BRANCHES = ("conv1d", "lstm")

# Network-variant combinations, keyed by the row labels used in ablation tables.
NETWORK_VARIANTS = {
    "2DConv+1dConv": ("conv2d", "conv1d"),
    "Partial2DConv+1dConv": ("partial_conv2d", "conv1d"),
    "2DConv+ECA+1dConv": ("conv2d_eca", "conv1d"),
    "2DConv+LSTM": ("conv2d", "lstm"),
    "Partial2DConv+LSTM": ("partial_conv2d", "lstm"),
    "2DConv+ECA+LSTM": ("conv2d_eca", "lstm"),
}

# Incremental source sets; "OFP" is the optical-flow predictor feeding flow_or_heatmap.
SOURCE_INCREMENTS = {
    "Base Model(BM)": ("image",),
    "BM + OFP+mel": ("image", "flow_or_heatmap", "mel"),
    "BM + OFP+mel+pitch": ("image", "flow_or_heatmap", "mel", "pitch"),
    "BM+OFP+mel+pitch+energy": SOURCES,
}

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ManConfig:
    video_branch: str = "conv2d_eca"
    audio_branch: str = "lstm"
    enabled_sources: tuple[str, ...] = SOURCES
    channel_width: int = 16
    shared_gate: bool = False
    image_channels: int = 3
    motion_channels: int = 2
    audio_dim: int = 256
    eca_kernel: int = 3
    lstm_chunk: int = 16
    eps: float = 1e-5

    def __post_init__(self):
        if self.video_branch not in VIDEO_BRANCHES:
            raise ValueError(f"unknown video branch {self.video_branch!r}; expected one of {VIDEO_BRANCHES}")
        if self.audio_branch not in AUDIO_BRANCHES:
            raise ValueError(f"unknown audio branch {self.audio_branch!r}; expected one of {AUDIO_BRANCHES}")
        enabled = tuple(s for s in SOURCES if s in set(self.enabled_sources))
        unknown = set(self.enabled_sources) - set(SOURCES)
        if unknown:
            raise ValueError(f"unknown sources {sorted(unknown)}")
        if not enabled:
            raise ValueError("at least one source must be enabled")
        object.__setattr__(self, "enabled_sources", enabled)

    @classmethod
    def from_variant(cls, name: str, **kwargs) -> "ManConfig":
        video, audio = NETWORK_VARIANTS[name]
        return cls(video_branch=video, audio_branch=audio, **kwargs)

    def with_sources(self, name_or_sources) -> "ManConfig":
        sources = SOURCE_INCREMENTS.get(name_or_sources, name_or_sources)
        return replace(self, enabled_sources=tuple(sources))


@dataclass
class AffinePair:
    gamma: torch.Tensor
    beta: torch.Tensor
    source_id: str

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape:
            raise ShapeMismatch(f"gamma {tuple(self.gamma.shape)} and beta {tuple(self.beta.shape)} differ")


@dataclass
class ModalityBundle:
    """The five conditioning inputs for one generated frame (batched)."""
    image: torch.Tensor | None = None
    flow_or_heatmap: torch.Tensor | None = None
    mel: torch.Tensor | None = None
    pitch: torch.Tensor | None = None
    energy: torch.Tensor | None = None

    def get(self, source: str) -> torch.Tensor:
        value = getattr(self, source, None)
        if value is None:
            raise MissingSource(f"conditioning source {source!r} is enabled but missing from the bundle")
        return value


# --- functional pieces ---------------------------------------------------------

def instance_normalize(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Standardize each (sample, channel) plane with its population statistics."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def gate_weights(logits: torch.Tensor, enabled: Sequence[str] = SOURCES) -> torch.Tensor:
    """Softmax over the enabled sources; disabled sources get weight exactly 0."""
    mask = torch.tensor([s in enabled for s in SOURCES], device=logits.device)
    masked = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(masked, dim=-1)


def man_combine(x_in: torch.Tensor, affines: Sequence[AffinePair], weights: torch.Tensor) -> torch.Tensor:
    """Convex combination of per-source affine transforms of ``x_in``."""
    if len(affines) != len(weights):
        raise ShapeMismatch(f"{len(affines)} affine pairs but {len(weights)} gate weights")
    out = torch.zeros_like(x_in)
    for pair, w in zip(affines, weights):
        try:
            torch.broadcast_shapes(pair.gamma.shape, x_in.shape)
        except RuntimeError as exc:
            raise ShapeMismatch(
                f"{pair.source_id}: affine shape {tuple(pair.gamma.shape)} does not broadcast to {tuple(x_in.shape)}"
            ) from exc
        out = out + w * (pair.gamma * x_in + pair.beta)
    return out


def eca_attention(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Efficient channel attention with an explicit 1-D kernel of odd length."""
    k = weight.shape[-1]
    if k % 2 == 0:
        raise EvenKernel(f"ECA kernel size must be odd, got {k}")
    desc = x.mean(dim=(2, 3)).unsqueeze(1)  # (B, 1, C)
    w = torch.sigmoid(F.conv1d(desc, weight.view(1, 1, k), bias, padding=k // 2))
    return x * w.squeeze(1)[:, :, None, None]


def _as_mask(mask: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if mask.dim() == 2:
        mask = mask[None, None].expand(x.shape[0], 1, -1, -1)
    elif mask.dim() == 3:
        mask = mask[:, None]
    if mask.shape[-2:] != x.shape[-2:] or mask.shape[1] != 1:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match feature map {tuple(x.shape)}")
    return mask.to(x.dtype)


def partial_conv2d(x: torch.Tensor, mask: torch.Tensor, weight: torch.Tensor,
                   bias: torch.Tensor | None = None, padding: int | None = None):
    """Mask-renormalized convolution.

    Each output is ``W.(x*m) * (in_bounds / covered) + b`` where ``covered`` is
    the number of valid mask entries under the window and ``in_bounds`` the
    number of window taps that fall inside the image, so zero padding at the
    border is not treated as a hole. Windows with no valid entry output 0.
    Returns the output and the updated single-channel mask.
    """
    mask = _as_mask(mask, x)
    k_h, k_w = weight.shape[-2:]
    padding = k_h // 2 if padding is None else padding
    ones = torch.ones(1, 1, k_h, k_w, dtype=x.dtype, device=x.device)
    with torch.no_grad():
        covered = F.conv2d(mask, ones, padding=padding)
        in_bounds = F.conv2d(torch.ones_like(mask), ones, padding=padding)
        new_mask = (covered > 0).to(x.dtype)
        ratio = in_bounds / covered.clamp(min=1.0) * new_mask
    out = F.conv2d(x * mask, weight, None, padding=padding) * ratio
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1) * new_mask
    return out, new_mask


# --- modules -------------------------------------------------------------------

class ECA(nn.Module):
    def __init__(self, k: int = 3):
        super().__init__()
        if k % 2 == 0:
            raise EvenKernel(f"ECA kernel size must be odd, got {k}")
        self.weight = nn.Parameter(torch.empty(k).uniform_(-1.0 / math.sqrt(k), 1.0 / math.sqrt(k)))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return eca_attention(x, self.weight, self.bias)


class PartialConv2d(nn.Conv2d):
    def forward(self, x, mask):
        return partial_conv2d(x, mask, self.weight, self.bias, padding=self.padding[0])


class VideoAffineExtractor(nn.Module):
    """Spatial gamma/beta from an image-like conditioning tensor."""

    def __init__(self, in_channels: int, out_channels: int, variant: str = "conv2d",
                 hidden: int = 16, eca_kernel: int = 3, zero_init: bool = True):
        super().__init__()
        if variant not in VIDEO_BRANCHES:
            raise ValueError(f"unknown video branch {variant!r}")
        self.variant = variant
        self.in_channels = in_channels
        conv_cls = PartialConv2d if variant == "partial_conv2d" else nn.Conv2d
        self.shared = conv_cls(in_channels, hidden, 3, padding=1)
        self.eca = ECA(eca_kernel) if variant == "conv2d_eca" else None
        self.to_gamma = nn.Conv2d(hidden, out_channels, 3, padding=1)
        self.to_beta = nn.Conv2d(hidden, out_channels, 3, padding=1)
        if zero_init:
            for head in (self.to_gamma, self.to_beta):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def forward(self, cond: torch.Tensor, size: tuple[int, int], source_id: str = "image") -> AffinePair:
        if cond.dim() != 4 or cond.shape[1] != self.in_channels:
            raise ShapeMismatch(f"{source_id}: expected (B, {self.in_channels}, H, W), got {tuple(cond.shape)}")
        if cond.shape[-2:] != tuple(size):
            cond = F.interpolate(cond, size=size, mode="bilinear", align_corners=False)
        if self.variant == "partial_conv2d":
            # positions where every channel is exactly zero count as holes
            mask = (cond.detach().abs().sum(dim=1, keepdim=True) > 0).to(cond.dtype)
            h, _ = self.shared(cond, mask)
        else:
            h = self.shared(cond)
        h = F.leaky_relu(h, LEAKY_SLOPE)
        if self.eca is not None:
            h = self.eca(h)
        return AffinePair(self.to_gamma(h), self.to_beta(h), source_id)


class AudioAffineExtractor(nn.Module):
    """Per-channel gamma/beta from a feature vector (mel or one-hot)."""

    def __init__(self, in_dim: int, out_channels: int, variant: str = "conv1d",
                 hidden: int = 16, chunk: int = 16, zero_init: bool = True):
        super().__init__()
        if variant not in AUDIO_BRANCHES:
            raise ValueError(f"unknown audio branch {variant!r}")
        self.variant = variant
        self.in_dim = in_dim
        self.chunk = chunk
        if variant == "conv1d":
            self.body = nn.Conv1d(1, hidden, kernel_size=5, stride=2, padding=2)
        else:
            # the vector is read as a short sequence of ``chunk``-wide steps
            self.body = nn.LSTM(chunk, hidden, batch_first=True)
        self.to_gamma = nn.Linear(hidden, out_channels)
        self.to_beta = nn.Linear(hidden, out_channels)
        if zero_init:
            for head in (self.to_gamma, self.to_beta):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def forward(self, vec: torch.Tensor, source_id: str = "mel") -> AffinePair:
        if vec.dim() != 2 or vec.shape[1] != self.in_dim:
            raise ShapeMismatch(f"{source_id}: expected (B, {self.in_dim}), got {tuple(vec.shape)}")
        if self.variant == "conv1d":
            h = F.leaky_relu(self.body(vec[:, None, :]), LEAKY_SLOPE).mean(dim=-1)
        else:
            pad = (-vec.shape[1]) % self.chunk
            seq = F.pad(vec, (0, pad)).view(vec.shape[0], -1, self.chunk)
            _, (h_n, _) = self.body(seq)
            h = h_n[-1]
        gamma = self.to_gamma(h)[:, :, None, None]
        beta = self.to_beta(h)[:, :, None, None]
        return AffinePair(gamma, beta, source_id)


class GateParams(nn.Module):
    """Five learnable logits; weights are their (masked) softmax."""

    def __init__(self):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(len(SOURCES)))

    def weights(self, enabled: Sequence[str] = SOURCES) -> torch.Tensor:
        return gate_weights(self.logits, enabled)


class ManBlock(nn.Module):
    def __init__(self, channels: int, cfg: ManConfig, gate: GateParams | None = None):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        # a shared gate is owned by the caller and must not be registered twice
        self._shared_gate = [gate] if gate is not None else None
        self.gate = None if gate is not None else GateParams()
        extractors = {}
        for s in cfg.enabled_sources:
            if s in VIDEO_SOURCES:
                in_ch = cfg.image_channels if s == "image" else cfg.motion_channels
                extractors[s] = VideoAffineExtractor(in_ch, channels, cfg.video_branch,
                                                     cfg.channel_width, cfg.eca_kernel)
            else:
                extractors[s] = AudioAffineExtractor(cfg.audio_dim, channels, cfg.audio_branch,
                                                     cfg.channel_width, cfg.lstm_chunk)
        self.extractors = nn.ModuleDict(extractors)
        self.last_weights: torch.Tensor | None = None

    @property
    def gate_params(self) -> GateParams:
        return self._shared_gate[0] if self._shared_gate is not None else self.gate

    def gate_weights(self) -> torch.Tensor:
        return self.gate_params.weights(self.cfg.enabled_sources)

    def affines(self, x: torch.Tensor, bundle: ModalityBundle) -> list[AffinePair]:
        size = tuple(x.shape[-2:])
        pairs = []
        for s in SOURCES:
            if s in self.extractors:
                cond = bundle.get(s)
                ext = self.extractors[s]
                pairs.append(ext(cond, size, s) if s in VIDEO_SOURCES else ext(cond, s))
            else:
                zero = x.new_zeros(1, 1, 1, 1)
                pairs.append(AffinePair(zero, zero, s))
        return pairs

    def forward(self, x: torch.Tensor, bundle: ModalityBundle) -> torch.Tensor:
        x_in = instance_normalize(x, self.cfg.eps)
        weights = self.gate_weights()
        self.last_weights = weights.detach()
        return man_combine(x_in, self.affines(x, bundle), weights)


def _maybe_sn(module: nn.Module, enabled: bool) -> nn.Module:
    return nn.utils.parametrizations.spectral_norm(module) if enabled else module


class ManResnetBlock(nn.Module):
    """x -> MAN -> act -> conv3x3 -> MAN -> act -> conv3x3, plus a (projected) skip."""

    def __init__(self, in_channels: int, out_channels: int, cfg: ManConfig,
                 gate: GateParams | None = None, spectral_norm: bool = False):
        super().__init__()
        mid = min(in_channels, out_channels)
        self.norm_0 = ManBlock(in_channels, cfg, gate)
        self.conv_0 = _maybe_sn(nn.Conv2d(in_channels, mid, 3, padding=1), spectral_norm)
        self.norm_1 = ManBlock(mid, cfg, gate)
        self.conv_1 = _maybe_sn(nn.Conv2d(mid, out_channels, 3, padding=1), spectral_norm)
        self.skip = None
        if in_channels != out_channels:
            self.skip = _maybe_sn(nn.Conv2d(in_channels, out_channels, 1, bias=False), spectral_norm)

    def shortcut(self, x):
        return x if self.skip is None else self.skip(x)

    def forward(self, x, bundle: ModalityBundle):
        h = self.conv_0(F.leaky_relu(self.norm_0(x, bundle), LEAKY_SLOPE))
        h = self.conv_1(F.leaky_relu(self.norm_1(h, bundle), LEAKY_SLOPE))
        return self.shortcut(x) + h
