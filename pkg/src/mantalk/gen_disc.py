"""Generator, multi-scale CAM discriminator and autoregressive inference."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_features import AudioTrack, FeatureConfig, build_feature_frames, stack_frames
from .errors import CheckpointMissing, ShapeMismatch
from .man_norm import LEAKY_SLOPE, GateParams, ManConfig, ManResnetBlock, ModalityBundle, _maybe_sn
from .predictors import (
    N_CONTEXT,
    KeypointHeatmapPredictor,
    OpticalFlowPredictor,
    PredictorInput,
    heatmaps_to_keypoints,
)

MOTION_KINDS = ("optical_flow", "keypoint_heatmap")


@dataclass(frozen=True)
class GeneratorConfig:
    frame_size: int = 64
    base_channels: int = 32
    min_channels: int = 8
    n_man_blocks: int = 8
    flow_or_heatmap: str = "optical_flow"
    man: ManConfig = field(default_factory=ManConfig)
    spectral_norm: bool = True
    mel_dim: int = 13
    # 1-based index of the MAN-ResNet block the CAM layer follows
    cam_after_block: int | None = None

    def __post_init__(self):
        fs = self.frame_size
        if fs < 32 or fs & (fs - 1):
            raise ValueError(f"frame_size must be a power of two >= 32, got {fs}")
        if self.n_man_blocks < 1:
            raise ValueError("n_man_blocks must be >= 1")
        if self.flow_or_heatmap not in MOTION_KINDS:
            raise ValueError(f"flow_or_heatmap must be one of {MOTION_KINDS}")
        if self.n_upsamples > self.n_man_blocks:
            raise ValueError(f"{self.n_man_blocks} blocks cannot reach {fs}px from a 4x4 seed")
        motion_channels = 2 if self.flow_or_heatmap == "optical_flow" else 15
        if self.man.motion_channels != motion_channels:
            object.__setattr__(self, "man", replace(self.man, motion_channels=motion_channels))

    @property
    def n_upsamples(self) -> int:
        return int(math.log2(self.frame_size // 4))

    @property
    def cam_position(self) -> int:
        return self.cam_after_block if self.cam_after_block is not None else max(1, self.n_man_blocks - 1)

    def upsample_after(self) -> list[int]:
        """0-based block indices followed by a 2x nearest upsample, spread evenly."""
        k, n = self.n_upsamples, self.n_man_blocks
        picks: list[int] = []
        for i in range(k):
            idx = min(n - 1, max(0, round((i + 1) * n / (k + 1)) - 1))
            while idx in picks:
                idx += 1
            picks.append(idx)
        if picks and picks[-1] >= n:
            picks = list(range(n - k, n))
        return picks

    def channel_schedule(self) -> list[tuple[int, int]]:
        ups = set(self.upsample_after())
        chans, level, c_in = [], 0, self.base_channels
        for i in range(self.n_man_blocks):
            c_out = max(self.base_channels >> level, self.min_channels)
            chans.append((c_in, c_out))
            c_in = c_out
            if i in ups:
                level += 1
        return chans


@dataclass
class CamOutput:
    features: torch.Tensor
    logit: torch.Tensor         # (B,)
    attention_map: torch.Tensor  # (B, H, W), nonnegative


class CamLayer(nn.Module):
    """Class-activation layer over concatenated global average and max pooling.

    The pooled descriptors are scored by two weight vectors (one per pooling)
    whose sum plus a bias is the logit; the same vectors reweight the feature
    channels, and a 1x1 conv fuses the two reweighted copies back to C
    channels.
    """

    def __init__(self, channels: int):
        super().__init__()
        bound = 1.0 / math.sqrt(channels)
        self.w_avg = nn.Parameter(torch.empty(channels).uniform_(-bound, bound))
        self.w_max = nn.Parameter(torch.empty(channels).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(1))
        self.fuse = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> CamOutput:
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        logit = avg @ self.w_avg + mx @ self.w_max + self.bias
        weighted_avg = x * self.w_avg[None, :, None, None]
        weighted_max = x * self.w_max[None, :, None, None]
        features = F.leaky_relu(self.fuse(torch.cat([weighted_avg, weighted_max], dim=1)), LEAKY_SLOPE)
        attention = torch.relu((weighted_avg + weighted_max).sum(dim=1))
        return CamOutput(features, logit, attention)


def cam_layer(layer: CamLayer, x: torch.Tensor) -> CamOutput:
    return layer(x)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        sn = cfg.spectral_norm
        self.stem = nn.Linear(cfg.mel_dim, cfg.base_channels * 16)
        self.shared_gate = GateParams() if cfg.man.shared_gate else None
        schedule = cfg.channel_schedule()
        self.blocks = nn.ModuleList(
            ManResnetBlock(cin, cout, cfg.man, self.shared_gate, spectral_norm=sn) for cin, cout in schedule
        )
        self.upsample_after = set(cfg.upsample_after())
        c_last = schedule[-1][1]
        self.cam = CamLayer(schedule[cfg.cam_position - 1][1])
        self.head_0 = _maybe_sn(nn.Conv2d(c_last, c_last, 3, padding=1), sn)
        self.head_1 = _maybe_sn(nn.Conv2d(c_last, 3, 3, padding=1), sn)
        self.last_cam: CamOutput | None = None

    def man_blocks(self):
        for block in self.blocks:
            yield block.norm_0
            yield block.norm_1

    def forward(self, mel_small: torch.Tensor, bundle: ModalityBundle) -> torch.Tensor:
        if mel_small.dim() != 2 or mel_small.shape[1] != self.cfg.mel_dim:
            raise ShapeMismatch(f"expected (B, {self.cfg.mel_dim}) mel features, got {tuple(mel_small.shape)}")
        x = self.stem(mel_small / 40.0).view(-1, self.cfg.base_channels, 4, 4)
        for i, block in enumerate(self.blocks):
            x = block(x, bundle)
            if i + 1 == self.cfg.cam_position:
                self.last_cam = self.cam(x)
                x = self.last_cam.features
            if i in self.upsample_after:
                x = F.interpolate(x, scale_factor=2.0, mode="nearest")
        if x.shape[-1] != self.cfg.frame_size:
            raise ShapeMismatch(f"generator produced {x.shape[-1]}px, expected {self.cfg.frame_size}px")
        x = self.head_0(F.leaky_relu(x, LEAKY_SLOPE))
        x = self.head_1(F.leaky_relu(x, LEAKY_SLOPE))
        return torch.tanh(x)


def generate_frame(gen: Generator, mel_small: torch.Tensor, bundle: ModalityBundle) -> torch.Tensor:
    return gen(mel_small, bundle)


# --- discriminator -------------------------------------------------------------

@dataclass
class ScaleOutput:
    patch_logits: torch.Tensor
    cam_logit: torch.Tensor
    features: list[torch.Tensor]


@dataclass
class DiscriminatorOutput:
    per_scale: list[ScaleOutput]

    @property
    def patch_logits(self):
        return [s.patch_logits for s in self.per_scale]

    @property
    def cam_logits(self):
        return [s.cam_logit for s in self.per_scale]

    @property
    def features(self):
        return [s.features for s in self.per_scale]


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int = 3, channels: int = 32, spectral_norm: bool = True):
        super().__init__()
        c1, c2, c3 = channels, channels * 2, channels * 4
        self.convs = nn.ModuleList([
            _maybe_sn(nn.Conv2d(in_channels, c1, 4, stride=2, padding=1), spectral_norm),
            _maybe_sn(nn.Conv2d(c1, c2, 4, stride=2, padding=1), spectral_norm),
            _maybe_sn(nn.Conv2d(c2, c3, 3, stride=1, padding=1), spectral_norm),
        ])
        self.cam = CamLayer(c3)
        self.out = _maybe_sn(nn.Conv2d(c3, 1, 3, stride=1, padding=1), spectral_norm)

    def forward(self, x) -> ScaleOutput:
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LEAKY_SLOPE)
            feats.append(x)
        cam = self.cam(x)
        return ScaleOutput(self.out(cam.features), cam.logit, feats)


class MultiScaleDiscriminator(nn.Module):
    def __init__(self, scales: int = 2, channels: int = 32, in_channels: int = 3, spectral_norm: bool = True):
        super().__init__()
        if scales < 2:
            raise ValueError("the frame discriminator needs at least 2 scales")
        self.scales = scales
        self.nets = nn.ModuleList(PatchDiscriminator(in_channels, channels, spectral_norm) for _ in range(scales))

    def forward(self, frame: torch.Tensor) -> DiscriminatorOutput:
        outs = []
        x = frame
        for i, net in enumerate(self.nets):
            if i:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            outs.append(net(x))
        return DiscriminatorOutput(outs)


def discriminate(disc: MultiScaleDiscriminator, frame: torch.Tensor) -> DiscriminatorOutput:
    return disc(frame)


# --- the full model and inference ---------------------------------------------

class TalkingHeadModel(nn.Module):
    """Generator + motion predictor + discriminator, plus frozen quantization ranges."""

    def __init__(self, gen_cfg: GeneratorConfig, disc_scales: int = 2, disc_channels: int = 32,
                 predictor_channels: int = 16, feature_cfg: FeatureConfig | None = None):
        super().__init__()
        self.gen_cfg = gen_cfg
        self.feature_cfg = feature_cfg or FeatureConfig()
        self.generator = Generator(gen_cfg)
        if gen_cfg.flow_or_heatmap == "optical_flow":
            self.predictor = OpticalFlowPredictor(predictor_channels)
        else:
            self.predictor = KeypointHeatmapPredictor(predictor_channels)
        self.discriminator = MultiScaleDiscriminator(disc_scales, disc_channels)

    @property
    def uses_heatmaps(self) -> bool:
        return self.gen_cfg.flow_or_heatmap == "keypoint_heatmap"

    def generator_parameters(self):
        return list(self.generator.parameters()) + list(self.predictor.parameters())

    @property
    def uses_motion(self) -> bool:
        return "flow_or_heatmap" in self.gen_cfg.man.enabled_sources

    def step(self, identity, prev_frames, feats: dict):
        """One conditional generation step; returns (frame, predicted motion or None)."""
        motion = None
        if self.uses_motion:
            motion = self.predictor(PredictorInput(prev_frames, feats["mel_large"]))
        bundle = ModalityBundle(identity, motion, feats["mel_large"], feats["pitch_onehot"], feats["energy_onehot"])
        return self.generator(feats["mel_small"], bundle), motion


@dataclass
class GeneratedClip:
    frames: torch.Tensor             # (T, 3, H, W) in [-1, 1]
    fps: int
    keypoints: np.ndarray | None = None  # (T, 15, 2) on the 96 grid, heatmap models only
    first_context: torch.Tensor | None = None


@torch.no_grad()
def run_inference(model: TalkingHeadModel | None, identity: torch.Tensor, track: AudioTrack) -> GeneratedClip:
    """Autoregressive rollout at the model's frame rate.

    The five-frame context is seeded with copies of the identity frame and
    then filled with the model's own outputs.
    """
    if model is None:
        raise CheckpointMissing("no trained model loaded")
    model.eval()
    fcfg = model.feature_cfg
    cols = {k: torch.from_numpy(v) for k, v in stack_frames(build_feature_frames(track, fcfg.fps, fcfg)).items()}
    identity = identity.reshape(1, *identity.shape[-3:]).float()
    size = model.gen_cfg.frame_size
    if identity.shape[-1] != size or identity.shape[-2] != size:
        identity = F.interpolate(identity, size=(size, size), mode="bilinear", align_corners=False)
    context = [identity] * N_CONTEXT
    frames, keypoints, first_context = [], [], None
    for t in range(len(cols["frame_index"])):
        feats = {k: cols[k][t:t + 1] for k in ("mel_small", "mel_large", "pitch_onehot", "energy_onehot")}
        prev = torch.cat(context, dim=1)
        if first_context is None:
            first_context = prev.clone()
        frame, motion = model.step(identity, prev, feats)
        if model.uses_heatmaps and motion is not None:
            keypoints.append(heatmaps_to_keypoints(motion[0]))
        frames.append(frame[0])
        context = context[1:] + [frame]
    return GeneratedClip(
        frames=torch.stack(frames),
        fps=fcfg.fps,
        keypoints=np.stack(keypoints) if keypoints else None,
        first_context=first_context,
    )
