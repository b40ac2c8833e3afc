"""Motion conditioning: keypoint-heatmap and optical-flow predictors plus their oracles.

Both predictors see the previous five RGB frames stacked along channels
(15 planes) and one extra plane carrying a learned projection of the
256-dim mel vector. The oracles stand in for the pretrained detector and the
dense flow algorithm used to produce ground truth on real footage.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch, UnknownScene

N_KEYPOINTS = 15
HEATMAP_SIZE = 96
N_CONTEXT = 5
MEL_PLANE = 8  # the mel projection is an 8x8 plane resized to the frame


@dataclass
class PredictorInput:
    prev_frames: torch.Tensor  # (B, 15, H, W): five RGB frames, oldest first
    mel_large: torch.Tensor    # (B, 256)

    def __post_init__(self):
        if self.prev_frames.dim() != 4 or self.prev_frames.shape[1] != 3 * N_CONTEXT:
            raise ShapeMismatch(f"prev_frames must be (B, {3 * N_CONTEXT}, H, W), got {tuple(self.prev_frames.shape)}")
        if self.mel_large.dim() != 2 or self.mel_large.shape[0] != self.prev_frames.shape[0]:
            raise ShapeMismatch(f"mel_large must be (B, D) matching the frame batch, got {tuple(self.mel_large.shape)}")

    @classmethod
    def from_frames(cls, frames, mel_large) -> "PredictorInput":
        """Build from a list of five (B, 3, H, W) frames."""
        if len(frames) != N_CONTEXT:
            raise ShapeMismatch(f"need exactly {N_CONTEXT} context frames, got {len(frames)}")
        sizes = {tuple(f.shape[-2:]) for f in frames}
        if len(sizes) != 1:
            raise ShapeMismatch(f"context frames differ in size: {sorted(sizes)}")
        return cls(torch.cat(list(frames), dim=1), mel_large)


class MelPlane(nn.Module):
    def __init__(self, mel_dim: int = 256):
        super().__init__()
        self.proj = nn.Linear(mel_dim, MEL_PLANE * MEL_PLANE)
        self.mel_dim = mel_dim

    def forward(self, mel, size):
        if mel.shape[1] != self.mel_dim:
            raise ShapeMismatch(f"expected {self.mel_dim}-dim mel features, got {mel.shape[1]}")
        # log-mel dB values sit roughly in [-80, 40]; bring them near unit scale
        plane = self.proj(mel / 40.0).view(-1, 1, MEL_PLANE, MEL_PLANE)
        return F.interpolate(plane, size=size, mode="bilinear", align_corners=False)


def _conv_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.2))


class Hourglass(nn.Module):
    """Recursive encoder-decoder with an additive skip at every resolution."""

    def __init__(self, depth: int, channels: int):
        super().__init__()
        self.skip = _conv_block(channels, channels)
        self.down = _conv_block(channels, channels)
        self.inner = Hourglass(depth - 1, channels) if depth > 1 else _conv_block(channels, channels)
        self.up = _conv_block(channels, channels)

    def forward(self, x):
        low = self.inner(self.down(F.max_pool2d(x, 2)))
        up = F.interpolate(self.up(low), size=x.shape[-2:], mode="nearest")
        return self.skip(x) + up


class KeypointHeatmapPredictor(nn.Module):
    """Stacked hourglass producing 15 sigmoid heatmaps on a 96x96 grid."""

    def __init__(self, channels: int = 16, stacks: int = 2, depth: int = 3,
                 n_keypoints: int = N_KEYPOINTS, heatmap_size: int = HEATMAP_SIZE, mel_dim: int = 256):
        super().__init__()
        self.heatmap_size = heatmap_size
        self.mel_plane = MelPlane(mel_dim)
        self.stem = _conv_block(3 * N_CONTEXT + 1, channels)
        self.stages = nn.ModuleList(Hourglass(depth, channels) for _ in range(stacks))
        self.heads = nn.ModuleList(nn.Conv2d(channels, n_keypoints, 1) for _ in range(stacks))
        self.remaps = nn.ModuleList(nn.Conv2d(n_keypoints, channels, 1) for _ in range(stacks - 1))

    def forward(self, inp: PredictorInput, return_all: bool = False):
        size = (self.heatmap_size, self.heatmap_size)
        frames = inp.prev_frames
        if frames.shape[-2:] != size:
            frames = F.interpolate(frames, size=size, mode="bilinear", align_corners=False)
        x = self.stem(torch.cat([frames, self.mel_plane(inp.mel_large, size)], dim=1))
        outputs = []
        for i, (stage, head) in enumerate(zip(self.stages, self.heads)):
            feat = stage(x)
            logits = head(feat)
            outputs.append(torch.sigmoid(logits))
            if i < len(self.remaps):
                x = x + feat + self.remaps[i](logits)
        return outputs if return_all else outputs[-1]


class OpticalFlowPredictor(nn.Module):
    """Three-level U-Net; the output conv is zero-initialized so flow starts at 0."""

    def __init__(self, channels: int = 16, mel_dim: int = 256):
        super().__init__()
        c1, c2, c3 = channels, channels * 2, channels * 4
        self.mel_plane = MelPlane(mel_dim)
        self.enc1 = _conv_block(3 * N_CONTEXT + 1, c1)
        self.enc2 = _conv_block(c1, c2)
        self.enc3 = _conv_block(c2, c3)
        self.dec2 = _conv_block(c3 + c2, c2)
        self.dec1 = _conv_block(c2 + c1, c1)
        self.out = nn.Conv2d(c1, 2, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, inp: PredictorInput):
        frames = inp.prev_frames
        size = frames.shape[-2:]
        if size[0] % 4 or size[1] % 4:
            raise ShapeMismatch(f"frame size must be divisible by 4, got {tuple(size)}")
        e1 = self.enc1(torch.cat([frames, self.mel_plane(inp.mel_large, size)], dim=1))
        e2 = self.enc2(F.avg_pool2d(e1, 2))
        e3 = self.enc3(F.avg_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2.0, mode="nearest"), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2.0, mode="nearest"), e1], dim=1))
        return self.out(d1)


def predict_keypoint_heatmaps(model: KeypointHeatmapPredictor, inp: PredictorInput) -> torch.Tensor:
    return model(inp)


def predict_optical_flow(model: OpticalFlowPredictor, inp: PredictorInput) -> torch.Tensor:
    return model(inp)


def predictor_mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


# --- heatmap decoding and oracles ---------------------------------------------

def heatmaps_to_keypoints(heatmaps) -> np.ndarray:
    """Per-channel argmax as integer (x, y); ties go to the first in row-major order."""
    h = heatmaps.detach().cpu().numpy() if isinstance(heatmaps, torch.Tensor) else np.asarray(heatmaps)
    k, height, width = h.shape[-3:]
    flat = h.reshape(-1, k, height * width).argmax(axis=-1)
    out = np.stack([flat % width, flat // width], axis=-1).astype(np.int64)
    return out.reshape(h.shape[:-3] + (k, 2))


def landmarks_to_grid(landmarks_norm: np.ndarray, size: int = HEATMAP_SIZE) -> np.ndarray:
    """Normalized [0, 1] (x, y) landmarks to integer pixel centers on a ``size`` grid."""
    grid = np.floor(np.asarray(landmarks_norm, dtype=np.float64) * size).astype(np.int64)
    return np.clip(grid, 0, size - 1)


def gaussian_heatmaps(points: np.ndarray, size: int = HEATMAP_SIZE, sigma: float = 2.0) -> np.ndarray:
    """One isotropic Gaussian per (x, y) point, peak 1.0 at the point."""
    points = np.asarray(points, dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx[None] - points[:, 0, None, None]
    dy = yy[None] - points[:, 1, None, None]
    return np.exp(-(dx ** 2 + dy ** 2) / (2.0 * sigma ** 2)).astype(np.float32)


def keypoint_oracle(frame_meta, sigma: float = 2.0, size: int = HEATMAP_SIZE) -> np.ndarray:
    """Ground-truth heatmaps for a synthetic frame.

    ``frame_meta`` is a mapping (or object) exposing ``landmarks``: fifteen
    normalized (x, y) positions in [0, 1].
    """
    if frame_meta is None:
        raise UnknownScene("no scene metadata supplied")
    landmarks = frame_meta.get("landmarks") if isinstance(frame_meta, Mapping) else getattr(frame_meta, "landmarks", None)
    if landmarks is None:
        raise UnknownScene("scene metadata has no landmarks")
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (N_KEYPOINTS, 2):
        raise UnknownScene(f"expected {N_KEYPOINTS} landmarks, got shape {landmarks.shape}")
    return gaussian_heatmaps(landmarks_to_grid(landmarks, size), size, sigma)


def _to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        # channel-first if the first axis is small, else channel-last
        img = img.mean(axis=0) if img.shape[0] in (1, 3) else img.mean(axis=-1)
    return img


def flow_oracle(frame_a, frame_b, block: int = 4, radius: int = 3) -> np.ndarray:
    """Exhaustive block matching from ``frame_a`` to ``frame_b``.

    For every ``block``-sized tile of ``frame_a`` the integer displacement
    (u, v) with |u|, |v| <= radius minimizing the sum of squared differences
    against ``frame_b`` is chosen; candidates that leave the frame are skipped.
    Ties go to the smallest magnitude, then row-major order (v, then u).
    Returns a (2, H, W) float32 field of (dx, dy) per pixel.
    """
    a, b = _to_gray(frame_a), _to_gray(frame_b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"frames differ in shape: {a.shape} vs {b.shape}")
    height, width = a.shape
    candidates = sorted(
        ((u, v) for v in range(-radius, radius + 1) for u in range(-radius, radius + 1)),
        key=lambda uv: (uv[0] ** 2 + uv[1] ** 2, uv[1], uv[0]),
    )
    flow = np.zeros((2, height, width), dtype=np.float32)
    for y0 in range(0, height, block):
        for x0 in range(0, width, block):
            y1, x1 = min(y0 + block, height), min(x0 + block, width)
            patch = a[y0:y1, x0:x1]
            best, best_cost = (0, 0), np.inf
            for u, v in candidates:
                if y0 + v < 0 or x0 + u < 0 or y1 + v > height or x1 + u > width:
                    continue
                cost = np.sum((b[y0 + v:y1 + v, x0 + u:x1 + u] - patch) ** 2)
                if cost < best_cost:
                    best, best_cost = (u, v), cost
            flow[0, y0:y1, x0:x1] = best[0]
            flow[1, y0:y1, x0:x1] = best[1]
    return flow
