"""Training examples and the on-disk clip layout.

Layout of a dataset root::

    clips/<id>/frames/00000.png ...   RGB frames at 25 fps
    clips/<id>/audio.wav              mono 16 kHz
    clips/<id>/truth.json             landmarks, blink schedule, EAR (synthetic clips)
    clips/<id>/flow/00000.npy ...     optional, written by ``preprocess-flow``

Real footage (e.g. a GRID-style corpus cropped to faces) can be dropped in
with the same layout; ``truth.json`` is then optional and flow ground truth
comes from ``preprocess-flow``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .audio_features import FeatureConfig, build_feature_frames, read_wav, stack_frames, write_wav
from .errors import IndexOutOfRange, MissingInput
from .predictors import N_CONTEXT, flow_oracle, keypoint_oracle
from .synthetic import VideoClip


@dataclass
class PreparedClip:
    """A clip with its per-frame audio features computed once."""
    clip: VideoClip
    features: dict[str, np.ndarray]

    @classmethod
    def from_clip(cls, clip: VideoClip, feature_cfg: FeatureConfig | None = None) -> "PreparedClip":
        cfg = feature_cfg or FeatureConfig()
        feats = stack_frames(build_feature_frames(clip.audio, clip.fps, cfg))
        if len(feats["frame_index"]) != clip.n_frames:
            raise ValueError(f"{len(feats['frame_index'])} audio frames vs {clip.n_frames} video frames")
        return cls(clip, feats)

    @property
    def n_frames(self) -> int:
        return self.clip.n_frames

    def context_indices(self, t: int) -> list[int]:
        """The five frames preceding ``t``; indices before 0 repeat frame 0."""
        return [max(0, i) for i in range(t - N_CONTEXT, t)]

    def example(self, t: int, with_heatmaps: bool = False) -> dict[str, np.ndarray]:
        if not 0 <= t < self.n_frames:
            raise IndexOutOfRange(f"frame {t} outside clip of {self.n_frames} frames")
        frames = self.clip.frames
        ex = {
            "prev_frames": np.concatenate([frames[i] for i in self.context_indices(t)], axis=0),
            "target": frames[t],
            "identity": self.clip.identity,
            "flow": self.clip.flows[t],
            "mel_small": self.features["mel_small"][t],
            "mel_large": self.features["mel_large"][t],
            "pitch_onehot": self.features["pitch_onehot"][t],
            "energy_onehot": self.features["energy_onehot"][t],
        }
        if with_heatmaps:
            ex["heatmaps"] = self.clip.heatmaps(t)
        return ex


def make_training_batch(clips: Sequence[PreparedClip], t, with_heatmaps: bool = False) -> dict[str, torch.Tensor]:
    """Stack one example per clip; ``t`` is a frame index or one index per clip."""
    ts = [t] * len(clips) if isinstance(t, (int, np.integer)) else list(t)
    if len(ts) != len(clips):
        raise ValueError(f"{len(ts)} frame indices for {len(clips)} clips")
    examples = [c.example(int(i), with_heatmaps) for c, i in zip(clips, ts)]
    return {k: torch.from_numpy(np.stack([e[k] for e in examples]).astype(np.float32)) for k in examples[0]}


def iter_clip_batches(clip: PreparedClip, batch_size: int, with_heatmaps: bool = False) -> Iterator[dict[str, torch.Tensor]]:
    """Every frame of one clip exactly once, in order."""
    for start in range(0, clip.n_frames, batch_size):
        ts = list(range(start, min(start + batch_size, clip.n_frames)))
        yield make_training_batch([clip] * len(ts), ts, with_heatmaps)


# --- image helpers ---------------------------------------------------------------

def to_uint8(frame) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    f = frame.detach().cpu().numpy() if isinstance(frame, torch.Tensor) else np.asarray(frame)
    return np.clip(np.round((f.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(img) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    return (np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def write_frames(directory: str | Path, frames) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = directory / f"{i:05d}.png"
        Image.fromarray(to_uint8(f)).save(p)
        paths.append(p)
    return paths


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"image not found: {path}")
    return from_uint8(np.asarray(Image.open(path).convert("RGB")))


def read_frames(directory: str | Path) -> np.ndarray:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingInput(f"frame directory not found: {directory}")
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise MissingInput(f"no PNG frames in {directory}")
    return np.stack([read_image(p) for p in paths])


# --- dataset directories ----------------------------------------------------------

def write_clip_dir(root: str | Path, clip_id: str, clip: VideoClip) -> Path:
    d = Path(root) / "clips" / clip_id
    write_frames(d / "frames", clip.frames)
    write_wav(d / "audio.wav", clip.audio)
    Image.fromarray(to_uint8(clip.identity)).save(d / "identity.png")
    truth = {
        "fps": clip.fps,
        "landmarks": np.round(clip.landmarks, 6).tolist(),
        "blink_schedule": [list(b) for b in clip.blink_schedule],
        "ear": [round(float(v), 6) for v in clip.ear],
    }
    (d / "truth.json").write_text(json.dumps(truth))
    return d


def read_clip_dir(path: str | Path, flow_block: int = 4, flow_radius: int = 3) -> VideoClip:
    d = Path(path)
    frames = read_frames(d / "frames")
    audio = read_wav(d / "audio.wav")
    truth_path = d / "truth.json"
    truth = json.loads(truth_path.read_text()) if truth_path.exists() else {}
    n = len(frames)
    landmarks = np.asarray(truth.get("landmarks", np.full((n, 15, 2), np.nan)), dtype=np.float64)
    ear = np.asarray(truth.get("ear", np.full(n, np.nan)), dtype=np.float64)
    flow_dir = d / "flow"
    if flow_dir.is_dir():
        flows = np.stack([np.zeros((2,) + frames.shape[-2:], np.float32)] +
                         [np.load(flow_dir / f"{t:05d}.npy") for t in range(1, n)])
    else:
        flows = np.stack([np.zeros((2,) + frames.shape[-2:], np.float32)] +
                         [flow_oracle(frames[t - 1], frames[t], flow_block, flow_radius) for t in range(1, n)])
    identity = read_image(d / "identity.png") if (d / "identity.png").exists() else frames[0]
    blinks = [tuple(b) for b in truth.get("blink_schedule", [])]
    return VideoClip(frames, audio, identity, landmarks, ear, flows, blinks, int(truth.get("fps", 25)))


def list_clip_dirs(root: str | Path) -> list[Path]:
    base = Path(root) / "clips"
    if not base.is_dir():
        raise MissingInput(f"no clips/ directory under {root}")
    return sorted(p for p in base.iterdir() if p.is_dir())


def preprocess_flow(clip_dir: str | Path, block: int = 4, radius: int = 3) -> int:
    """Write ``flow/%05d.npy`` (frame t-1 -> t) next to a clip's frames; returns the count written."""
    d = Path(clip_dir)
    frames = read_frames(d / "frames")
    out = d / "flow"
    out.mkdir(exist_ok=True)
    for t in range(1, len(frames)):
        np.save(out / f"{t:05d}.npy", flow_oracle(frames[t - 1], frames[t], block, radius))
    return max(0, len(frames) - 1)
