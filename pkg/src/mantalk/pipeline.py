"""Glue between a trained model and the metric report."""
from __future__ import annotations

import numpy as np
import torch

from .gen_disc import GeneratedClip, TalkingHeadModel, run_inference
from .predictors import HEATMAP_SIZE
from .report import metric_report
from .synthetic import VideoClip, to_landmarks68


def keypoints_to_normalized(keypoints: np.ndarray, size: int = HEATMAP_SIZE) -> np.ndarray:
    """Integer (x, y) heatmap cells to normalized cell centres."""
    return (np.asarray(keypoints, dtype=np.float64) + 0.5) / size


def generate_for_clip(model: TalkingHeadModel, clip: VideoClip) -> GeneratedClip:
    return run_inference(model, torch.from_numpy(clip.identity), clip.audio)


def evaluate_generated(gen: GeneratedClip, clip: VideoClip) -> dict:
    pred = gen.frames.numpy()
    pred_lm = None
    if gen.keypoints is not None:
        pred_lm = to_landmarks68(keypoints_to_normalized(gen.keypoints))
    ref_lm = clip.landmarks68() if np.isfinite(clip.landmarks).all() else None
    return metric_report(pred, clip.frames, pred_lm, ref_lm if pred_lm is not None else None, clip.fps)


def identity_baseline(clip: VideoClip) -> dict:
    """The do-nothing reference: the identity frame repeated for every target frame."""
    frames = np.repeat(clip.identity[None], clip.n_frames, axis=0)
    return metric_report(frames, clip.frames, None, None, clip.fps)
