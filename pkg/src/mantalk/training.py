"""Adversarial training loop: one discriminator step, then one generator step per batch."""
from __future__ import annotations

import ast
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio_features import FeatureConfig, align_audio_to_frames, compute_energy
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_module_tensors,
    load_optimizer_tensors,
    module_tensors,
    optimizer_tensors,
    save_checkpoint,
)
from .config import RunConfig, config_from_dict
from .dataset import PreparedClip, list_clip_dirs, make_training_batch, read_clip_dir
from .gen_disc import TalkingHeadModel
from .losses import (
    RandomConvExtractor,
    adversarial_loss,
    cam_loss,
    feature_matching_loss,
    make_optimizer,
    perceptual_loss,
    recon_lower_half,
    total_generator_loss,
)
from .predictors import predictor_mse_loss
from .synthetic import synthesize_clip

log = logging.getLogger(__name__)

TRAIN_SEED_STRIDE = 1000
HELD_OUT_SEED = 999_983


def synthetic_clips(cfg: RunConfig, n: int | None = None, seed_offset: int = 0):
    n = cfg.n_clips if n is None else n
    return [
        synthesize_clip(cfg.seed * TRAIN_SEED_STRIDE + seed_offset + i, cfg.clip_seconds,
                        frame_size=cfg.frame_size, head_motion=cfg.head_motion)[0]
        for i in range(n)
    ]


def held_out_clip(cfg: RunConfig, index: int = 0):
    return synthesize_clip(HELD_OUT_SEED + cfg.seed * 17 + index, cfg.clip_seconds,
                           frame_size=cfg.frame_size, head_motion=cfg.head_motion)[0]


def max_window_energy(clips, fps: int = 25) -> float:
    """Largest per-frame energy over a set of clips (the frozen upper quantization bound)."""
    best = 0.0
    for clip in clips:
        for w in align_audio_to_frames(clip.audio, fps):
            best = max(best, compute_energy(w))
    return best if best > 0 else FeatureConfig().energy_range[1]


def _checkpoint_meta(cfg: RunConfig, model: TalkingHeadModel, step: int, opt_meta: dict) -> dict:
    fc = model.feature_cfg
    return {
        "format": "mantalk",
        "config": cfg.to_dict(),
        "step": step,
        "pitch_range": list(fc.pitch_range),
        "energy_range": list(fc.energy_range),
        "optimizers": opt_meta,
    }


def load_model(path: str | Path) -> tuple[TalkingHeadModel, RunConfig, Checkpoint]:
    """Rebuild a model (in eval mode) from a checkpoint."""
    ckpt = load_checkpoint(path)
    cfg = config_from_dict(ckpt.meta["config"])
    fcfg = FeatureConfig(pitch_range=tuple(ckpt.meta["pitch_range"]), energy_range=tuple(ckpt.meta["energy_range"]))
    model = cfg.build_model(fcfg)
    load_module_tensors(model, ckpt.tensors, "model")
    model.eval()
    return model, cfg, ckpt


@dataclass
class StepLosses:
    step: int
    d_total: float
    g_total: float
    parts: dict[str, float]

    def rows(self):
        yield self.step, "d_total", self.d_total
        yield self.step, "g_total", self.g_total
        for k, v in self.parts.items():
            yield self.step, k, v


class Trainer:
    def __init__(self, cfg: RunConfig, clips=None):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        if clips is None:
            clips = self._load_clips()
        energy_hi = cfg.energy_hi if cfg.energy_hi is not None else max_window_energy(clips)
        self.feature_cfg = cfg.feature_config(energy_hi)
        self.clips = [PreparedClip.from_clip(c, self.feature_cfg) for c in clips]
        torch.manual_seed(cfg.seed)
        self.model = cfg.build_model(self.feature_cfg)
        self.weights = cfg.loss_weights()
        self.opt_g = make_optimizer(self.model.generator_parameters(), cfg.lr, (cfg.beta1, cfg.beta2))
        self.opt_d = make_optimizer(self.model.discriminator.parameters(), cfg.lr, (cfg.beta1, cfg.beta2))
        self.perceptual = RandomConvExtractor()
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.history: list[StepLosses] = []

    def _load_clips(self):
        if self.cfg.synthetic:
            return synthetic_clips(self.cfg)
        return [read_clip_dir(d) for d in list_clip_dirs(self.cfg.data_root)][: self.cfg.n_clips]

    # -- batches -------------------------------------------------------------
    def sample_batch(self) -> dict[str, torch.Tensor]:
        idx = self.rng.integers(0, len(self.clips), size=self.cfg.batch_size)
        chosen = [self.clips[i] for i in idx]
        ts = [int(self.rng.integers(0, c.n_frames)) for c in chosen]
        return make_training_batch(chosen, ts, with_heatmaps=self.model.uses_heatmaps)

    @property
    def adversarial(self) -> bool:
        w = self.weights
        return (w.w_gan + w.w_cam + w.w_fm) > 0

    def _motion_target(self, batch):
        return batch["heatmaps"] if self.model.uses_heatmaps else batch["flow"]

    def lr_at(self, step: int) -> float:
        """Constant for the first ``lr_decay_start`` fraction of ``cfg.steps``, then linear to 0."""
        total = self.cfg.steps
        start = self.cfg.lr_decay_start * total
        if step < start or total <= start:
            return self.cfg.lr
        return self.cfg.lr * max(0.0, (total - step) / (total - start))

    def _set_lr(self) -> None:
        lr = self.lr_at(self.step)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    # -- one optimization step ---------------------------------------------------
    def train_step(self, batch: dict[str, torch.Tensor] | None = None) -> StepLosses:
        batch = self.sample_batch() if batch is None else batch
        model, w = self.model, self.weights
        model.train()
        self._set_lr()
        feats = {k: batch[k] for k in ("mel_small", "mel_large", "pitch_onehot", "energy_onehot")}
        target = batch["target"]

        d_total = 0.0
        if self.adversarial:
            with torch.no_grad():
                fake, _ = model.step(batch["identity"], batch["prev_frames"], feats)
            d_real = model.discriminator(target)
            d_fake = model.discriminator(fake)
            loss_d = adversarial_loss(d_real.patch_logits, d_fake.patch_logits, "discriminator")
            if w.w_cam:
                loss_d = loss_d + w.w_cam * cam_loss(d_real.cam_logits, d_fake.cam_logits, "discriminator")
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()
            d_total = loss_d.item()

        fake, motion = model.step(batch["identity"], batch["prev_frames"], feats)
        parts = {"recon": recon_lower_half(target, fake)}
        if self.adversarial:
            model.discriminator.requires_grad_(False)
            d_fake = model.discriminator(fake)
            with torch.no_grad():
                d_real = model.discriminator(target)
            parts["gan"] = adversarial_loss(None, d_fake.patch_logits, "generator", self.cfg.saturating_gan)
            parts["cam"] = cam_loss(None, d_fake.cam_logits, "generator", self.cfg.saturating_gan)
            parts["fm"] = feature_matching_loss(d_real.features, d_fake.features)
            model.discriminator.requires_grad_(True)
        if w.w_perc:
            parts["perc"] = perceptual_loss(target, fake, self.perceptual, 1.0)
        if motion is not None and w.w_pred:
            parts["pred"] = predictor_mse_loss(motion, self._motion_target(batch))
        total, report = total_generator_loss(parts, w)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        self.step += 1
        rec = StepLosses(self.step, d_total, total.item(), report)
        self.history.append(rec)
        return rec

    def train(self, steps: int, loss_csv: str | Path | None = None, checkpoint_path: str | Path | None = None,
              checkpoint_every: int | None = None) -> list[StepLosses]:
        every = checkpoint_every or self.cfg.checkpoint_every
        writer = None
        fh = None
        if loss_csv is not None:
            new = not Path(loss_csv).exists()
            fh = open(loss_csv, "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(["step", "component", "value"])
        try:
            out = []
            for _ in range(steps):
                rec = self.train_step()
                out.append(rec)
                if writer is not None:
                    writer.writerows((s, c, f"{v:.6g}") for s, c, v in rec.rows())
                if rec.step % self.cfg.log_every == 0:
                    log.info("step %d  g=%.4f d=%.4f recon=%.4f", rec.step, rec.g_total, rec.d_total, rec.parts["recon"])
                if checkpoint_path is not None and rec.step % every == 0:
                    self.save(checkpoint_path)
            if checkpoint_path is not None:
                self.save(checkpoint_path)
            return out
        finally:
            if fh is not None:
                fh.close()

    # -- persistence -----------------------------------------------------------------
    def save(self, path: str | Path) -> str:
        tensors = module_tensors(self.model, "model")
        t_g, meta_g = optimizer_tensors(self.opt_g, "opt_g")
        t_d, meta_d = optimizer_tensors(self.opt_d, "opt_d")
        tensors.update(t_g)
        tensors.update(t_d)
        tensors["rng.state"] = np.frombuffer(
            repr(self.rng.bit_generator.state).encode(), dtype=np.uint8).copy()
        meta = _checkpoint_meta(self.cfg, self.model, self.step, {"opt_g": meta_g, "opt_d": meta_d})
        return save_checkpoint(path, tensors, meta)

    def resume(self, path: str | Path) -> None:
        ckpt = load_checkpoint(path)
        load_module_tensors(self.model, ckpt.tensors, "model")
        load_optimizer_tensors(self.opt_g, ckpt.tensors, ckpt.meta["optimizers"]["opt_g"], "opt_g")
        load_optimizer_tensors(self.opt_d, ckpt.tensors, ckpt.meta["optimizers"]["opt_d"], "opt_d")
        if "rng.state" in ckpt.tensors:
            self.rng.bit_generator.state = ast.literal_eval(ckpt.tensors["rng.state"].tobytes().decode())
        self.step = int(ckpt.meta["step"])
