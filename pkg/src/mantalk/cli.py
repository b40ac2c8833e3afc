"""Command-line entry point: ``mantalk {train,infer,eval,ablate,preprocess-flow,plot}``.

Exit codes: 0 success, 1 domain error, 2 missing input.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .audio_features import read_wav
from .config import RunConfig, load_config, save_config
from .dataset import list_clip_dirs, preprocess_flow, read_clip_dir, read_frames, read_image, write_frames
from .errors import LengthMismatch, MantalkError, MissingInput, MissingReport
from .man_norm import NETWORK_VARIANTS, SOURCE_INCREMENTS
from .metrics import detect_blinks
from .pipeline import evaluate_generated, generate_for_clip, identity_baseline, keypoints_to_normalized
from .report import delimited_rows, format_table, metric_report, read_report, write_report
from .synthetic import to_landmarks68
from . import plotting

log = logging.getLogger("mantalk")

EXIT_OK, EXIT_DOMAIN, EXIT_MISSING = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.mank"


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out-dir", dest="out_dir")


def _load_run_config(args, **extra) -> RunConfig:
    return load_config(args.config, args.overrides, seed=args.seed, steps=args.steps, out_dir=args.out_dir, **extra)


# --- train ---------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import Trainer

    extra = {"synthetic": True} if args.synthetic else {}
    if args.data_root:
        extra.update(synthetic=False, data_root=args.data_root)
    cfg = _load_run_config(args, **extra)
    if not cfg.synthetic and not Path(cfg.data_root).is_dir():
        raise MissingInput(f"dataset root not found: {cfg.data_root}")
    if args.resume and not Path(args.resume).exists():
        raise MissingInput(f"checkpoint not found: {args.resume}")
    out = cfg.output_dir()
    trainer = Trainer(cfg)
    if args.resume:
        trainer.resume(args.resume)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    remaining = max(0, cfg.steps - trainer.step) if args.resume else cfg.steps
    trainer.train(remaining, loss_csv=out / "losses.csv", checkpoint_path=out / CHECKPOINT_NAME)
    print(f"trained to step {trainer.step}; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


# --- infer -----------------------------------------------------------------------

def cmd_infer(args) -> int:
    from .gen_disc import run_inference
    from .training import load_model

    for label, path in (("checkpoint", args.checkpoint), ("image", args.image), ("audio", args.audio)):
        if not Path(path).exists():
            raise MissingInput(f"{label} not found: {path}")
    model, cfg, ckpt = load_model(args.checkpoint)
    identity = torch.from_numpy(read_image(args.image))
    track = read_wav(args.audio)
    clip = run_inference(model, identity, track)
    out = Path(args.out)
    write_frames(out / "frames", clip.frames)
    manifest = {
        "fps": clip.fps,
        "frame_count": int(clip.frames.shape[0]),
        "frame_size": int(clip.frames.shape[-1]),
        "checkpoint_hash": ckpt.content_hash,
        "audio_seconds": track.duration,
    }
    if args.dump_tensor:
        np.save(out / "frames.npy", clip.frames.numpy())
        manifest["tensor_dump"] = "frames.npy"
    if clip.keypoints is not None:
        (out / "landmarks.json").write_text(json.dumps({"landmarks": keypoints_to_normalized(clip.keypoints).tolist()}))
        manifest["landmarks"] = "landmarks.json"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {manifest['frame_count']} frames to {out / 'frames'}")
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------

def _read_landmarks68(path):
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"landmark file not found: {p}")
    data = json.loads(p.read_text())
    if "landmarks68" in data:
        return np.asarray(data["landmarks68"], dtype=np.float64)
    return to_landmarks68(np.asarray(data["landmarks"], dtype=np.float64))


def _frames_from(path: Path) -> np.ndarray:
    if (path / "frames.npy").exists():
        return np.load(path / "frames.npy")
    return read_frames(path / "frames" if (path / "frames").is_dir() else path)


def cmd_eval(args) -> int:
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    for d in (pred_dir, ref_dir):
        if not d.exists():
            raise MissingInput(f"frame directory not found: {d}")
    pred = _frames_from(pred_dir)
    ref = _frames_from(ref_dir)
    if len(pred) != len(ref):
        raise LengthMismatch(f"{len(pred)} generated frames vs {len(ref)} reference frames")
    pred_lm = _read_landmarks68(args.pred_landmarks)
    ref_lm = _read_landmarks68(args.ref_landmarks)
    report = metric_report(pred, ref, pred_lm, ref_lm, args.fps)
    rows = [("generated", report)]
    if args.baseline_identity:
        ident = read_image(args.baseline_identity)
        base = metric_report(np.repeat(ident[None], len(ref), axis=0), ref, None, None, args.fps)
        report["baseline_identity"] = {k: v for k, v in base.items() if k not in ("ear_series", "blink_events")}
        rows.append(("identity baseline", base))
    out = Path(args.out) if args.out else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", report)
    (out / "report.csv").write_text(delimited_rows(rows))
    if report["ear_series"]:
        plotting.plot_ear(report["ear_series"], out / "ear.png", blink_events=report["blink_events"], fps=args.fps)
    print(format_table(rows))
    print()
    print(delimited_rows(rows), end="")
    return EXIT_OK


# --- ablate ---------------------------------------------------------------------------

def ablation_configs(base: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    if axis == "networks":
        return [(name, replace(base, video_branch=v, audio_branch=a)) for name, (v, a) in NETWORK_VARIANTS.items()]
    if axis == "sources":
        return [(name, replace(base, enabled_sources=tuple(src))) for name, src in SOURCE_INCREMENTS.items()]
    raise MantalkError(f"unknown ablation axis {axis!r}")


def config_hash(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    d.pop("out_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def run_ablation(base: RunConfig, axis: str, out: Path | None = None, n_eval: int = 1) -> list[tuple[str, dict]]:
    from .training import Trainer, held_out_clip

    rows = []
    for name, cfg in ablation_configs(base, axis):
        trainer = Trainer(cfg)
        trainer.train(cfg.steps)
        reports = []
        for i in range(n_eval):
            clip = held_out_clip(cfg, i)
            reports.append(evaluate_generated(generate_for_clip(trainer.model, clip), clip))
        keys = ("ssim", "psnr", "cpbd", "acd_cosine", "acd_euclid", "lmd", "blinks_per_sec")
        row = {k: float(np.nanmean([r[k] for r in reports])) if not all(np.isnan(r[k]) for r in reports) else float("nan")
               for k in keys}
        row.update(wer=None, config_hash=config_hash(cfg), steps=cfg.steps)
        rows.append((name, row))
        log.info("%s: ssim=%.4f", name, row["ssim"])
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_report(out / f"ablation_{axis}.json", {n: r for n, r in rows})
    return rows


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out) if args.out else cfg.output_dir() / "ablation"
    rows = run_ablation(cfg, args.axis, out, args.n_eval)
    (out / f"ablation_{args.axis}.csv").write_text(delimited_rows(rows))
    plotting.plot_ablation([n for n, _ in rows], [r["ssim"] for _, r in rows], out / f"ablation_{args.axis}.png")
    print(format_table(rows))
    print()
    print(delimited_rows(rows), end="")
    return EXIT_OK


# --- preprocess-flow ---------------------------------------------------------------

def cmd_preprocess_flow(args) -> int:
    root = Path(args.path)
    if not root.exists():
        raise MissingInput(f"not found: {root}")
    dirs = list_clip_dirs(root) if (root / "clips").is_dir() else [root]
    total = sum(preprocess_flow(d, args.block, args.radius) for d in dirs)
    print(f"wrote {total} flow fields across {len(dirs)} clip(s)")
    return EXIT_OK


# --- plot ------------------------------------------------------------------------------

def cmd_plot(args) -> int:
    if not args.reports and not args.losses:
        raise MissingReport("nothing to plot: pass report files and/or loss CSVs")
    out = Path(args.out)
    written = []
    for path in args.reports:
        rep = read_report(path)
        ear = rep.get("ear_series") or []
        if not ear:
            raise MissingReport(f"{path}: report has no EAR series")
        events = rep.get("blink_events") or detect_blinks(ear, rep.get("fps", 25.0)).blink_events
        written.append(plotting.plot_ear(ear, out / f"{Path(path).stem}_ear.png", blink_events=events,
                                         fps=rep.get("fps", 25.0)))
    for path in args.losses:
        if not Path(path).exists():
            raise MissingReport(f"loss log not found: {path}")
        written.append(plotting.plot_losses(plotting.read_loss_csv(path), out / f"{Path(path).stem}_curves.png"))
    for p in written:
        print(p)
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mantalk", description="Audio-driven talking-head generation with MAN.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _config_args(p)
    p.add_argument("--synthetic", action="store_true", help="train on generated talking-shape clips")
    p.add_argument("--data-root", help="dataset root holding clips/<id>/")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate frames from an identity image and audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-tensor", action="store_true", help="also write frames.npy")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="compare generated frames to reference frames")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--pred-landmarks")
    p.add_argument("--ref-landmarks")
    p.add_argument("--baseline-identity", help="identity image; adds a constant-frame baseline row")
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the network or source ablation grid")
    _config_args(p)
    p.add_argument("--axis", choices=("networks", "sources"), required=True)
    p.add_argument("--n-eval", type=int, default=1, help="held-out clips per row")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("preprocess-flow", help="write block-matching flow next to clip frames")
    p.add_argument("path", help="dataset root or a single clip directory")
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--radius", type=int, default=3)
    p.set_defaults(func=cmd_preprocess_flow)

    p = sub.add_parser("plot", help="render EAR and loss figures")
    p.add_argument("reports", nargs="*", help="report JSON files")
    p.add_argument("--losses", nargs="*", default=[])
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (MantalkError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
