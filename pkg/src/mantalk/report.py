"""Metric reports: one dict per evaluated clip, a fixed-width table, and delimited rows."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MissingReport
from .metrics import acd, cpbd, detect_blinks, ear_series, lmd, psnr, ssim

TABLE_COLUMNS = ("SSIM", "PSNR", "CPBD", "ACD_cos", "ACD_euc", "LMD", "WER", "Blinks/sec")


def to_unit(frames) -> np.ndarray:
    """[-1, 1] frames to [0, 1]."""
    return (np.asarray(frames, dtype=np.float64) + 1.0) / 2.0


def _mean_or_nan(values):
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def metric_report(pred_frames, ref_frames, pred_landmarks68=None, ref_landmarks68=None, fps: float = 25.0) -> dict:
    """All frame-level metrics for one generated clip against its reference.

    Frames are ``(T, 3, H, W)`` in [-1, 1]. Landmarks are ``(T, 68, 2)`` at a
    256-pixel scale; without them the landmark metrics are reported as NaN.
    The blink rate is measured on the generated side.
    """
    pred, ref = to_unit(pred_frames), to_unit(ref_frames)
    if len(pred) != len(ref):
        raise LengthMismatch(f"{len(pred)} generated frames vs {len(ref)} reference frames")
    if len(pred) == 0:
        raise LengthMismatch("no frames to evaluate")
    report = {
        "n_frames": int(len(pred)),
        "fps": float(fps),
        "ssim": float(np.mean([ssim(p, r) for p, r in zip(pred, ref)])),
        "psnr": float(np.mean([psnr(p, r) for p, r in zip(pred, ref)])),
        "cpbd": _mean_or_nan([cpbd(p.mean(axis=0)) for p in pred]),
    }
    report["acd_cosine"], report["acd_euclid"] = acd(ref, pred)
    report["wer"] = None
    if pred_landmarks68 is not None and ref_landmarks68 is not None:
        report["lmd"] = lmd(ref_landmarks68, pred_landmarks68)
    else:
        report["lmd"] = float("nan")
    if pred_landmarks68 is not None:
        blinks = detect_blinks(ear_series(pred_landmarks68), fps)
        report.update(blinks.to_dict())
    else:
        report.update({"ear_series": [], "blink_events": [], "blinks_per_sec": float("nan")})
    return report


def _fmt(v, digits=3) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float) and np.isnan(v):
        return "NA"
    return f"{v:.{digits}f}"


def table_row(report: dict) -> list[str]:
    return [
        _fmt(report["ssim"]), _fmt(report["psnr"], 2), _fmt(report["cpbd"]),
        _fmt(report["acd_cosine"]), _fmt(report["acd_euclid"]), _fmt(report["lmd"], 2),
        _fmt(report.get("wer")), _fmt(report["blinks_per_sec"], 2),
    ]


def format_table(rows: list[tuple[str, dict]]) -> str:
    """Fixed-width table with one labelled row per report."""
    header = ["Method", *TABLE_COLUMNS]
    body = [[label, *table_row(r)] for label, r in rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    fmt = lambda line: "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(line, widths)))
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *map(fmt, body)])


def delimited_rows(rows: list[tuple[str, dict]], delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(["method", *TABLE_COLUMNS])
    for label, r in rows:
        w.writerow([label, *table_row(r)])
    return buf.getvalue()


def _json_safe(obj):
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(_json_safe(report), indent=2))


def read_report(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise MissingReport(f"report not found: {p}")
    data = json.loads(p.read_text())
    return {k: (float("nan") if v is None and k != "wer" else v) for k, v in data.items()}
