"""Video quality and motion metrics: PSNR, SSIM, CPBD, LMD, EAR/blinks, ACD.

All functions take numpy arrays. Images are float arrays in ``[0, peak]``,
either ``(H, W)`` or channel-first ``(C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import convolve1d, gaussian_filter
from skimage.feature import canny

from .errors import DegenerateEye, EmbedderMissing, LengthMismatch, ShapeMismatch

PSNR_CAP = 100.0
N_LANDMARKS = 68
LIP_SLICE = slice(48, 68)  # points 49-68, 1-based
RIGHT_EYE = list(range(36, 42))
LEFT_EYE = list(range(42, 48))


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    a, b = _check_same(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * np.log10(peak ** 2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter(img, g):
    out = convolve1d(convolve1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0, sigma: float = 1.5) -> float:
    """Gaussian-windowed SSIM averaged over all fully contained windows (and channels)."""
    a, b = _check_same(a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ShapeMismatch(f"image {a.shape} is smaller than the {window}x{window} window")
    if a.ndim == 3:
        return float(np.mean([ssim(x, y, window, k1, k2, peak, sigma) for x, y in zip(a, b)]))
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _valid_filter(a, g), _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a ** 2
    var_b = _valid_filter(b * b, g) - mu_b ** 2
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --- CPBD -----------------------------------------------------------------------
# Constants of the published cumulative-probability-of-blur-detection metric.
CPBD_BETA = 3.6
CPBD_BLOCK = 64
CPBD_EDGE_RATIO = 0.002
CPBD_P_THRESHOLD = 0.63
CPBD_MAX_MARGIN = 100


def _jnb_width(contrast: float) -> float:
    return 5.0 if contrast <= 50 else 3.0


def _sobel_vertical_edges(img: np.ndarray) -> np.ndarray:
    """Thinned vertical-edge map with the automatic Sobel threshold (4 x mean squared gradient)."""
    gx = convolve1d(convolve1d(img, [1, 2, 1], axis=0, mode="nearest"), [1, 0, -1], axis=1, mode="nearest") / 8.0
    mag = gx ** 2
    cutoff = 4.0 * mag.mean()
    if cutoff == 0:
        return np.zeros(img.shape, dtype=bool)
    left = np.pad(mag, ((0, 0), (1, 0)), mode="edge")[:, :-1]
    right = np.pad(mag, ((0, 0), (0, 1)), mode="edge")[:, 1:]
    return (mag > cutoff) & (mag >= left) & (mag >= right)


def _edge_widths(edges: np.ndarray, img: np.ndarray) -> np.ndarray:
    """Horizontal edge widths between the local extrema flanking each edge pixel."""
    gy, gx = np.gradient(img)
    angle = np.degrees(np.arctan2(gy, gx))
    quant = 45.0 * np.round(angle / 45.0)
    widths = np.zeros(img.shape)
    height, width = img.shape
    rows, cols = np.nonzero(edges)
    for r, c in zip(rows, cols):
        if r == 0 or c == 0 or r == height - 1 or c == width - 1:
            continue
        q = quant[r, c]
        if q in (180.0, -180.0):
            rising = False  # intensity falls from left to right
        elif q == 0.0:
            rising = True
        else:
            continue
        line = img[r]
        m = 0
        for m in range(CPBD_MAX_MARGIN + 1):
            inner, outer = c - 1 - m, c - 2 - m
            if outer < 0:
                break
            step = line[outer] - line[inner]
            if (step >= 0) if rising else (step <= 0):
                break
        w_left = m + 1
        for m in range(CPBD_MAX_MARGIN + 1):
            inner, outer = c + 1 + m, c + 2 + m
            if outer >= width:
                break
            step = line[outer] - line[inner]
            if (step <= 0) if rising else (step >= 0):
                break
        w_right = m + 1
        widths[r, c] = w_left + w_right
    return widths


@dataclass
class CpbdResult:
    value: float
    n_edges: int

    @property
    def no_edges(self) -> bool:
        return self.n_edges == 0


def cpbd_details(image, peak: float = 1.0, block: int = CPBD_BLOCK) -> CpbdResult:
    """CPBD with the edge count; blocks shrink to the image size for small frames."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatch(f"CPBD needs a single-channel image, got shape {img.shape}")
    img = img * (255.0 / peak)
    canny_edges = canny(img)
    widths = _edge_widths(_sobel_vertical_edges(img), img)
    bh, bw = min(block, img.shape[0]), min(block, img.shape[1])
    hist = np.zeros(101)
    total = 0
    for i in range(img.shape[0] // bh):
        for j in range(img.shape[1] // bw):
            rs, cs = slice(i * bh, (i + 1) * bh), slice(j * bw, (j + 1) * bw)
            if np.count_nonzero(canny_edges[rs, cs]) <= CPBD_EDGE_RATIO * bh * bw:
                continue
            w = widths[rs, cs]
            w = w[w != 0]
            jnb = _jnb_width(int(img[rs, cs].max() - img[rs, cs].min()))
            p_blur = 1.0 - np.exp(-np.abs(w / jnb) ** CPBD_BETA)
            for p in p_blur:
                hist[int(round(p * 100))] += 1
                total += 1
    if total == 0:
        return CpbdResult(0.0, 0)
    hist /= total
    return CpbdResult(float(hist[:int(CPBD_P_THRESHOLD * 100) + 1].sum()), total)


def cpbd(image, peak: float = 1.0) -> float:
    return cpbd_details(image, peak).value


# --- landmarks ----------------------------------------------------------------

def lmd(real_lm, fake_lm) -> float:
    """Mean Euclidean distance over lip points (49-68) and frames.

    Inputs are ``(T, 68, 2)``; points that are NaN on either side are left out
    of the average.
    """
    real = np.asarray(real_lm, dtype=np.float64)
    fake = np.asarray(fake_lm, dtype=np.float64)
    if real.shape[0] != fake.shape[0]:
        raise LengthMismatch(f"{real.shape[0]} real frames vs {fake.shape[0]} fake frames")
    if real.shape != fake.shape:
        raise ShapeMismatch(f"landmark shapes differ: {real.shape} vs {fake.shape}")
    if real.shape[0] == 0:
        raise LengthMismatch("need at least one frame")
    d = np.linalg.norm(real[:, LIP_SLICE] - fake[:, LIP_SLICE], axis=-1)
    valid = ~np.isnan(d)
    if not valid.any():
        return float("nan")
    # every frame carries the same set of mapped points, so this is (1/T)(1/P) sum
    return float(d[valid].mean())


def eye_aspect_ratio(eye) -> float:
    p = np.asarray(eye, dtype=np.float64)
    width = np.linalg.norm(p[0] - p[3])
    if width == 0:
        raise DegenerateEye("eye corners coincide")
    return float((np.linalg.norm(p[1] - p[5]) + np.linalg.norm(p[2] - p[4])) / (2.0 * width))


def ear_series(landmarks68) -> np.ndarray:
    """Mean of both eyes' EAR per frame for ``(T, 68, 2)`` landmarks."""
    lm = np.asarray(landmarks68, dtype=np.float64)
    return np.array([(eye_aspect_ratio(f[RIGHT_EYE]) + eye_aspect_ratio(f[LEFT_EYE])) / 2 for f in lm])


@dataclass
class BlinkReport:
    ear_series: np.ndarray
    blink_events: list[tuple[int, int]]
    blinks_per_sec: float

    def to_dict(self):
        return {
            "ear_series": [float(v) for v in self.ear_series],
            "blink_events": [list(e) for e in self.blink_events],
            "blinks_per_sec": self.blinks_per_sec,
        }


def detect_blinks(ear, fps: float = 25.0, threshold: float = 0.2, min_frames: int = 2) -> BlinkReport:
    """A blink is a maximal run of at least ``min_frames`` frames with EAR below threshold.

    Events are ``(start, end)`` with ``end`` inclusive.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    ear = np.asarray(ear, dtype=np.float64)
    below = ear < threshold
    events = []
    start = None
    for i, b in enumerate(below):
        if b and start is None:
            start = i
        elif not b and start is not None:
            if i - start >= min_frames:
                events.append((start, i - 1))
            start = None
    if start is not None and len(below) - start >= min_frames:
        events.append((start, len(below) - 1))
    rate = len(events) * fps / len(ear) if len(ear) else 0.0
    return BlinkReport(ear, events, rate)


# --- ACD ------------------------------------------------------------------------

def patch_stats_embedder(frame, grid: int = 4) -> np.ndarray:
    """Per-patch channel means and standard deviations on a ``grid x grid`` tiling."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    c, h, w = f.shape
    ph, pw = h // grid, w // grid
    tiles = f[:, :ph * grid, :pw * grid].reshape(c, grid, ph, grid, pw)
    return np.concatenate([tiles.mean(axis=(2, 4)).ravel(), tiles.std(axis=(2, 4)).ravel()])


def acd(real_frames, fake_frames, embedder: Callable | None = patch_stats_embedder) -> tuple[float, float]:
    """(mean cosine distance, mean Euclidean distance) between paired frame embeddings."""
    if embedder is None:
        raise EmbedderMissing("ACD needs an embedder")
    if len(real_frames) != len(fake_frames):
        raise LengthMismatch(f"{len(real_frames)} real frames vs {len(fake_frames)} fake frames")
    cos, euc = [], []
    for r, f in zip(real_frames, fake_frames):
        er = np.asarray(embedder(r), dtype=np.float64)
        ef = np.asarray(embedder(f), dtype=np.float64)
        nr, nf = np.linalg.norm(er), np.linalg.norm(ef)
        if np.array_equal(er, ef):
            cos.append(0.0)
        elif nr == 0 or nf == 0:
            cos.append(1.0)
        else:
            cos.append(max(0.0, 1.0 - float(er @ ef) / (nr * nf)))
        euc.append(float(np.linalg.norm(er - ef)))
    return float(np.mean(cos)), float(np.mean(euc))
