import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import gaussian_filter

from mantalk.errors import DegenerateEye, EmbedderMissing, LengthMismatch, ShapeMismatch
from mantalk.metrics import (
    acd,
    cpbd,
    cpbd_details,
    detect_blinks,
    ear_series,
    eye_aspect_ratio,
    gaussian_window,
    lmd,
    patch_stats_embedder,
    psnr,
    ssim,
)


# --- PSNR ------------------------------------------------------------------------------

def test_psnr_cap_on_identical():
    a = np.random.default_rng(0).random((3, 8, 8))
    assert psnr(a, a) == 100.0


def test_psnr_uniform_offset():
    a = np.random.default_rng(1).random((8, 8)) * 0.8
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_direct_mse():
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 10, 10)), rng.random((3, 10, 10))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_psnr_decreases_with_noise(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((16, 16))
    noise = rng.standard_normal((16, 16))
    values = [psnr(img, img + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# --- SSIM ---------------------------------------------------------------------------------

def test_ssim_identical():
    a = np.random.default_rng(3).random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negation_nonpositive():
    checker = 0.5 * np.where((np.add.outer(np.arange(24), np.arange(24)) % 2) == 0, 1.0, -1.0)
    assert ssim(checker, -checker) <= 0


def test_ssim_matches_per_window_loop():
    rng = np.random.default_rng(4)
    a = rng.random((16, 16))
    b = np.clip(a + 0.2 * rng.standard_normal((16, 16)), 0, 1)
    g1 = np.array([math.exp(-((i - 5) ** 2) / (2 * 1.5 ** 2)) for i in range(11)])
    w = np.outer(g1, g1) / g1.sum() ** 2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for y in range(16 - 10):
        for x in range(16 - 10):
            pa, pb = a[y:y + 11, x:x + 11], b[y:y + 11, x:x + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-6)


def test_ssim_window_sums_to_one():
    assert gaussian_window().sum() == pytest.approx(1.0)


def test_ssim_too_small():
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# --- CPBD ------------------------------------------------------------------------------------

def bar_chart(bars, size=64, lo=0.2, hi=0.8):
    # sparse bars: dense ones push the automatic Sobel cutoff above every edge
    img = np.full((size, size), lo)
    for a, b in bars:
        img[:, a:b] = hi
    return img


def step_edge(size=64):
    img = np.full((size, size), 0.2)
    img[:, size // 2:] = 0.8
    return img


def test_cpbd_flat_is_zero():
    res = cpbd_details(np.full((64, 64), 0.5))
    assert res.value == 0.0 and res.no_edges


def test_cpbd_sharp_edge_beats_blurred():
    img = step_edge()
    assert cpbd(img) > cpbd(gaussian_filter(img, 2.0))


@pytest.mark.parametrize("bars", [[(10, 20), (40, 50)], [(16, 48)], [(5, 9), (25, 33), (50, 56)]])
def test_cpbd_blur_sweep_non_increasing(bars):
    img = bar_chart(bars)
    values = [cpbd(gaussian_filter(img, s) if s else img) for s in (0, 1, 2, 4)]
    assert all(a >= b for a, b in zip(values, values[1:])), values
    assert values[0] > values[-1]


def test_cpbd_in_unit_interval():
    v = cpbd(np.random.default_rng(5).random((32, 32)))
    assert 0.0 <= v <= 1.0


def test_cpbd_needs_grayscale():
    with pytest.raises(ShapeMismatch):
        cpbd(np.zeros((3, 16, 16)))


# --- LMD ------------------------------------------------------------------------------------------

def test_lmd_identical():
    x = np.random.default_rng(6).random((5, 68, 2)) * 256
    assert lmd(x, x) == 0.0


def test_lmd_uniform_offset():
    x = np.random.default_rng(7).random((5, 68, 2)) * 256
    y = x.copy()
    y[:, 48:68] += (3.0, 4.0)
    assert lmd(x, y) == 5.0


def test_lmd_matches_double_loop():
    rng = np.random.default_rng(8)
    x, y = rng.random((4, 68, 2)) * 100, rng.random((4, 68, 2)) * 100
    total = 0.0
    for t in range(4):
        for p in range(48, 68):
            total += math.hypot(x[t, p, 0] - y[t, p, 0], x[t, p, 1] - y[t, p, 1])
    assert lmd(x, y) == pytest.approx(total / (4 * 20), abs=1e-9)


def test_lmd_skips_unmapped_points():
    x = np.full((2, 68, 2), np.nan)
    y = x.copy()
    x[:, [48, 54, 57]] = 10.0
    y[:, [48, 54, 57]] = 13.0
    assert lmd(x, y) == pytest.approx(3 * math.sqrt(2))


def test_lmd_length_mismatch():
    with pytest.raises(LengthMismatch):
        lmd(np.zeros((3, 68, 2)), np.zeros((2, 68, 2)))


# --- EAR and blinks -------------------------------------------------------------------------------

def test_ear_open_hexagon():
    eye = [(0, 0), (1, 1), (3, 1), (4, 0), (3, -1), (1, -1)]
    assert eye_aspect_ratio(eye) == 0.5


def test_ear_closed_eye():
    eye = [(0, 0), (1, 0.2), (3, 0.1), (4, 0), (3, 0.1), (1, 0.2)]
    assert eye_aspect_ratio(eye) == 0.0


@given(arrays(np.float64, (6, 2), elements=st.floats(-50, 50)))
def test_ear_formula(eye):
    assume(np.linalg.norm(eye[0] - eye[3]) > 1e-3)
    d = lambda p, q: math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2)
    want = (d(eye[1], eye[5]) + d(eye[2], eye[4])) / (2 * d(eye[0], eye[3]))
    assert eye_aspect_ratio(eye) == pytest.approx(want, rel=1e-12, abs=1e-12)


def test_ear_degenerate():
    with pytest.raises(DegenerateEye):
        eye_aspect_ratio([(1, 1)] * 6)


def test_ear_series_averages_eyes():
    lm = np.zeros((1, 68, 2))
    lm[0, 36:42] = [(0, 0), (1, 1), (3, 1), (4, 0), (3, -1), (1, -1)]
    lm[0, 42:48] = [(0, 0), (1, 2), (3, 2), (4, 0), (3, -2), (1, -2)]
    assert ear_series(lm)[0] == pytest.approx(0.75)


def test_no_blinks_on_constant():
    r = detect_blinks(np.full(75, 0.3))
    assert r.blink_events == [] and r.blinks_per_sec == 0.0


def test_three_dips_in_three_seconds():
    ear = np.full(75, 0.3)
    for s in (10, 35, 60):
        ear[s:s + 3] = 0.05
    r = detect_blinks(ear, 25.0)
    assert r.blink_events == [(10, 12), (35, 37), (60, 62)]
    assert r.blinks_per_sec == 1.0


def _runs(ear, threshold, min_frames):
    events = []
    for below, grp in itertools.groupby(enumerate(ear), key=lambda p: p[1] < threshold):
        grp = list(grp)
        if below and len(grp) >= min_frames:
            events.append((grp[0][0], grp[-1][0]))
    return events


@given(st.lists(st.booleans(), min_size=1, max_size=120), st.integers(1, 4), st.integers(0, 1000))
def test_blinks_match_run_length_scan(pattern, min_frames, seed):
    rng = np.random.default_rng(seed)
    ear = np.where(pattern, rng.uniform(0.0, 0.19, len(pattern)), rng.uniform(0.21, 0.5, len(pattern)))
    r = detect_blinks(ear, 25.0, 0.2, min_frames)
    assert r.blink_events == _runs(ear, 0.2, min_frames)
    assert r.blinks_per_sec == pytest.approx(len(r.blink_events) * 25.0 / len(ear))


@given(st.integers(0, 1000))
def test_blink_count_ignores_values_above_threshold(seed):
    rng = np.random.default_rng(seed)
    ear = rng.uniform(0.0, 0.5, 60)
    lifted = np.where(ear >= 0.2, ear + rng.uniform(0, 1, 60), ear)
    assert detect_blinks(ear).blink_events == detect_blinks(lifted).blink_events


# --- ACD --------------------------------------------------------------------------------------------

def test_acd_identical():
    frames = np.random.default_rng(9).random((4, 3, 16, 16))
    assert acd(frames, frames) == (0.0, 0.0)


def test_acd_orthogonal_embeddings():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    cos, euc = acd([e1], [e2], embedder=lambda v: v)
    assert cos == pytest.approx(1.0)
    assert euc == pytest.approx(math.sqrt(2))


def test_acd_matches_pairwise_loop():
    rng = np.random.default_rng(10)
    real, fake = rng.random((5, 3, 8, 8)), rng.random((5, 3, 8, 8))
    emb = lambda f: np.array([f.mean(), f.std(), f[0].max(), f[2].min()])
    cs, es = [], []
    for r, f in zip(real, fake):
        a, b = emb(r), emb(f)
        dot = sum(x * y for x, y in zip(a, b))
        na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(y * y for y in b))
        cs.append(1 - dot / (na * nb))
        es.append(math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))))
    cos, euc = acd(real, fake, emb)
    assert cos == pytest.approx(np.mean(cs), abs=1e-9)
    assert euc == pytest.approx(np.mean(es), abs=1e-9)


def test_acd_errors():
    with pytest.raises(EmbedderMissing):
        acd([np.zeros(2)], [np.zeros(2)], None)
    with pytest.raises(LengthMismatch):
        acd([np.zeros(2)] * 2, [np.zeros(2)])


def test_patch_embedder_shape():
    assert patch_stats_embedder(np.zeros((3, 32, 32))).shape == (3 * 16 * 2,)
