"""Audio front end: frame alignment, log-mel, F0, energy and one-hot quantization.

All functions are pure and operate on numpy arrays. Video frame ``i`` owns the
samples ``[i*stride, (i+1)*stride)`` with ``stride = sample_rate // fps``;
analysis windows are centered on the midpoint of that span and zero-padded at
the track edges.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import BadAudio, EmptyWindow, InvalidRange, NonDivisibleRate

SAMPLE_RATE = 16000
FPS = 25
N_MELS_SMALL = 13
N_MELS_LARGE = 256
N_BINS = 256
LOG_FLOOR_DB = -80.0
F0_FRAME = 1024
F0_HOP = 256
DEFAULT_WINDOW = 1024
DEFAULT_PITCH_RANGE = (0.0, 400.0)
# Energy of a full-scale sine over a 1024-sample window is about 512.
DEFAULT_ENERGY_RANGE = (0.0, 512.0)


@dataclass(frozen=True)
class AudioTrack:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise BadAudio(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).reshape(-1))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AlignmentSpec:
    stride: int
    window: int
    pad: int

    @classmethod
    def create(cls, sample_rate: int, fps: int, window: int | None = None) -> "AlignmentSpec":
        if fps <= 0:
            raise NonDivisibleRate(f"fps must be positive, got {fps}")
        if sample_rate % fps:
            raise NonDivisibleRate(f"sample rate {sample_rate} is not divisible by fps {fps}")
        stride = sample_rate // fps
        window = stride if window is None else int(window)
        if window < stride:
            raise ValueError(f"window ({window}) must be >= stride ({stride})")
        return cls(stride=stride, window=window, pad=(window - stride) // 2)

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.stride)

    def window_start(self, frame_index: int) -> int:
        return frame_index * self.stride - self.pad


@dataclass
class AudioFeatureFrame:
    mel_small: np.ndarray
    mel_large: np.ndarray
    pitch_onehot: np.ndarray
    energy_onehot: np.ndarray
    frame_index: int
    # raw values kept for debugging and for the synthetic mouth model
    f0: float = 0.0
    energy: float = 0.0

    @property
    def pitch_bin(self) -> int:
        return int(np.argmax(self.pitch_onehot))

    @property
    def energy_bin(self) -> int:
        return int(np.argmax(self.energy_onehot))


@dataclass(frozen=True)
class FeatureConfig:
    fps: int = FPS
    window: int = DEFAULT_WINDOW
    n_mels_small: int = N_MELS_SMALL
    n_mels_large: int = N_MELS_LARGE
    n_bins: int = N_BINS
    pitch_range: tuple[float, float] = DEFAULT_PITCH_RANGE
    energy_range: tuple[float, float] = DEFAULT_ENERGY_RANGE
    f0_min: float = 60.0
    f0_max: float = 400.0
    log_floor: float = LOG_FLOOR_DB


def align_audio_to_frames(track: AudioTrack, fps: int = FPS, window: int | None = DEFAULT_WINDOW) -> np.ndarray:
    """Cut one zero-padded, frame-centered window per video frame.

    Returns an array of shape ``(n_frames, window)`` where
    ``n_frames = ceil(len(samples) / stride)``.
    """
    spec = AlignmentSpec.create(track.sample_rate, fps, window)
    n = spec.n_frames(len(track.samples))
    # pad enough on both sides that every window is a plain slice
    front = spec.pad
    back = n * spec.stride + spec.window - len(track.samples)
    padded = np.concatenate([np.zeros(front), track.samples, np.zeros(max(back, 0))])
    starts = np.arange(n) * spec.stride
    idx = starts[:, None] + np.arange(spec.window)[None, :]
    return padded[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


_FILTERBANKS: dict = {}


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filterbank of shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    key = (n_mels, n_fft, sample_rate, fmin, fmax)
    if key not in _FILTERBANKS:
        bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
        edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
        lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
        rising = (bin_freqs[None, :] - lower) / (center - lower)
        falling = (upper - bin_freqs[None, :]) / (upper - center)
        fb = np.maximum(0.0, np.minimum(rising, falling))
        fb.setflags(write=False)
        _FILTERBANKS[key] = fb
    return _FILTERBANKS[key]


def compute_mel(window: np.ndarray, n_mels: int = N_MELS_LARGE, sample_rate: int = SAMPLE_RATE,
                log_floor: float = LOG_FLOOR_DB) -> np.ndarray:
    """Log-mel energies (dB) of one Hann-tapered window, floored at ``log_floor``."""
    window = np.asarray(window, dtype=np.float64).reshape(-1)
    if window.size == 0:
        raise EmptyWindow("cannot compute a mel spectrum of an empty window")
    n = window.size
    power = np.abs(np.fft.rfft(window * np.hanning(n))) ** 2
    energies = mel_filterbank(n_mels, n, sample_rate) @ power
    amin = 10.0 ** (log_floor / 10.0)
    return 10.0 * np.log10(np.maximum(energies, amin))


def compute_energy(window: np.ndarray) -> float:
    """L2 norm of the one-sided STFT magnitude of a rectangular frame."""
    window = np.asarray(window, dtype=np.float64).reshape(-1)
    if window.size == 0:
        raise EmptyWindow("cannot compute the energy of an empty window")
    return float(np.linalg.norm(np.abs(np.fft.rfft(window))))


def _frame_f0(frame: np.ndarray, sample_rate: int, fmin: float, fmax: float,
              voicing_threshold: float, silence_rms: float) -> float:
    frame = frame - frame.mean()
    if np.sqrt(np.mean(frame ** 2)) < silence_rms:
        return 0.0
    n = frame.size
    min_lag = max(2, int(math.floor(sample_rate / fmax)))
    max_lag = min(n - 2, int(math.ceil(sample_rate / fmin)))
    if max_lag <= min_lag:
        return 0.0
    # normalized cross-correlation between the frame and its lagged copy
    full = np.correlate(frame, frame, mode="full")[n - 1:]
    sq = np.cumsum(frame[::-1] ** 2)[::-1]  # sq[k] = sum_{i>=k} x_i^2
    head = np.cumsum(frame ** 2)            # head[k] = sum_{i<=k} x_i^2
    lags = np.arange(min_lag - 1, max_lag + 2)
    denom = np.sqrt(head[n - 1 - lags] * sq[lags]) + 1e-12
    r = full[lags] / denom
    interior = r[1:-1]
    peak_val = interior.max()
    if peak_val < voicing_threshold:
        return 0.0
    # the shortest lag that is a local maximum close to the global peak avoids octave errors
    best = None
    for k in range(1, len(r) - 1):
        if r[k] >= r[k - 1] and r[k] >= r[k + 1] and r[k] >= 0.9 * peak_val:
            best = k
            break
    if best is None:
        best = int(np.argmax(interior)) + 1
    a, b, c = r[best - 1], r[best], r[best + 1]
    denom = a - 2 * b + c
    offset = 0.5 * (a - c) / denom if denom != 0 else 0.0
    lag = lags[best] + float(np.clip(offset, -0.5, 0.5))
    f0 = sample_rate / lag
    return float(np.clip(f0, fmin, fmax))


def compute_pitch_f0(track: AudioTrack, frame_size: int = F0_FRAME, hop: int = F0_HOP,
                     fmin: float = 60.0, fmax: float = 400.0, voicing_threshold: float = 0.5,
                     silence_rms: float = 1e-4) -> np.ndarray:
    """Autocorrelation F0 per analysis frame; 0 marks unvoiced frames.

    Frames are not padded, so a track of ``N >= frame_size`` samples gives
    ``(N - frame_size) // hop + 1`` values. Shorter tracks are zero-padded to
    one frame.
    """
    if track.sample_rate != SAMPLE_RATE:
        raise BadAudio(f"pitch extraction expects {SAMPLE_RATE} Hz audio, got {track.sample_rate}")
    x = track.samples
    if x.size == 0:
        raise EmptyWindow("empty track")
    if x.size < frame_size:
        x = np.concatenate([x, np.zeros(frame_size - x.size)])
    n_frames = (x.size - frame_size) // hop + 1
    return np.array([
        _frame_f0(x[i * hop:i * hop + frame_size], track.sample_rate, fmin, fmax,
                  voicing_threshold, silence_rms)
        for i in range(n_frames)
    ])


def quantize_index(value: float, n_bins: int, lo: float, hi: float) -> int:
    if n_bins < 2:
        raise InvalidRange(f"n_bins must be >= 2, got {n_bins}")
    if not lo < hi:
        raise InvalidRange(f"need lo < hi, got lo={lo}, hi={hi}")
    idx = math.floor((value - lo) / (hi - lo) * n_bins)
    return min(max(idx, 0), n_bins - 1)


def quantize_onehot(value: float, n_bins: int = N_BINS, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    out = np.zeros(n_bins, dtype=np.float32)
    out[quantize_index(value, n_bins, lo, hi)] = 1.0
    return out


def f0_for_video_frames(f0: np.ndarray, n_frames: int, stride: int,
                        frame_size: int = F0_FRAME, hop: int = F0_HOP) -> np.ndarray:
    """Pick, for each video frame, the F0 analysis frame whose center is nearest."""
    video_centers = np.arange(n_frames) * stride + stride / 2
    f0_centers = np.arange(len(f0)) * hop + frame_size / 2
    nearest = np.abs(video_centers[:, None] - f0_centers[None, :]).argmin(axis=1)
    return f0[nearest]


def build_feature_frames(track: AudioTrack, fps: int = FPS,
                         config: FeatureConfig | None = None) -> list[AudioFeatureFrame]:
    cfg = config or FeatureConfig(fps=fps)
    windows = align_audio_to_frames(track, fps, cfg.window)
    stride = track.sample_rate // fps
    f0 = f0_for_video_frames(
        compute_pitch_f0(track, fmin=cfg.f0_min, fmax=cfg.f0_max), len(windows), stride)
    frames = []
    for i, w in enumerate(windows):
        energy = compute_energy(w)
        frames.append(AudioFeatureFrame(
            mel_small=compute_mel(w, cfg.n_mels_small, track.sample_rate, cfg.log_floor),
            mel_large=compute_mel(w, cfg.n_mels_large, track.sample_rate, cfg.log_floor),
            pitch_onehot=quantize_onehot(f0[i], cfg.n_bins, *cfg.pitch_range),
            energy_onehot=quantize_onehot(energy, cfg.n_bins, *cfg.energy_range),
            frame_index=i,
            f0=float(f0[i]),
            energy=energy,
        ))
    return frames


def stack_frames(frames: Sequence[AudioFeatureFrame]) -> dict[str, np.ndarray]:
    """Columnar view of a frame sequence, float32 except ``frame_index``."""
    return {
        "frame_index": np.array([f.frame_index for f in frames], dtype=np.int32),
        "mel_small": np.stack([f.mel_small for f in frames]).astype(np.float32),
        "mel_large": np.stack([f.mel_large for f in frames]).astype(np.float32),
        "pitch_onehot": np.stack([f.pitch_onehot for f in frames]).astype(np.float32),
        "energy_onehot": np.stack([f.energy_onehot for f in frames]).astype(np.float32),
        "f0": np.array([f.f0 for f in frames], dtype=np.float32),
        "energy": np.array([f.energy for f in frames], dtype=np.float32),
    }


# --- I/O ---------------------------------------------------------------------

def read_wav(path: str | Path) -> AudioTrack:
    """Read mono 16 kHz PCM16 or float32 WAV; anything else is rejected."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise BadAudio(f"cannot read {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise BadAudio(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz (resampling is not supported)")
    if data.ndim != 1:
        raise BadAudio(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise BadAudio(f"{path}: unsupported sample format {data.dtype}")
    if samples.size == 0:
        raise BadAudio(f"{path}: no samples")
    return AudioTrack(samples, rate)


def write_wav(path: str | Path, track: AudioTrack) -> None:
    pcm = np.clip(np.round(track.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), track.sample_rate, pcm)


# Columnar binary layout (all little-endian):
#   magic b"MANFEAT1" | u32 n_frames | u32 n_columns
#   per column: u16 name_len | name utf-8 | u8 dtype code (0=f32, 1=i32) | u32 width
#   then each column's payload in the same order, row-major (n_frames, width)
FEATURE_COLUMNS = ("frame_index", "mel_small", "mel_large", "pitch_onehot", "energy_onehot", "f0", "energy")
_FEATURE_MAGIC = b"MANFEAT1"


def save_features_binary(path: str | Path, frames: Sequence[AudioFeatureFrame]) -> None:
    cols = stack_frames(frames)
    n = len(frames)
    header = bytearray(_FEATURE_MAGIC + struct.pack("<II", n, len(FEATURE_COLUMNS)))
    payload = bytearray()
    for name in FEATURE_COLUMNS:
        arr = cols[name].reshape(n, -1)
        code = 1 if arr.dtype == np.int32 else 0
        enc = name.encode()
        header += struct.pack("<H", len(enc)) + enc + struct.pack("<BI", code, arr.shape[1])
        payload += arr.astype("<i4" if code else "<f4").tobytes()
    Path(path).write_bytes(bytes(header + payload))


def load_features_binary(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != _FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    n, ncol = struct.unpack_from("<II", buf, 8)
    pos = 16
    layout = []
    for _ in range(ncol):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode()
        pos += ln
        code, width = struct.unpack_from("<BI", buf, pos)
        pos += 5
        layout.append((name, code, width))
    out = {}
    for name, code, width in layout:
        dtype = np.dtype("<i4" if code else "<f4")
        size = n * width * dtype.itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=n * width, offset=pos).reshape(n, width)
        pos += size
        out[name] = arr[:, 0].copy() if name in ("frame_index", "f0", "energy") else arr.copy()
    return out


def save_features_jsonl(path: str | Path, frames: Iterable[AudioFeatureFrame]) -> None:
    """Debug dump, one JSON object per frame; one-hots stored as bin indices."""
    with open(path, "w") as fh:
        for f in frames:
            fh.write(json.dumps({
                "frame_index": f.frame_index,
                "mel_small": [round(float(v), 6) for v in f.mel_small],
                "mel_large": [round(float(v), 6) for v in f.mel_large],
                "pitch_bin": f.pitch_bin,
                "energy_bin": f.energy_bin,
                "f0": f.f0,
                "energy": f.energy,
            }) + "\n")
