"""Procedural "talking shapes" clips with exact ground truth.

A scene is an elliptical face on a flat background with two eyes and a
mouth. Mouth aperture follows the energy of the audio window aligned to each
frame, and the eyes close on a known blink schedule, so landmarks, eye
aspect ratio and blink timing are all known exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio_features import FPS, SAMPLE_RATE, AudioTrack, align_audio_to_frames, compute_energy
from .errors import DurationMismatch
from .metrics import ear_series
from .predictors import N_KEYPOINTS, flow_oracle, keypoint_oracle

ENERGY_REF = 128.0      # energy of a 0.25-amplitude sine over a 1024-sample window
EYE_OPEN_EAR = 0.35
BLINK_OPENNESS = 0.1
BLINK_LENGTH = 3
SUPERSAMPLE = 4
NOD_PX = 1.0           # downward head dip (pixels) at full mouth aperture

# synthetic landmark index -> 0-based slot in the 68-point convention
LANDMARK68_SLOTS = [36, 37, 38, 39, 40, 41, 42, 43, 44, 45, 46, 47, 48, 54, 57]


@dataclass
class SyntheticScene:
    seed: int
    frame_size: int
    background: np.ndarray
    skin: np.ndarray
    eye_color: np.ndarray
    lip_color: np.ndarray
    face_center: tuple[float, float]
    face_radii: tuple[float, float]
    eye_half_width: float
    eye_offset: float
    eye_y: float
    mouth_y: float
    mouth_half_width: float
    blink_schedule: list[tuple[int, int]] = field(default_factory=list)
    apertures: np.ndarray | None = None
    openness: np.ndarray | None = None
    head_offsets: np.ndarray | None = None  # (T, 2) pixel shifts: random walk plus speech nod

    @classmethod
    def random(cls, seed: int, frame_size: int = 32) -> "SyntheticScene":
        rng = np.random.default_rng(seed)
        cx = 0.5 + rng.uniform(-0.03, 0.03)
        cy = 0.5 + rng.uniform(-0.03, 0.03)
        rx = rng.uniform(0.30, 0.36)
        ry = rng.uniform(0.38, 0.44)
        return cls(
            seed=seed,
            frame_size=frame_size,
            background=rng.uniform(-0.9, -0.2, 3),
            skin=rng.uniform(0.1, 0.8, 3),
            eye_color=rng.uniform(-1.0, -0.6, 3),
            lip_color=np.array([rng.uniform(0.4, 0.9), rng.uniform(-0.9, -0.5), rng.uniform(-0.9, -0.4)]),
            face_center=(cx, cy),
            face_radii=(rx, ry),
            eye_half_width=rng.uniform(0.08, 0.095),
            eye_offset=rx * rng.uniform(0.40, 0.46),
            eye_y=cy - ry * rng.uniform(0.28, 0.36),
            mouth_y=cy + ry * rng.uniform(0.40, 0.48),
            mouth_half_width=rx * rng.uniform(0.38, 0.46),
        )

    def mouth_half_height(self, aperture: float) -> float:
        return 0.015 + 0.2 * float(aperture)

    def landmarks(self, aperture: float, openness: float, offset=(0, 0)) -> np.ndarray:
        """Fifteen normalized (x, y) points: 6 per eye (p1..p6), then 3 mouth points."""
        ox, oy = offset[0] / self.frame_size, offset[1] / self.frame_size
        cx = self.face_center[0] + ox
        pts = []
        ew = self.eye_half_width
        eh = EYE_OPEN_EAR * ew * openness
        for ex in (cx - self.eye_offset, cx + self.eye_offset):
            ey = self.eye_y + oy
            pts += [
                (ex - ew, ey),
                (ex - ew / 3, ey - eh),
                (ex + ew / 3, ey - eh),
                (ex + ew, ey),
                (ex + ew / 3, ey + eh),
                (ex - ew / 3, ey + eh),
            ]
        my = self.mouth_y + oy
        mw = self.mouth_half_width
        pts += [(cx - mw, my), (cx + mw, my), (cx, my + self.mouth_half_height(aperture))]
        return np.array(pts, dtype=np.float64)

    def render(self, aperture: float, openness: float, offset=(0, 0)) -> np.ndarray:
        """Anti-aliased (3, H, W) frame in [-1, 1]."""
        n = self.frame_size * SUPERSAMPLE
        coords = (np.arange(n) + 0.5) / n
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        ox, oy = offset[0] / self.frame_size, offset[1] / self.frame_size
        cx, cy = self.face_center[0] + ox, self.face_center[1] + oy
        img = np.empty((3, n, n))
        img[:] = self.background[:, None, None]

        def paint(mask, color):
            img[:, mask] = color[:, None]

        rx, ry = self.face_radii
        paint(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0, self.skin)
        ew = self.eye_half_width
        eh = max(EYE_OPEN_EAR * ew * openness, 1e-4)
        for ex in (cx - self.eye_offset, cx + self.eye_offset):
            paint(((xx - ex) / ew) ** 2 + ((yy - (self.eye_y + oy)) / eh) ** 2 <= 1.0, self.eye_color)
        mh = self.mouth_half_height(aperture)
        mw = self.mouth_half_width
        my = self.mouth_y + oy
        # upper lip is a flat edge through the corners, the jaw opens downwards
        mouth = (np.abs(xx - cx) <= mw) & (yy >= my - 0.015) & (yy <= my + mh * np.sqrt(np.clip(1 - ((xx - cx) / mw) ** 2, 0, 1)))
        paint(mouth, self.lip_color)
        s = SUPERSAMPLE
        img = img.reshape(3, self.frame_size, s, self.frame_size, s).mean(axis=(2, 4))
        return img.astype(np.float32)

    def render_neutral(self) -> np.ndarray:
        return self.render(0.0, 1.0)


@dataclass
class VideoClip:
    frames: np.ndarray          # (T, 3, H, W) float32 in [-1, 1]
    audio: AudioTrack
    identity: np.ndarray        # (3, H, W) neutral frame
    landmarks: np.ndarray       # (T, 15, 2) normalized
    ear: np.ndarray             # (T,)
    flows: np.ndarray           # (T, 2, H, W); flows[t] maps frame t-1 onto frame t, flows[0] = 0
    blink_schedule: list[tuple[int, int]]
    fps: int = FPS

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def heatmaps(self, t: int, sigma: float = 2.0) -> np.ndarray:
        return keypoint_oracle({"landmarks": self.landmarks[t]}, sigma=sigma)

    def landmarks68(self, scale: float = 256.0) -> np.ndarray:
        return to_landmarks68(self.landmarks, scale)


def to_landmarks68(landmarks_norm: np.ndarray, scale: float = 256.0) -> np.ndarray:
    """Embed (T, 15, 2) normalized points into (T, 68, 2) at ``scale``; other slots are NaN."""
    lm = np.asarray(landmarks_norm, dtype=np.float64)
    out = np.full(lm.shape[:-2] + (68, 2), np.nan)
    out[..., LANDMARK68_SLOTS, :] = lm * scale
    return out


def synthesize_audio(seed: int, duration: float, sample_rate: int = SAMPLE_RATE) -> AudioTrack:
    """Syllable-like voiced tones with varying F0 and loudness, separated by pauses and noise bursts."""
    rng = np.random.default_rng(seed + 7919)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    t = int(rng.uniform(0.02, 0.15) * sample_rate)
    while t < n:
        length = int(rng.uniform(0.12, 0.32) * sample_rate)
        seg = np.arange(min(length, n - t)) / sample_rate
        if rng.random() < 0.8:
            f0 = rng.uniform(100, 240)
            amp = rng.uniform(0.15, 0.6)
            tone = sum((0.6 ** (h - 1)) * np.sin(2 * np.pi * h * f0 * seg + rng.uniform(0, 2 * np.pi)) for h in range(1, 4))
            tone /= 1.0 + 0.6 + 0.36
        else:
            amp = rng.uniform(0.05, 0.2)
            tone = rng.standard_normal(seg.size)
        out[t:t + seg.size] += amp * np.hanning(seg.size) * tone
        t += length + int(rng.uniform(0.04, 0.25) * sample_rate)
    return AudioTrack(np.clip(out, -1.0, 1.0), sample_rate)


def random_blink_schedule(rng: np.random.Generator, n_frames: int, rate: float = 0.4, fps: int = FPS,
                          length: int = BLINK_LENGTH) -> list[tuple[int, int]]:
    count = rng.poisson(rate * n_frames / fps)
    schedule = []
    for _ in range(count * 4):
        if len(schedule) == count:
            break
        start = int(rng.integers(2, max(3, n_frames - length)))
        if start + length > n_frames:
            continue
        if all(start + length + 3 <= s or s + l + 3 <= start for s, l in schedule):
            schedule.append((start, length))
    return sorted(schedule)


def apertures_from_audio(track: AudioTrack, fps: int = FPS, energy_ref: float = ENERGY_REF) -> np.ndarray:
    windows = align_audio_to_frames(track, fps)
    return np.clip(np.array([compute_energy(w) for w in windows]) / energy_ref, 0.0, 1.0)


def synthesize_clip(seed: int, duration_sec: float, audio: AudioTrack | None = None, frame_size: int = 32,
                    blink_schedule: list[tuple[int, int]] | None = None, head_motion: bool = False,
                    fps: int = FPS, flow_block: int = 4, flow_radius: int = 3, nod_px: float = NOD_PX):
    """Render a clip whose motion is driven by ``audio`` (synthesized from ``seed`` if omitted).

    Returns ``(VideoClip, SyntheticScene)``; identical arguments give identical clips.
    """
    if audio is None:
        audio = synthesize_audio(seed, duration_sec)
    stride = audio.sample_rate // fps
    # same ceiling count the feature alignment uses, so partial trailing frames match
    n_frames = -(-int(round(duration_sec * audio.sample_rate)) // stride)
    if -(-len(audio.samples) // stride) != n_frames:
        raise DurationMismatch(
            f"audio lasts {audio.duration:.3f}s ({-(-len(audio.samples) // stride)} frames) "
            f"but {duration_sec}s ({n_frames} frames) was requested")
    rng = np.random.default_rng(seed)
    scene = SyntheticScene.random(seed, frame_size)
    if blink_schedule is None:
        blink_schedule = random_blink_schedule(rng, n_frames, fps=fps)
    for start, length in blink_schedule:
        if start < 0 or start + length > n_frames:
            raise ValueError(f"blink ({start}, {length}) falls outside a {n_frames}-frame clip")
    apertures = apertures_from_audio(audio, fps)
    openness = np.ones(n_frames)
    for start, length in blink_schedule:
        openness[start:start + length] = BLINK_OPENNESS
    offsets = np.zeros((n_frames, 2))
    if head_motion:
        steps = rng.integers(-1, 2, size=(n_frames, 2))
        steps[0] = 0
        offsets = np.clip(np.cumsum(steps, axis=0), -2, 2).astype(np.float64)
    # the head dips slightly as the jaw opens, so loudness also drives head pose
    offsets[:, 1] += nod_px * apertures
    scene.blink_schedule = list(blink_schedule)
    scene.apertures, scene.openness, scene.head_offsets = apertures, openness, offsets

    frames = np.stack([scene.render(apertures[t], openness[t], offsets[t]) for t in range(n_frames)])
    landmarks = np.stack([scene.landmarks(apertures[t], openness[t], offsets[t]) for t in range(n_frames)])
    ear = ear_series(to_landmarks68(landmarks))
    flows = np.zeros((n_frames, 2, frame_size, frame_size), dtype=np.float32)
    for t in range(1, n_frames):
        flows[t] = flow_oracle(frames[t - 1], frames[t], flow_block, flow_radius)
    clip = VideoClip(frames, audio, scene.render_neutral(), landmarks, ear, flows, list(blink_schedule), fps)
    return clip, scene


def translation_sequence(seed: int, n_frames: int, size: int, velocity: tuple[int, int], margin: int = 16):
    """Frames cropped from a fixed random texture moving by ``velocity`` px per frame.

    Returns ``(frames (T, H, W), flow (2, H, W))``; the true flow between any
    consecutive pair is the constant ``velocity``.
    """
    rng = np.random.default_rng(seed)
    span = margin + abs(velocity[0]) * n_frames + abs(velocity[1]) * n_frames
    canvas = rng.uniform(-1, 1, (size + 2 * span, size + 2 * span))
    u, v = velocity
    frames = []
    for t in range(n_frames):
        # content moves by +velocity, so the crop window moves the other way
        y0, x0 = span - v * t, span - u * t
        frames.append(canvas[y0:y0 + size, x0:x0 + size].copy())
    flow = np.zeros((2, size, size), dtype=np.float32)
    flow[0], flow[1] = u, v
    return np.stack(frames), flow
