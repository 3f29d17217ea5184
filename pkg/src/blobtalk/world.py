"""Synthetic talking-blob world: paired (audio, video, text-tag) generation.

The renderer draws a bobbing blob whose mouth aperture tracks the audio
envelope exactly, so lip-sync quality of generated videos can be measured
analytically instead of with a learned detector. Also hosts the toy
data-filtering funnel used to curate training pools.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FPS = 16

TEXT_TAGS = ("studio", "meadow", "ocean", "dusk")

# Backgrounds and blob body keep red below green/blue so the mouth is the
# only red-dominant content in the frame (the aperture measurement relies
# on that channel contrast).
BACKGROUND_COLORS = {
    "studio": (0.22, 0.25, 0.30),
    "meadow": (0.15, 0.45, 0.25),
    "ocean": (0.08, 0.30, 0.52),
    "dusk": (0.35, 0.38, 0.48),
}
BODY_COLOR = (0.72, 0.75, 0.78)
MOUTH_COLOR = (0.95, 0.05, 0.10)
MOUTH_CONTRAST = MOUTH_COLOR[0] - max(MOUTH_COLOR[1], MOUTH_COLOR[2])

# Mouth geometry relative to the blob radius.
MOUTH_TOP_OFFSET = 0.25   # top edge below blob center
MOUTH_MAX_HEIGHT = 0.60   # fully open mouth height
MOUTH_HALF_WIDTH = 0.45

SYLLABLE_MIN_S = 0.10
SYLLABLE_MAX_S = 0.40
SYLLABLE_RAMP_S = 0.020
AUDIO_PEAK = 0.95

SYNC_MAX_LAG = 4


@dataclass(eq=False)
class AudioSignal:
    """Mono waveform in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("audio must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")
        if np.max(np.abs(self.samples)) > 1.0 + 1e-6:
            raise ValueError("audio samples must lie in [-1, 1]")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(eq=False)
class VideoClip:
    """Frame sequence [T, H, W, 3] with values in [0, 1]."""

    frames: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1 or self.frames.shape[3] != 3:
            raise ValueError(f"frames must be [T, H, W, 3], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"frame values must lie in [0, 1], got range [{lo}, {hi}]")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SceneSpec:
    """Blob identity: where it sits, how it moves, and its backdrop tag."""

    text_tag: str = "studio"
    blob_center: tuple[float, float] = (0.5, 0.5)  # (row, col) as frame fractions
    blob_radius: float = 0.28
    mouth_gain: float = 1.0
    head_bob_gain: float = 0.04
    seed: int = 0

    def validate(self, height: int, width: int) -> None:
        if self.text_tag not in BACKGROUND_COLORS:
            raise ValueError(f"unknown text tag {self.text_tag!r}, expected one of {TEXT_TAGS}")
        if self.mouth_gain <= 0:
            raise ValueError("mouth_gain must be > 0")
        if self.head_bob_gain < 0:
            raise ValueError("head_bob_gain must be >= 0")
        r, c = self.blob_center
        rad = self.blob_radius
        # Blob (and the 1px anti-aliasing skirt) must stay inside the frame
        # at maximum upward head bob.
        pad = 1.5 / min(height, width)
        if r - rad - self.head_bob_gain - pad < 0 or r + rad + pad > 1:
            raise ValueError("blob leaves the frame vertically at maximum head bob")
        if c - rad - pad < 0 or c + rad + pad > 1:
            raise ValueError("blob leaves the frame horizontally")


@dataclass(eq=False)
class TripletSample:
    """One (audio, video, scene) training triplet with its driving envelope."""

    audio: AudioSignal
    video: VideoClip
    scene: SceneSpec
    envelope: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.envelope = np.asarray(self.envelope, dtype=np.float32)
        if self.envelope.shape != (self.video.num_frames,):
            raise ValueError("envelope length must equal video frame count")
        if self.envelope.min() < -1e-6 or self.envelope.max() > 1.0 + 1e-6:
            raise ValueError("envelope values must lie in [0, 1]")


def gen_audio(
    seed: int,
    duration_s: float,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> AudioSignal:
    """Deterministic syllable-like test audio.

    A small harmonic stack is amplitude-modulated by random on/off segments
    of 100-400 ms with 20 ms raised-cosine ramps, then peak-normalized.
    """
    if duration_s <= 0:
        raise ValueError(f"duration_s must be > 0, got {duration_s}")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    n = max(n, 1)

    f0 = rng.uniform(150.0, 600.0)
    phases = rng.uniform(0, 2 * np.pi, size=3)

    # Alternating on/off segments; first state random.
    state = bool(rng.integers(0, 2))
    gate = np.zeros(n, dtype=np.float64)
    pos = 0
    while pos < n:
        seg = int(round(rng.uniform(SYLLABLE_MIN_S, SYLLABLE_MAX_S) * sample_rate))
        seg = max(seg, 1)
        if state:
            gate[pos : pos + seg] = 1.0
        pos += seg
        state = not state

    # Smooth the gate with a 20 ms raised-cosine (Hann) kernel.
    ramp = max(int(SYLLABLE_RAMP_S * sample_rate), 1)
    kernel = np.hanning(2 * ramp + 1)
    kernel /= kernel.sum()
    envelope = np.convolve(gate, kernel, mode="same")

    t = np.arange(n) / sample_rate
    carrier = np.zeros(n, dtype=np.float64)
    for k, amp in enumerate((1.0, 0.5, 0.25)):
        carrier += amp * np.sin(2 * np.pi * f0 * (k + 1) * t + phases[k])
    x = carrier * envelope

    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (AUDIO_PEAK / peak)
    return AudioSignal(x.astype(np.float32), sample_rate)


def _windowed_mean(values: np.ndarray, lo_off: int, hi_off: int) -> np.ndarray:
    """Mean of values[k+lo_off : k+hi_off+1], truncated at the edges."""
    n = values.size
    out = np.empty(n, dtype=np.float64)
    for k in range(n):
        lo = max(0, k + lo_off)
        hi = min(n, k + hi_off + 1)
        out[k] = values[lo:hi].mean()
    return out


def frame_count(audio: AudioSignal, fps: float) -> int:
    """Number of whole video frames the audio can drive."""
    return int(audio.samples.size * fps // audio.sample_rate)


def audio_envelope(audio: AudioSignal, fps: float, num_frames: int) -> np.ndarray:
    """Per-frame RMS, 3-frame centered smoothing, max-normalized to [0, 1]."""
    sr = audio.sample_rate
    rms = np.empty(num_frames, dtype=np.float64)
    for k in range(num_frames):
        a = int(np.floor(k * sr / fps))
        b = int(np.floor((k + 1) * sr / fps))
        seg = audio.samples[a:b]
        rms[k] = np.sqrt(np.mean(np.square(seg, dtype=np.float64))) if seg.size else 0.0
    smooth = _windowed_mean(rms, -1, 1)
    peak = smooth.max()
    if peak > 0:
        smooth = smooth / peak
    return smooth.astype(np.float32)


def _mouth_cols(scene: SceneSpec, height: int, width: int) -> tuple[float, float]:
    rad = scene.blob_radius * min(height, width)
    c = scene.blob_center[1] * width
    return c - MOUTH_HALF_WIDTH * rad, c + MOUTH_HALF_WIDTH * rad


def mouth_box(scene: SceneSpec, height: int, width: int) -> tuple[int, int, int, int]:
    """Static pixel box (r0, r1, c0, c1), half-open, covering the mouth at
    every aperture and head-bob offset. Used for measurement and as the
    editing-task lower-face box."""
    rad = scene.blob_radius * min(height, width)
    r_center = scene.blob_center[0] * height
    top = r_center - scene.head_bob_gain * height + MOUTH_TOP_OFFSET * rad
    bottom = r_center + (MOUTH_TOP_OFFSET + MOUTH_MAX_HEIGHT) * rad
    c0f, c1f = _mouth_cols(scene, height, width)
    r0 = max(0, int(np.floor(top)) - 1)
    r1 = min(height, int(np.ceil(bottom)) + 1)
    c0 = max(0, int(np.floor(c0f)) - 1)
    c1 = min(width, int(np.ceil(c1f)) + 1)
    return r0, r1, c0, c1


def _interval_coverage(size: int, lo: float, hi: float) -> np.ndarray:
    """Per-cell overlap of [lo, hi) with unit cells [i, i+1), clipped to [0,1]."""
    idx = np.arange(size, dtype=np.float64)
    return np.clip(np.minimum(hi, idx + 1) - np.maximum(lo, idx), 0.0, 1.0)


def render_frame(
    scene: SceneSpec,
    aperture: float,
    bob_offset: float,
    height: int,
    width: int,
) -> np.ndarray:
    """Draw one frame: background, blob body, anti-aliased mouth rectangle.

    aperture is the open fraction in [0, 1]; bob_offset is the upward shift
    in frame-height fractions.
    """
    bg = np.array(BACKGROUND_COLORS[scene.text_tag], dtype=np.float64)
    frame = np.tile(bg, (height, width, 1))

    rad = scene.blob_radius * min(height, width)
    r_center = (scene.blob_center[0] - bob_offset) * height
    c_center = scene.blob_center[1] * width

    rows = np.arange(height, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(width, dtype=np.float64)[None, :] + 0.5
    dist = np.sqrt((rows - r_center) ** 2 + (cols - c_center) ** 2)
    body_cov = np.clip(rad + 0.5 - dist, 0.0, 1.0)[..., None]
    frame = frame * (1 - body_cov) + np.array(BODY_COLOR) * body_cov

    aperture = float(np.clip(aperture, 0.0, 1.0))
    if aperture > 0:
        top = r_center + MOUTH_TOP_OFFSET * rad
        bottom = top + aperture * MOUTH_MAX_HEIGHT * rad
        c0f, c1f = _mouth_cols(scene, height, width)
        row_cov = _interval_coverage(height, top, bottom)
        col_cov = _interval_coverage(width, c0f, c1f)
        mouth_cov = (row_cov[:, None] * col_cov[None, :])[..., None]
        frame = frame * (1 - mouth_cov) + np.array(MOUTH_COLOR) * mouth_cov

    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def render_video(
    audio: AudioSignal,
    scene: SceneSpec,
    fps: float = DEFAULT_FPS,
    height: int = 32,
    width: int = 32,
    patch_size: int = 4,
) -> TripletSample:
    """Render the blob clip driven by the audio envelope.

    Mouth aperture of frame k is mouth_gain * envelope[k]; the whole blob
    shifts up by head_bob_gain * lowpassed envelope.
    """
    if height % patch_size or width % patch_size:
        raise ValueError(
            f"frame size ({height}x{width}) must be divisible by patch size {patch_size}"
        )
    scene.validate(height, width)
    num_frames = frame_count(audio, fps)
    if num_frames < 1:
        raise ValueError("audio too short for a single video frame")

    env = audio_envelope(audio, fps, num_frames)
    lowpass = _windowed_mean(env.astype(np.float64), -7, 0)  # trailing 8-frame mean

    frames = np.empty((num_frames, height, width, 3), dtype=np.float32)
    for k in range(num_frames):
        aperture = scene.mouth_gain * float(env[k])
        bob = scene.head_bob_gain * float(lowpass[k])
        frames[k] = render_frame(scene, aperture, bob, height, width)

    return TripletSample(
        audio=audio,
        video=VideoClip(frames, fps),
        scene=scene,
        envelope=env,
    )


def mouth_aperture(frame: np.ndarray, scene: SceneSpec) -> float:
    """Measured open fraction: red-contrast pixel mass inside the analytic
    mouth box, normalized by the fully-open mouth area."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"frame must be [H, W, 3], got {frame.shape}")
    height, width = frame.shape[:2]
    r0, r1, c0, c1 = mouth_box(scene, height, width)
    sub = frame[r0:r1, c0:c1]
    contrast = sub[..., 0] - np.maximum(sub[..., 1], sub[..., 2])
    open_mass = np.clip(contrast / MOUTH_CONTRAST, 0.0, 1.0).sum()

    rad = scene.blob_radius * min(height, width)
    full_area = MOUTH_MAX_HEIGHT * rad * 2 * MOUTH_HALF_WIDTH * rad
    return float(open_mass / full_area)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float((a * b).sum() / denom)


def sync_confidence(
    video: VideoClip,
    audio: AudioSignal,
    scene: SceneSpec,
    max_lag: int = SYNC_MAX_LAG,
) -> tuple[float, int]:
    """Lagged-correlation sync score between measured aperture and envelope.

    Returns (sync_c, sync_d): the maximum Pearson correlation over lags in
    [-max_lag, +max_lag] and the lag attaining it. Positive sync_d means the
    mouth trails the audio. Zero-variance sequences give (0.0, 0).
    """
    if video.num_frames < 8:
        raise ValueError(f"need at least 8 frames for sync scoring, got {video.num_frames}")
    num = min(video.num_frames, frame_count(audio, video.fps))
    if num < 8:
        raise ValueError("audio too short to score 8 video frames")

    aperture = np.array(
        [mouth_aperture(video.frames[k], scene) for k in range(num)], dtype=np.float64
    )
    env = audio_envelope(audio, video.fps, num).astype(np.float64)

    if np.ptp(aperture) == 0 or np.ptp(env) == 0:
        return 0.0, 0

    best_c, best_d = -np.inf, 0
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            a, e = aperture[lag:], env[: num - lag]
        else:
            a, e = aperture[: num + lag], env[-lag:]
        corr = _pearson(a, e) if np.ptp(a) > 0 and np.ptp(e) > 0 else 0.0
        better = corr > best_c + 1e-12
        tie = abs(corr - best_c) <= 1e-12 and (
            abs(lag) < abs(best_d) or (abs(lag) == abs(best_d) and lag < best_d)
        )
        if better or tie:
            best_c, best_d = corr, lag
    return float(best_c), int(best_d)


@dataclass
class FunnelReport:
    """Per-stage survivor counts of the data-filtering funnel."""

    total: int
    passed_sync_c: int
    passed_sync_d: int

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "passed_sync_c": self.passed_sync_c,
            "passed_sync_d": self.passed_sync_d,
        }


def filter_pool(
    samples: list[TripletSample],
    min_sync_c: float,
    max_abs_sync_d: int,
) -> list[TripletSample]:
    """Keep samples whose sync scores clear both thresholds, order preserved.

    Funnel statistics are logged; use filter_pool_report for the counts.
    """
    kept, report = filter_pool_report(samples, min_sync_c, max_abs_sync_d)
    logger.info(
        "filter funnel: %d total -> %d past sync_c >= %s -> %d past |sync_d| <= %s",
        report.total, report.passed_sync_c, min_sync_c, report.passed_sync_d, max_abs_sync_d,
    )
    return kept


def filter_pool_report(
    samples: list[TripletSample],
    min_sync_c: float,
    max_abs_sync_d: int,
) -> tuple[list[TripletSample], FunnelReport]:
    if not np.isfinite(min_sync_c):
        raise ValueError("min_sync_c must be finite")
    kept = []
    passed_c = 0
    for sample in samples:
        sync_c, sync_d = sync_confidence(sample.video, sample.audio, sample.scene)
        if sync_c >= min_sync_c:
            passed_c += 1
            if abs(sync_d) <= max_abs_sync_d:
                kept.append(sample)
    return kept, FunnelReport(len(samples), passed_c, len(kept))
