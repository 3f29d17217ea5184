"""Fixed spectral audio features aligned to video frames.

The waveform is cut into half-overlapping Hann windows, r tokens per video
frame, and each window yields log triangular-filterbank energies of the
magnitude spectrum. Features are deterministic; the only dataset-dependent
part is an optional per-band mean/variance normalization whose statistics
live in the dataset manifest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import AudioSignal

DEFAULT_NUM_BANDS = 16
DEFAULT_TOKENS_PER_FRAME = 2
LOG_EPS = 1e-8
_STD_FLOOR = 1e-6


@dataclass
class AudioTokens:
    """Per-frame-aligned audio features [L, D] with 1-D integer positions."""

    tokens: np.ndarray
    positions: np.ndarray
    tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be [L, D], got shape {self.tokens.shape}")
        if self.positions.shape != (self.tokens.shape[0],):
            raise ValueError("positions must be one index per token")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("tokens contain non-finite values")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def slice_frames(self, start_frame: int, end_frame: int) -> "AudioTokens":
        """Tokens for video frames [start_frame, end_frame), keeping global positions."""
        r = self.tokens_per_frame
        a, b = start_frame * r, end_frame * r
        if a < 0 or b > len(self):
            raise ValueError(
                f"frame span [{start_frame}, {end_frame}) outside tokenized range"
            )
        return AudioTokens(self.tokens[a:b], self.positions[a:b], r)


@dataclass
class FeatureStats:
    """Per-band normalization statistics (stored in the dataset manifest)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be matching 1-D band vectors")

    def apply(self, tokens: np.ndarray) -> np.ndarray:
        return (tokens - self.mean) / np.maximum(self.std, _STD_FLOOR)

    def as_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def _mel(freq_hz: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def _mel_inv(mel: np.ndarray) -> np.ndarray:
    return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)


def band_centers(num_bands: int, sample_rate: int) -> np.ndarray:
    """Center frequencies (Hz) of the triangular bands."""
    edges = _mel_inv(np.linspace(_mel(0.0), _mel(sample_rate / 2), num_bands + 2))
    return edges[1:-1]


def _filterbank(num_bands: int, sample_rate: int, n_fft_bins: int, win_len: int) -> np.ndarray:
    """Triangular filters [num_bands, n_fft_bins] on the rfft frequency grid."""
    freqs = np.fft.rfftfreq(win_len, d=1.0 / sample_rate)
    edges = _mel_inv(np.linspace(_mel(0.0), _mel(sample_rate / 2), num_bands + 2))
    bank = np.zeros((num_bands, n_fft_bins), dtype=np.float64)
    for b in range(num_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rising = (freqs - lo) / max(mid - lo, 1e-9)
        falling = (hi - freqs) / max(hi - mid, 1e-9)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def featurize(
    audio: AudioSignal,
    fps: float,
    num_frames: int,
    tokens_per_frame: int = DEFAULT_TOKENS_PER_FRAME,
    num_bands: int = DEFAULT_NUM_BANDS,
    stats: FeatureStats | None = None,
) -> AudioTokens:
    """Tokenize audio covering num_frames video frames into r*T feature rows.

    Windows are half-overlapping (length 2*hop, hop = clip_samples / (r*T))
    and span exactly the clip duration; the final window is zero-padded.
    Pass stats to apply dataset normalization.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    sr = audio.sample_rate
    needed = int(np.ceil(num_frames * sr / fps))
    if audio.samples.size < needed:
        raise ValueError(
            f"audio too short: {audio.samples.size} samples < {needed} needed "
            f"for {num_frames} frames at {fps} fps"
        )
    x = audio.samples[:needed].astype(np.float64)
    num_tokens = tokens_per_frame * num_frames
    hop = needed / num_tokens

    banks: dict[int, np.ndarray] = {}
    rows = np.empty((num_tokens, num_bands), dtype=np.float64)
    for j in range(num_tokens):
        a = int(np.floor(j * hop))
        b = int(np.floor((j + 2) * hop))
        seg = x[a:min(b, needed)]
        win_len = b - a
        if seg.size < win_len:
            seg = np.pad(seg, (0, win_len - seg.size))
        windowed = seg * np.hanning(win_len)
        spectrum = np.abs(np.fft.rfft(windowed))
        if win_len not in banks:
            banks[win_len] = _filterbank(num_bands, sr, spectrum.size, win_len)
        rows[j] = np.log(LOG_EPS + banks[win_len] @ spectrum)

    tokens = rows.astype(np.float32)
    if stats is not None:
        tokens = stats.apply(tokens)
    return AudioTokens(tokens, np.arange(num_tokens), tokens_per_frame)


def compute_stats(token_sets: list[np.ndarray]) -> FeatureStats:
    """Per-band mean/std over a dataset of raw (unnormalized) token arrays."""
    if not token_sets:
        raise ValueError("need at least one token array to compute statistics")
    stacked = np.concatenate([np.asarray(t, dtype=np.float64) for t in token_sets], axis=0)
    return FeatureStats(stacked.mean(axis=0), stacked.std(axis=0))
