"""Sampling stack: Euler flow integration with dual classifier-free
guidance, overlapping sliding windows with bidirectional overlap fusion
for arbitrary-length clips, an early/late condition switch for editing,
and a residual step cache that skips denoiser calls when the modulated
input barely changes.

Steps count down k = steps..1 from pure noise; flow time at the input of
step k is (steps - k) / steps and one Euler update adds velocity / steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
import torch

from .audio_features import AudioTokens
from .codec import ConditionInputs
from .world import VideoClip

Window = tuple[int, int]


@dataclass
class CfgSchedule:
    """Time profile of a guidance scale: constant, or a linear ramp from
    start_frac*w at t=0 to end_frac*w at t=1."""

    kind: str = "constant"
    start_frac: float = 1.0
    end_frac: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear_ramp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def cfg_schedule_eval(schedule: CfgSchedule, t: float, omega: float) -> float:
    """Effective guidance scale at flow time t in [0, 1]."""
    if schedule.kind == "constant":
        return omega
    return omega * (schedule.start_frac + (schedule.end_frac - schedule.start_frac) * t)


def cfg_combine(
    mode: str,
    u_cond_audio: torch.Tensor,
    u_cond_noaudio: torch.Tensor,
    u_null: torch.Tensor,
    omega_audio: float,
    omega_text: float,
) -> torch.Tensor:
    """Blend the three guidance branches into one velocity.

    "normalized" anchors at the fully-null branch and adds scaled text and
    audio deltas, so omega == 0 returns the conditional branch unchanged.
    "paper_literal" is the additive form (1+wa)*u_a - wa*u_na + (1+wt)*u_na
    - wt*u_null, which at omega == 0 evaluates to u_a + u_na; kept for
    fidelity experiments.
    """
    if u_cond_audio.shape != u_cond_noaudio.shape or u_cond_audio.shape != u_null.shape:
        raise ValueError("guidance branches must share one shape")
    if mode == "normalized":
        # Grouped by branch so omega == 0 returns the conditional branch
        # bit-exactly; algebraically identical to anchoring at u_null and
        # adding scaled text and audio deltas.
        return (
            (1 + omega_audio) * u_cond_audio
            + (omega_text - omega_audio) * u_cond_noaudio
            - omega_text * u_null
        )
    if mode == "paper_literal":
        return (
            (1 + omega_audio) * u_cond_audio
            - omega_audio * u_cond_noaudio
            + (1 + omega_text) * u_cond_noaudio
            - omega_text * u_null
        )
    raise ValueError(f"unknown cfg mode {mode!r}")


def plan_windows(length: int, window: int, overlap: int) -> list[Window]:
    """Sliding-window index plan over latent frames.

    Starts advance by window - overlap; the final end clamps to length, so
    the last window may be short. Single window when window == length.
    """
    if window > length:
        raise ValueError(f"window {window} exceeds sequence length {length}")
    if not (0 <= overlap < window):
        raise ValueError(f"overlap must satisfy 0 <= o < window, got {overlap}")
    plan: list[Window] = []
    start, end = 0, window
    while end <= length:
        plan.append((start, end))
        if end == length:
            break
        start = start + (window - overlap)
        end = start + window if start + window < length else length
    return plan


def fuse_overlap(
    cur: torch.Tensor,
    prev: torch.Tensor,
    overlap: int,
    literal_sign: bool = False,
) -> torch.Tensor:
    """Blend the current window's leading frames with the previous window's
    trailing frames: frame i (1-based) gets w_i*cur + (1-w_i)*prev with
    w_i = (i-1)/(overlap-1), so the first fused frame equals prev and the
    last equals cur.

    literal_sign applies the non-convex w*cur + (w-1)*prev variant (debug
    only; it flips the sign of the previous window's contribution).
    """
    if overlap < 2:
        raise ValueError(f"overlap must be >= 2 for fusion, got {overlap}")
    if cur.shape[0] != overlap or prev.shape[0] != overlap:
        raise ValueError("fusion inputs must have exactly `overlap` leading frames")
    weights = torch.arange(overlap, dtype=cur.dtype, device=cur.device) / (overlap - 1)
    w = weights.view((overlap,) + (1,) * (cur.ndim - 1))
    prev_w = (w - 1) if literal_sign else (1 - w)
    return w * cur + prev_w * prev


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_audio: float = 4.5
    cfg_text: float = 1.0
    cfg_mode: str = "normalized"   # "normalized" | "paper_literal"
    cfg_schedule: CfgSchedule = field(default_factory=CfgSchedule)
    window: int = 16               # f, in latent frames
    overlap: int = 4               # o, in latent frames
    hybrid_switch: int = 0         # N, video-conditioned leading steps (0 = off)
    cache_alpha: float = 0.0       # residual-cache threshold (0 = off)
    fusion_literal_sign: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.overlap == 1:
            raise ValueError("overlap 1 is not representable by the fusion weights; use 0 or >= 2")
        if not (0 <= self.overlap < self.window):
            raise ValueError("overlap must satisfy 0 <= o < window")
        if self.hybrid_switch < 0 or self.hybrid_switch > self.steps:
            raise ValueError("hybrid_switch must lie in [0, steps]")
        if self.cache_alpha < 0:
            raise ValueError("cache_alpha must be >= 0")
        if not (np.isfinite(self.cfg_audio) and np.isfinite(self.cfg_text)):
            raise ValueError("guidance scales must be finite")
        if self.cfg_mode not in ("normalized", "paper_literal"):
            raise ValueError(f"unknown cfg mode {self.cfg_mode!r}")


@dataclass
class CacheState:
    """Per-window residual-cache bookkeeping."""

    last_summary: torch.Tensor | None = None
    residual: torch.Tensor | None = None  # stored velocity minus stored input
    accumulated: float = 0.0
    skips: int = 0
    computes: int = 0


@dataclass
class SampleStats:
    """Counters and per-step records from one sampling run."""

    denoiser_calls: int = 0
    window_evals: int = 0
    skipped_evals: int = 0
    video_cond_evals: int = 0
    image_cond_evals: int = 0
    step_records: list = field(default_factory=list)

    @property
    def total_window_evals(self) -> int:
        return self.window_evals + self.skipped_evals

    def as_dict(self) -> dict:
        return asdict(self)


# provider(window, k) -> ConditionInputs | None, with k the countdown step
StepConditionProvider = Callable[[Window, int], "ConditionInputs | None"]
# velocity_fn(z_window, k, window_index, window) -> velocity
VelocityFn = Callable[[torch.Tensor, int, int, Window], torch.Tensor]


def init_noise(length: int, channels: int, h: int, w: int, seed: int) -> torch.Tensor:
    """Deterministic Gaussian start latent for a generation job."""
    rng = np.random.default_rng(seed)
    return torch.from_numpy(
        rng.standard_normal(size=(length, channels, h, w)).astype(np.float32)
    )


class GuidedVelocity:
    """Per-window velocity: three denoiser branches combined by guidance,
    optionally short-circuited by the residual step cache."""

    def __init__(
        self,
        model,
        config: SamplerConfig,
        audio: AudioTokens | None,
        text_id: int | None,
        provider: StepConditionProvider,
        stats: SampleStats,
    ):
        self.model = model
        self.config = config
        self.audio = audio
        self.text_id = text_id
        self.provider = provider
        self.stats = stats
        self.caches: dict[int, CacheState] = {}

    def _branches(
        self, z: torch.Tensor, tau: float, window: Window, cond: ConditionInputs | None
    ) -> torch.Tensor:
        cfg = self.config
        s, e = window
        audio_t = audio_pos = None
        if self.audio is not None:
            sl = self.audio.slice_frames(s, e)
            audio_t = torch.from_numpy(sl.tokens).to(z.dtype).unsqueeze(0)
            audio_pos = torch.from_numpy(sl.positions)

        zb = z.unsqueeze(0)
        cond_latent = cond.cond_latent.unsqueeze(0).to(z.dtype) if cond is not None else None
        cond_mask = cond.cond_mask.unsqueeze(0).to(z.dtype) if cond is not None else None

        def call(text, use_cond, aud, pos):
            self.stats.denoiser_calls += 1
            with torch.no_grad():
                return self.model(
                    zb,
                    tau,
                    text_ids=None if text is None else torch.tensor([text]),
                    cond_latent=cond_latent if use_cond else None,
                    cond_mask=cond_mask if use_cond else None,
                    audio=aud,
                    audio_pos=pos,
                    frame_offset=s,
                )[0]

        u_cond_audio = call(self.text_id, True, audio_t, audio_pos)
        u_cond_noaudio = call(self.text_id, True, None, None)
        u_null = call(None, False, None, None)

        w_audio = cfg_schedule_eval(cfg.cfg_schedule, tau, cfg.cfg_audio)
        w_text = cfg_schedule_eval(cfg.cfg_schedule, tau, cfg.cfg_text)
        return cfg_combine(cfg.cfg_mode, u_cond_audio, u_cond_noaudio, u_null, w_audio, w_text)

    def __call__(self, z: torch.Tensor, k: int, widx: int, window: Window) -> torch.Tensor:
        cfg = self.config
        tau = (cfg.steps - k) / cfg.steps
        cond = self.provider(window, k)

        if cfg.cache_alpha == 0:
            self._note(cond, k, widx, skipped=False)
            return self._branches(z, tau, window, cond)

        cache = self.caches.setdefault(widx, CacheState())
        summary = self.model.modulated_input(
            z.unsqueeze(0),
            tau,
            cond_latent=None if cond is None else cond.cond_latent.unsqueeze(0).to(z.dtype),
            cond_mask=None if cond is None else cond.cond_mask.unsqueeze(0).to(z.dtype),
        )
        if cache.last_summary is not None:
            denom = float(cache.last_summary.abs().mean())
            cache.accumulated += float((summary - cache.last_summary).abs().mean()) / max(
                denom, 1e-12
            )
        cache.last_summary = summary

        never_skip = k == cfg.steps or k == 1  # first and last steps
        if not never_skip and cache.residual is not None and cache.accumulated < cfg.cache_alpha:
            cache.skips += 1
            self.stats.skipped_evals += 1
            self.stats.step_records.append(
                {"step": k, "window": widx, "skipped": True, "accumulated": cache.accumulated}
            )
            # Reuse: estimated output is the current input plus the cached
            # output-minus-input residual.
            return z + cache.residual

        self._note(cond, k, widx, skipped=False)
        velocity = self._branches(z, tau, window, cond)
        cache.residual = velocity - z
        cache.accumulated = 0.0
        cache.computes += 1
        return velocity

    def _note(self, cond: ConditionInputs | None, k: int, widx: int, skipped: bool) -> None:
        self.stats.window_evals += 1
        if cond is not None:
            if cond.task == "editing":
                self.stats.video_cond_evals += 1
            else:
                self.stats.image_cond_evals += 1
        self.stats.step_records.append({"step": k, "window": widx, "skipped": skipped})


def integrate_windows(
    velocity_fn: VelocityFn,
    z_init: torch.Tensor,
    config: SamplerConfig,
    window: int | None = None,
) -> torch.Tensor:
    """Core denoising loop. Per step, windows are denoised left to right
    with one Euler update each; every non-first window's leading overlap is
    blended with the previous window's freshly written trailing frames and
    the blend lands in the shared buffer, so both windows carry it into the
    next step. Fusion is skipped on the very first (noisiest) step.
    """
    length = z_init.shape[0]
    f = window if window is not None else min(config.window, length)
    plan = plan_windows(length, f, config.overlap)
    o = config.overlap
    dt = 1.0 / config.steps

    z = z_init.clone()
    for k in range(config.steps, 0, -1):
        z_next = z.clone()
        for widx, (s, e) in enumerate(plan):
            velocity = velocity_fn(z[s:e], k, widx, (s, e))
            cur = z[s:e] + velocity * dt
            if widx > 0 and k != config.steps and o >= 2:
                prev_tail = z_next[s : s + o].clone()
                cur = cur.clone()
                cur[:o] = fuse_overlap(
                    cur[:o], prev_tail, o, literal_sign=config.fusion_literal_sign
                )
            z_next[s:e] = cur
        z = z_next
    return z


def blf_sample(
    model,
    provider: Callable[[Window], "ConditionInputs | None"],
    audio: AudioTokens | None,
    text_id: int | None,
    length: int,
    config: SamplerConfig,
    z_init: torch.Tensor,
    stats: SampleStats | None = None,
) -> torch.Tensor:
    """Full-length guided sampling with overlapped windows.

    provider maps a window (s, e) to its ConditionInputs (or None for
    unconditioned); audio tokens must cover all `length` frames.
    """
    _check_audio_cover(audio, length)
    stats = stats if stats is not None else SampleStats()
    guided = GuidedVelocity(
        model, config, audio, text_id, lambda window, k: provider(window), stats
    )
    return integrate_windows(guided, z_init, config, window=min(config.window, length))


def hybrid_sample(
    model,
    video_provider: Callable[[Window], "ConditionInputs | None"],
    image_provider: Callable[[Window], "ConditionInputs | None"],
    audio: AudioTokens | None,
    text_id: int | None,
    length: int,
    config: SamplerConfig,
    z_init: torch.Tensor,
    stats: SampleStats | None = None,
) -> torch.Tensor:
    """Editing-task sampling with the early/late condition switch: the first
    hybrid_switch (noisiest) steps use the video conditions, the remaining
    steps the image (first frame only) conditions."""
    _check_audio_cover(audio, length)
    n = config.hybrid_switch
    stats = stats if stats is not None else SampleStats()

    def provider(window: Window, k: int) -> ConditionInputs | None:
        done = config.steps - k  # steps already taken before this one
        return video_provider(window) if done < n else image_provider(window)

    guided = GuidedVelocity(model, config, audio, text_id, provider, stats)
    return integrate_windows(guided, z_init, config, window=min(config.window, length))


def plain_sample(
    model,
    provider: Callable[[Window], "ConditionInputs | None"],
    audio: AudioTokens | None,
    text_id: int | None,
    length: int,
    config: SamplerConfig,
    z_init: torch.Tensor,
    stats: SampleStats | None = None,
) -> torch.Tensor:
    """Reference sampler without windowing: one full-length Euler chain."""
    _check_audio_cover(audio, length)
    stats = stats if stats is not None else SampleStats()
    guided = GuidedVelocity(
        model, config, audio, text_id, lambda window, k: provider(window), stats
    )
    z = z_init.clone()
    dt = 1.0 / config.steps
    for k in range(config.steps, 0, -1):
        z = z + guided(z, k, 0, (0, length)) * dt
    return z


def _check_audio_cover(audio: AudioTokens | None, length: int) -> None:
    if audio is not None and len(audio) < audio.tokens_per_frame * length:
        raise ValueError(
            f"audio tokens cover {len(audio)} positions, need "
            f"{audio.tokens_per_frame * length} for {length} frames"
        )


def color_unify(video: VideoClip, ref_frames: int = 8) -> VideoClip:
    """Affine-match every frame's per-channel mean/std to the statistics of
    the average of the first ref_frames frames; channels with (near) zero
    variance are left unchanged."""
    if ref_frames < 1:
        raise ValueError("ref_frames must be >= 1")
    frames = video.frames.astype(np.float64)
    ref = frames[: min(ref_frames, frames.shape[0])].mean(axis=0)
    ref_mean = ref.mean(axis=(0, 1))
    ref_std = ref.std(axis=(0, 1))

    out = frames.copy()
    eps = 1e-8
    for k in range(frames.shape[0]):
        mean = frames[k].mean(axis=(0, 1))
        std = frames[k].std(axis=(0, 1))
        for c in range(3):
            if std[c] < eps or ref_std[c] < eps:
                continue
            out[k, ..., c] = (frames[k, ..., c] - mean[c]) / std[c] * ref_std[c] + ref_mean[c]
    return VideoClip(np.clip(out, 0.0, 1.0).astype(np.float32), video.fps)
