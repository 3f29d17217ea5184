"""Quantitative scoring of generated clips: sync, identity, seam
discontinuity, and color drift."""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .world import AudioSignal, SceneSpec, VideoClip, frame_count, mouth_box, sync_confidence


@dataclass
class EvalReport:
    sync_c: float
    sync_d: int
    identity_consistency: float
    seam_gap_ratio: float
    color_drift: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            sync_c=float(d["sync_c"]),
            sync_d=int(d["sync_d"]),
            identity_consistency=float(d["identity_consistency"]),
            seam_gap_ratio=float(d["seam_gap_ratio"]),
            color_drift=float(d["color_drift"]),
        )


def frame_l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a.astype(np.float64) - b.astype(np.float64)).mean())


def seam_indices(plan: list[tuple[int, int]], num_frames: int) -> list[int]:
    """Frame-pair indices i (between frames i and i+1) where windows meet:
    the entry into each non-first window and the exit of the previous one."""
    seams: set[int] = set()
    for (s0, e0), (s1, _e1) in zip(plan, plan[1:]):
        for i in (s1 - 1, e0 - 1):
            if 0 <= i < num_frames - 1:
                seams.add(i)
    return sorted(seams)


def seam_gap_ratio(frames: np.ndarray, plan: list[tuple[int, int]]) -> float:
    """Max adjacent-frame L1 at seam indices over the median adjacent-frame
    L1 overall. Defined as 1.0 for static clips (all diffs zero)."""
    t = frames.shape[0]
    if t < 2 or len(plan) < 2:
        return 1.0
    diffs = np.array([frame_l1(frames[i + 1], frames[i]) for i in range(t - 1)])
    seams = seam_indices(plan, t)
    if not seams:
        return 1.0
    med = float(np.median(diffs))
    peak = float(max(diffs[i] for i in seams))
    if med == 0:
        return 1.0 if peak == 0 else float("inf")
    return peak / med


def color_drift(frames: np.ndarray) -> float:
    """Least-squares slope of per-frame mean intensity over frame index."""
    t = frames.shape[0]
    if t < 2:
        return 0.0
    means = frames.reshape(t, -1).mean(axis=1).astype(np.float64)
    idx = np.arange(t, dtype=np.float64)
    return float(np.polyfit(idx, means, 1)[0])


def identity_consistency(
    frames: np.ndarray, ref_frame: np.ndarray, box: tuple[int, int, int, int]
) -> float:
    """1 minus the mean per-frame L1 distance to the reference over pixels
    outside the mouth box."""
    r0, r1, c0, c1 = box
    mask = np.ones(frames.shape[1:3], dtype=bool)
    mask[r0:r1, c0:c1] = False
    if not mask.any():
        return 1.0
    diffs = np.abs(frames.astype(np.float64) - ref_frame.astype(np.float64)[None])
    return 1.0 - float(diffs[:, mask].mean())


def evaluate(
    generated: VideoClip,
    audio: AudioSignal,
    ref_frame: np.ndarray,
    scene: SceneSpec,
    plan: list[tuple[int, int]] | None = None,
) -> EvalReport:
    """Score a generated clip against its driving audio and reference frame."""
    if frame_count(audio, generated.fps) < generated.num_frames:
        raise ValueError(
            f"audio covers {frame_count(audio, generated.fps)} frames, "
            f"video has {generated.num_frames}"
        )
    sync_c, sync_d = sync_confidence(generated, audio, scene)
    box = mouth_box(scene, generated.frames.shape[1], generated.frames.shape[2])
    return EvalReport(
        sync_c=sync_c,
        sync_d=sync_d,
        identity_consistency=identity_consistency(generated.frames, ref_frame, box),
        seam_gap_ratio=seam_gap_ratio(generated.frames, plan or []),
        color_drift=color_drift(generated.frames),
    )
