"""Straightforward reference implementations used to cross-check the
production code paths. Everything here favors explicit loops over
vectorization and stays deliberately independent of the main modules'
arithmetic, so agreement is meaningful.
"""

from __future__ import annotations

import numpy as np


def plan_windows_reference(length: int, window: int, overlap: int) -> list[tuple[int, int]]:
    """Index-update trace of the sliding-window schedule."""
    if window > length or not (0 <= overlap < window):
        raise ValueError("invalid window plan parameters")
    plan = []
    s, e = 0, window
    while True:
        plan.append((s, e))
        if e == length:
            return plan
        s = s + (window - overlap)
        if s + window < length:
            e = s + window
        else:
            e = length


def fuse_weights_reference(overlap: int) -> list[float]:
    """w_i = (i-1)/(o-1) for i = 1..o."""
    if overlap < 2:
        raise ValueError("overlap must be >= 2")
    return [(i - 1) / (overlap - 1) for i in range(1, overlap + 1)]


def fuse_overlap_reference(cur: np.ndarray, prev: np.ndarray, overlap: int) -> np.ndarray:
    """Per-frame convex blend, one frame at a time."""
    out = np.array(cur, dtype=np.float64, copy=True)
    weights = fuse_weights_reference(overlap)
    for i in range(overlap):
        out[i] = weights[i] * cur[i] + (1.0 - weights[i]) * prev[i]
    return out


def maxpool_reference(mask: np.ndarray, patch: int) -> np.ndarray:
    """Per-block max of a [T, H, W] mask, nested loops."""
    t, height, width = mask.shape
    out = np.zeros((t, height // patch, width // patch), dtype=np.float64)
    for k in range(t):
        for i in range(height // patch):
            for j in range(width // patch):
                block_max = 0.0
                for di in range(patch):
                    for dj in range(patch):
                        block_max = max(block_max, float(mask[k, i * patch + di, j * patch + dj]))
                out[k, i, j] = block_max
    return out


def weighted_mse_reference(
    pred: np.ndarray, target: np.ndarray, mask: np.ndarray, w1: float, w2: float
) -> float:
    """Element-by-element [w1*m + w2*(1-m)] * err^2 mean; mask broadcasts
    over the channel axis of [T, C, h, w] tensors."""
    t, c, h, w = pred.shape
    total = 0.0
    for k in range(t):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    m = float(mask[k, 0, i, j])
                    err = float(pred[k, ch, i, j]) - float(target[k, ch, i, j])
                    total += (w1 * m + w2 * (1.0 - m)) * err * err
    return total / (t * c * h * w)


def masked_mean_mse_reference(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over elements where the (channel-broadcast) mask
    is one; 0.0 for an empty mask."""
    t, c, h, w = pred.shape
    total, count = 0.0, 0
    for k in range(t):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    if mask[k, 0, i, j] >= 0.5:
                        err = float(pred[k, ch, i, j]) - float(target[k, ch, i, j])
                        total += err * err
                        count += 1
    return total / count if count else 0.0


def windowed_euler_reference(
    velocity_fn,
    z_init: np.ndarray,
    window: int,
    overlap: int,
    steps: int,
) -> np.ndarray:
    """Frame-by-frame reference of the windowed sampler.

    velocity_fn(z_window [n, ...], k) -> velocity of the same shape. Per
    step the latent of each window is advanced by velocity / steps; a
    non-first window's first `overlap` frames are blended with what the
    previous window just wrote (skipped on the first step), and the blend
    is stored for both windows.
    """
    length = z_init.shape[0]
    plan = plan_windows_reference(length, window, overlap)
    frames = [np.array(z_init[i], dtype=np.float64) for i in range(length)]

    for k in range(steps, 0, -1):
        new_frames = [f.copy() for f in frames]
        for widx, (s, e) in enumerate(plan):
            z_win = np.stack([frames[i] for i in range(s, e)])
            stepped = z_win + velocity_fn(z_win, k) / steps
            out = [stepped[i] for i in range(e - s)]
            if widx > 0 and k != steps and overlap >= 2:
                weights = fuse_weights_reference(overlap)
                for i in range(overlap):
                    out[i] = weights[i] * out[i] + (1.0 - weights[i]) * new_frames[s + i]
            for i in range(s, e):
                new_frames[i] = out[i - s]
        frames = new_frames
    return np.stack(frames)
