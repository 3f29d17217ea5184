"""Lossless patch codec between pixel clips and latent tensors.

Each p x p x 3 pixel patch becomes one latent pixel with 3*p*p channels
(channel-major, then patch row, then patch column), with no temporal
compression, so decode(encode(x)) == x bit-exactly. Also builds the
task-conditioning latents and masks for animation and editing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .world import VideoClip

DEFAULT_PATCH_SIZE = 4

Box = tuple[int, int, int, int]  # (r0, r1, c0, c1), half-open


def latent_channels(patch_size: int) -> int:
    return 3 * patch_size * patch_size


def patch_size_of(z: torch.Tensor) -> int:
    """Recover the patch size from a latent's channel count."""
    channels = z.shape[1]
    p = int(round((channels / 3) ** 0.5))
    if 3 * p * p != channels:
        raise ValueError(f"latent channel count {channels} is not 3*p^2 for integer p")
    return p


def encode(clip: VideoClip | np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE) -> torch.Tensor:
    """Pixel clip [T, H, W, 3] -> latent [T, 3p^2, H/p, W/p]."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip, dtype=np.float32)
    t, height, width, _ = frames.shape
    p = patch_size
    if height % p or width % p:
        raise ValueError(f"frame size ({height}x{width}) not divisible by patch size {p}")
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
    x = x.view(t, height // p, p, width // p, p, 3)
    # -> [T, channel, patch_row, patch_col, h, w], then merge the patch axes.
    x = x.permute(0, 5, 2, 4, 1, 3)
    return x.reshape(t, 3 * p * p, height // p, width // p).contiguous()


def decode(z: torch.Tensor) -> np.ndarray:
    """Latent [T, 3p^2, h, w] -> pixel array [T, H, W, 3], exact inverse of
    encode. Values are returned unclamped; see to_clip for final frames."""
    if z.ndim != 4:
        raise ValueError(f"latent must be [T, C, h, w], got shape {tuple(z.shape)}")
    p = patch_size_of(z)
    t, _, h, w = z.shape
    x = z.detach().reshape(t, 3, p, p, h, w)
    x = x.permute(0, 4, 2, 5, 3, 1)  # [T, h, patch_row, w, patch_col, 3]
    x = x.reshape(t, h * p, w * p, 3)
    return x.contiguous().cpu().numpy()


def to_clip(z: torch.Tensor, fps: float) -> VideoClip:
    """Decode and clamp to [0, 1] for final rendered frames."""
    return VideoClip(np.clip(decode(z), 0.0, 1.0), fps)


def pool_mask(pixel_mask: np.ndarray, patch_size: int = DEFAULT_PATCH_SIZE) -> torch.Tensor:
    """Max-pool a binary [T, H, W] pixel mask to a latent mask [T, 1, h, w]."""
    mask = np.asarray(pixel_mask)
    if mask.ndim != 3:
        raise ValueError(f"pixel mask must be [T, H, W], got shape {mask.shape}")
    values = np.unique(mask)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError("pixel mask must be binary (values 0 or 1)")
    t, height, width = mask.shape
    p = patch_size
    if height % p or width % p:
        raise ValueError(f"mask size ({height}x{width}) not divisible by patch size {p}")
    blocks = mask.astype(np.float32).reshape(t, height // p, p, width // p, p)
    pooled = blocks.max(axis=(2, 4))
    return torch.from_numpy(pooled).unsqueeze(1).contiguous()


@dataclass
class ConditionInputs:
    """Conditioning channels for the denoiser: latent, mask, and task kind."""

    cond_latent: torch.Tensor  # [T, C, h, w]
    cond_mask: torch.Tensor    # [T, 1, h, w]
    task: str                  # "animation" | "editing"

    def __post_init__(self):
        if self.task not in ("animation", "editing"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.cond_latent.shape[0] != self.cond_mask.shape[0]:
            raise ValueError("condition latent and mask must agree on frame count")


def _box_mask(height: int, width: int, box: Box) -> np.ndarray:
    r0, r1, c0, c1 = box
    if not (0 <= r0 <= r1 <= height and 0 <= c0 <= c1 <= width):
        raise ValueError(f"box {box} out of bounds for {height}x{width} frames")
    m = np.zeros((height, width), dtype=np.float32)
    m[r0:r1, c0:c1] = 1.0
    return m


def build_condition_inputs(
    task: str,
    ref_or_video: VideoClip,
    mouth_boxes: Box | list[Box] | None,
    num_frames: int,
    patch_size: int = DEFAULT_PATCH_SIZE,
) -> ConditionInputs:
    """Assemble the per-task conditioning video and binary temporal mask.

    animation: conditioning video is (reference frame, empty, ..., empty)
    and the mask is ones on frame 0 only. editing: frame 0 is kept intact,
    later frames have the mouth box zeroed, and the mask marks frame 0 plus
    the box region on frames 1..T-1. Masks are max-pooled to latent size.
    """
    frames = ref_or_video.frames
    height, width = frames.shape[1:3]
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")

    if task == "animation":
        cond = np.zeros((num_frames, height, width, 3), dtype=np.float32)
        cond[0] = frames[0]
        pixel_mask = np.zeros((num_frames, height, width), dtype=np.float32)
        pixel_mask[0] = 1.0
    elif task == "editing":
        if frames.shape[0] != num_frames:
            raise ValueError(
                f"editing needs a {num_frames}-frame source video, got {frames.shape[0]}"
            )
        if mouth_boxes is None:
            raise ValueError("editing task requires mouth boxes for frames 1..T-1")
        if isinstance(mouth_boxes, tuple):
            boxes = [mouth_boxes] * (num_frames - 1)
        else:
            boxes = list(mouth_boxes)
        if len(boxes) != num_frames - 1:
            raise ValueError(
                f"expected {num_frames - 1} mouth boxes for frames 1..T-1, got {len(boxes)}"
            )
        cond = frames[:num_frames].copy()
        pixel_mask = np.zeros((num_frames, height, width), dtype=np.float32)
        pixel_mask[0] = 1.0
        for k, box in enumerate(boxes, start=1):
            m = _box_mask(height, width, box)
            cond[k] = cond[k] * (1.0 - m[..., None])
            pixel_mask[k] = m
    else:
        raise ValueError(f"unknown task {task!r}")

    return ConditionInputs(
        cond_latent=encode(cond, patch_size),
        cond_mask=pool_mask(pixel_mask, patch_size),
        task=task,
    )
