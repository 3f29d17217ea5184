"""Flow-matching training with hybrid masked losses and condition dropout.

The model regresses the constant velocity of the noise-to-data line. The
joint loss reweights squared error inside/outside the temporal condition
mask; a probabilistically gated face loss focuses extra pressure on the
mouth region. Reference/audio/text conditions are independently dropped
so classifier-free guidance has a trained unconditional branch.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import codec
from .audio_features import AudioTokens, FeatureStats, featurize
from .codec import ConditionInputs, build_condition_inputs, encode, pool_mask
from .denoiser import Denoiser, DenoiserConfig, save_params
from .world import TEXT_TAGS, TripletSample, VideoClip, mouth_box

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mask_weight: float = 2.0       # w1, inside the condition mask
    unmask_weight: float = 1.0     # w2, outside
    p_mask: float = 0.5            # gate threshold for the face loss
    dropout_p: float = 0.15        # per-condition dropout probability
    face_weight: float = 1.0
    face_mode: str = "sum"         # "sum" | "alternate"
    batch_size: int = 4
    steps: int = 2000
    lr: float = 1e-3
    stage: int = 2                 # 1 = animation only, 2 = joint task mix
    edit_ratio: float = 0.5        # editing share of the stage-2 task mix
    crop_frames: int = 16
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.mask_weight < 0 or self.unmask_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not (0.0 <= self.p_mask <= 1.0 and 0.0 <= self.dropout_p <= 1.0):
            raise ValueError("p_mask and dropout_p must lie in [0, 1]")
        if self.face_mode not in ("sum", "alternate"):
            raise ValueError(f"unknown face_mode {self.face_mode!r}")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")

    def as_dict(self) -> dict:
        return asdict(self)


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t: torch.Tensor | float) -> torch.Tensor:
    """Point on the noise-to-data line: (1-t)*z0 + t*z1."""
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(z1.shape)}")
    t = torch.as_tensor(t, dtype=z0.dtype, device=z0.device)
    while t.ndim < z0.ndim:
        t = t.unsqueeze(-1)
    return (1 - t) * z0 + t * z1


def velocity_target(z0: torch.Tensor, z1: torch.Tensor) -> torch.Tensor:
    """Constant derivative of the interpolation line: z1 - z0."""
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(z1.shape)}")
    return z1 - z0


def loss_joint(
    pred: torch.Tensor,
    target: torch.Tensor,
    mask: torch.Tensor,
    mask_weight: float,
    unmask_weight: float,
) -> torch.Tensor:
    """Mean of [w1*m + w2*(1-m)] * (pred - target)^2 over all elements.

    mask broadcasts over channels; reduces to plain MSE at w1 == w2 == 1.
    """
    if mask_weight < 0 or unmask_weight < 0:
        raise ValueError("loss weights must be >= 0")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    weight = mask_weight * mask + unmask_weight * (1 - mask)
    return (weight * (pred - target) ** 2).mean()


@dataclass
class LossCounters:
    zero_lip_mask: int = 0


def loss_face(
    pred: torch.Tensor,
    target: torch.Tensor,
    lip_mask: torch.Tensor,
    u: float,
    p_mask: float,
    counters: LossCounters | None = None,
) -> torch.Tensor:
    """Gated mouth-region loss: full MSE when u >= p_mask, otherwise MSE
    restricted to the lip-mask region (mean over masked elements)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = (pred - target) ** 2
    if u >= p_mask:
        return err.mean()
    weighted = lip_mask * err
    denom = (lip_mask * torch.ones_like(err)).sum()  # masked elements incl. channels
    if denom == 0:
        if counters is not None:
            counters.zero_lip_mask += 1
        logger.warning("face loss skipped: lip mask is empty")
        return err.new_zeros(())
    return weighted.sum() / denom


@dataclass
class PreparedSample:
    """A triplet with everything the train step reuses across draws."""

    sample: TripletSample
    latent: torch.Tensor          # [T_full, C, h, w]
    tokens: AudioTokens           # covering the full clip
    lip_mask: torch.Tensor        # [T_full, 1, h, w]
    box: tuple[int, int, int, int]
    text_id: int


def prepare_sample(
    sample: TripletSample,
    config: DenoiserConfig,
    stats: FeatureStats | None,
) -> PreparedSample:
    frames = sample.video.frames
    num_frames, height, width = frames.shape[:3]
    latent = encode(sample.video, config.patch_size)
    tokens = featurize(
        sample.audio,
        sample.video.fps,
        num_frames,
        tokens_per_frame=config.tokens_per_frame,
        num_bands=config.audio_dim,
        stats=stats,
    )
    box = mouth_box(sample.scene, height, width)
    pixel = np.zeros((num_frames, height, width), dtype=np.float32)
    pixel[:, box[0] : box[1], box[2] : box[3]] = 1.0
    lip = pool_mask(pixel, config.patch_size)
    return PreparedSample(
        sample=sample,
        latent=latent,
        tokens=tokens,
        lip_mask=lip,
        box=box,
        text_id=TEXT_TAGS.index(sample.scene.text_tag),
    )


def _crop_conditions(
    prep: PreparedSample,
    start: int,
    frames: int,
    task: str,
    patch_size: int,
) -> ConditionInputs:
    clip = VideoClip(prep.sample.video.frames[start : start + frames], prep.sample.video.fps)
    if task == "animation":
        return build_condition_inputs("animation", clip, None, frames, patch_size)
    return build_condition_inputs("editing", clip, prep.box, frames, patch_size)


@dataclass
class StepMetrics:
    step: int
    loss_joint: float
    loss_face: float
    loss_total: float
    grad_norm: float


def _draw_batch(
    prepared: list[PreparedSample],
    model: Denoiser,
    config: TrainConfig,
    rng: np.random.Generator,
    instrument: dict | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, dict]:
    """Assemble one training batch; returns (pred-ready inputs) via closure-free
    tensors plus the per-batch draws needed for the losses."""
    cfg = model.config
    frames = config.crop_frames
    idx = rng.integers(0, len(prepared), size=config.batch_size)

    zs, conds, masks, lips, audios, texts, ts = [], [], [], [], [], [], []
    for i in idx:
        prep = prepared[int(i)]
        total = prep.latent.shape[0]
        if total < frames:
            raise ValueError(
                f"sample has {total} frames, need at least crop_frames={frames}"
            )
        start = int(rng.integers(0, total - frames + 1))

        if config.stage == 1:
            task = "animation"
        else:
            task = "editing" if rng.random() < config.edit_ratio else "animation"
        cond = _crop_conditions(prep, start, frames, task, cfg.patch_size)

        drop_ref = rng.random() < config.dropout_p
        drop_audio = rng.random() < config.dropout_p
        drop_text = rng.random() < config.dropout_p
        if instrument is not None:
            instrument.setdefault("drops", []).append((drop_ref, drop_audio, drop_text))
            instrument.setdefault("tasks", []).append(task)

        z1 = prep.latent[start : start + frames]
        tok = prep.tokens.slice_frames(start, start + frames)
        audio = torch.from_numpy(tok.tokens)

        zs.append(z1)
        conds.append(None if drop_ref else cond)
        lips.append(prep.lip_mask[start : start + frames])
        audios.append(None if drop_audio else audio)
        texts.append(-1 if drop_text else prep.text_id)
        ts.append(rng.random())
        masks.append(cond.cond_mask if not drop_ref else torch.zeros_like(cond.cond_mask))

    t_frames, c, h, w = zs[0].shape
    z1 = torch.stack(zs)
    cond_latent = torch.stack(
        [c_.cond_latent if c_ is not None else torch.zeros(t_frames, c, h, w) for c_ in conds]
    )
    cond_mask = torch.stack(masks)
    lip_mask = torch.stack(lips)
    # Dropped audio rows use the live null parameter, the same learned
    # sequence the audio=None path substitutes, so it keeps its gradient.
    num_audio = cfg.tokens_per_frame * frames
    audio = torch.stack(
        [
            a if a is not None else model.null_audio.expand(num_audio, cfg.audio_dim)
            for a in audios
        ]
    )
    text_ids = torch.tensor(texts, dtype=torch.long)
    t = torch.tensor(ts, dtype=z1.dtype)
    z0 = torch.from_numpy(
        rng.standard_normal(size=tuple(z1.shape)).astype(np.float32)
    )
    draws = {
        "z0": z0,
        "t": t,
        "u_face": [float(rng.random()) for _ in range(config.batch_size)],
    }
    return z1, cond_latent, cond_mask, {
        "lip_mask": lip_mask,
        "audio": audio,
        "text_ids": text_ids,
        "draws": draws,
    }


def train_step(
    prepared: list[PreparedSample],
    model: Denoiser,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    rng: np.random.Generator,
    step: int,
    counters: LossCounters,
    instrument: dict | None = None,
) -> StepMetrics:
    """One optimizer step on a freshly drawn batch; returns loss metrics."""
    if not prepared:
        raise ValueError("batch source is empty")
    z1, cond_latent, cond_mask, extra = _draw_batch(prepared, model, config, rng, instrument)
    draws = extra["draws"]
    z0, t = draws["z0"], draws["t"]
    z_t = interpolate(z0, z1, t)
    target = velocity_target(z0, z1)

    pred = model(
        z_t,
        t,
        text_ids=extra["text_ids"],
        cond_latent=cond_latent,
        cond_mask=cond_mask,
        audio=extra["audio"],
    )

    joint = loss_joint(pred, target, cond_mask, config.mask_weight, config.unmask_weight)
    face_terms = [
        loss_face(pred[i], target[i], extra["lip_mask"][i], draws["u_face"][i],
                  config.p_mask, counters)
        for i in range(pred.shape[0])
    ]
    face = torch.stack(face_terms).mean()

    if config.face_mode == "alternate":
        total = joint if step % 2 == 0 else face
    else:
        total = joint + config.face_weight * face

    if not torch.isfinite(total):
        raise RuntimeError(
            f"non-finite loss at step {step}: joint={joint.item()}, face={face.item()}"
        )

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    grad_sq = 0.0
    for p in model.parameters():
        if p.grad is not None:
            grad_sq += float((p.grad.detach() ** 2).sum())
    optimizer.step()

    return StepMetrics(
        step=step,
        loss_joint=joint.item(),
        loss_face=face.item(),
        loss_total=total.item(),
        grad_norm=math.sqrt(grad_sq),
    )


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    final_metrics: StepMetrics
    counters: LossCounters = field(default_factory=LossCounters)


def _save_trainer_state(path: Path, step: int, optimizer, rng: np.random.Generator) -> None:
    torch.save(
        {
            "step": step,
            "optimizer": optimizer.state_dict(),
            "rng_state": rng.bit_generator.state,
        },
        path,
    )


def train_loop(
    prepared: list[PreparedSample],
    model: Denoiser,
    config: TrainConfig,
    out_dir: Path | str,
    extras: dict | None = None,
    resume_state: Path | str | None = None,
) -> TrainResult:
    """Run the optimization loop with periodic checkpoints and a CSV log.

    Stage 1 never samples the editing task. Resuming from a saved trainer
    state continues the exact rng / optimizer trajectory.
    """
    if not prepared:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=0.0)
    rng = np.random.default_rng(config.seed)
    start_step = 0
    if resume_state is not None:
        state = torch.load(resume_state, weights_only=False)
        optimizer.load_state_dict(state["optimizer"])
        rng.bit_generator.state = state["rng_state"]
        start_step = state["step"]

    counters = LossCounters()
    metrics_path = out_dir / "metrics.csv"
    mode = "a" if start_step > 0 and metrics_path.exists() else "w"
    final = None
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss_joint", "loss_face", "grad_norm"])
        for step in range(start_step, config.steps):
            final = train_step(prepared, model, optimizer, config, rng, step, counters)
            if (step + 1) % config.log_interval == 0 or step + 1 == config.steps:
                writer.writerow(
                    [final.step, f"{final.loss_joint:.6f}", f"{final.loss_face:.6f}",
                     f"{final.grad_norm:.6f}"]
                )
                logger.info(
                    "step %d: joint=%.4f face=%.4f grad=%.3f",
                    final.step, final.loss_joint, final.loss_face, final.grad_norm,
                )
            if (step + 1) % config.checkpoint_interval == 0 and step + 1 < config.steps:
                save_params(model, out_dir / f"ckpt_{step + 1:06d}.bin", extras)
                _save_trainer_state(out_dir / f"state_{step + 1:06d}.pt", step + 1, optimizer, rng)

    ckpt = out_dir / "ckpt_final.bin"
    save_params(model, ckpt, extras)
    _save_trainer_state(out_dir / "state_final.pt", config.steps, optimizer, rng)
    return TrainResult(ckpt, metrics_path, final, counters)
