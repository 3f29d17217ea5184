"""Transformer velocity predictor over video latent tokens.

Per block: timestep-modulated self-attention with 3D rotary positions over
(frame, row, col), a text-tag cross-attention, an audio cross-attention
with 1D rotary positions at the block end, then a modulated MLP. The
timestep embedding predicts six modulation parameters per block
(shift/scale/gate around self-attention and around the MLP).

Checkpoints are a portable binary format: magic bytes, a JSON config
header, raw little-endian float32 tensors in declared order, and a
trailing CRC32.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn

from .world import TEXT_TAGS

CHECKPOINT_MAGIC = b"BLOBDIT1"
ROPE_BASE = 10000.0


@dataclass
class DenoiserConfig:
    width: int = 64
    depth: int = 4
    heads: int = 4
    patch_size: int = 4
    audio_dim: int = 16
    tokens_per_frame: int = 2
    text_vocab: int = len(TEXT_TAGS)
    audio_xattn_layers: tuple[int, ...] | None = None  # None = every block
    rope_base: float = ROPE_BASE

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.width % (2 * self.heads) != 0:
            raise ValueError(
                f"width {self.width} must be divisible by 2*heads ({2 * self.heads})"
            )
        if self.audio_xattn_layers is not None:
            self.audio_xattn_layers = tuple(self.audio_xattn_layers)
            if any(i < 0 or i >= self.depth for i in self.audio_xattn_layers):
                raise ValueError("audio_xattn_layers indices out of range")

    @property
    def in_channels(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def has_audio_xattn(self, layer: int) -> bool:
        return self.audio_xattn_layers is None or layer in self.audio_xattn_layers

    def as_dict(self) -> dict:
        d = asdict(self)
        d["audio_xattn_layers"] = (
            None if self.audio_xattn_layers is None else list(self.audio_xattn_layers)
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kwargs = dict(d)
        if kwargs.get("audio_xattn_layers") is not None:
            kwargs["audio_xattn_layers"] = tuple(kwargs["audio_xattn_layers"])
        return cls(**kwargs)


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate interleaved dimension pairs of x [..., L, D] by pos * base^(-2i/D).

    Position 0 is the identity; rotations preserve norms and give
    relative-position-dependent dot products.
    """
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise ValueError(f"rotary dimension must be even, got {dim}")
    if dim == 0:
        return x
    half = dim // 2
    freqs = base ** (
        -torch.arange(half, dtype=x.dtype, device=x.device) * 2.0 / dim
    )
    pos = positions.to(x.dtype)
    while pos.ndim < x.ndim - 1:
        pos = pos.unsqueeze(0)
    angles = pos.unsqueeze(-1) * freqs  # [..., L, half]
    cos, sin = torch.cos(angles), torch.sin(angles)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return rotated.flatten(-2)


def rope_axis_dims(head_dim: int) -> tuple[int, int, int]:
    """Split a head dimension into three near-equal even groups for the
    (frame, row, col) axes; leftover pairs go to the leading axes."""
    base = 2 * (head_dim // 6)
    dims = [base, base, base]
    for i in range((head_dim - 3 * base) // 2):
        dims[i % 3] += 2
    return tuple(dims)


def rope_rotate_3d(
    x: torch.Tensor,
    t_pos: torch.Tensor,
    h_pos: torch.Tensor,
    w_pos: torch.Tensor,
    base: float = ROPE_BASE,
) -> torch.Tensor:
    """Apply axis-wise rotary encoding over disjoint head-dim groups."""
    dims = rope_axis_dims(x.shape[-1])
    parts = torch.split(x, dims, dim=-1)
    out = []
    for part, pos in zip(parts, (t_pos, h_pos, w_pos)):
        out.append(rope_rotate(part, pos, base) if part.shape[-1] > 0 else part)
    return torch.cat(out, dim=-1)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of flow time t in [0, 1] (scaled by 1000)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * 1000.0 * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)  # [B, H, N, dh]


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v, logits


class CrossAttention(nn.Module):
    """Multi-head cross-attention; optional rotary positions on q and k."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.last_logits: torch.Tensor | None = None

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        q_pos: torch.Tensor | None = None,
        k_pos: torch.Tensor | None = None,
        rope_base: float = ROPE_BASE,
        record_logits: bool = False,
    ) -> torch.Tensor:
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(context), self.heads)
        v = _split_heads(self.v(context), self.heads)
        if q_pos is not None:
            q = rope_rotate(q, q_pos, rope_base)
        if k_pos is not None:
            k = rope_rotate(k, k_pos, rope_base)
        attn, logits = _attend(q, k, v)
        self.last_logits = logits.detach() if record_logits else None
        return self.out(_merge_heads(attn))


class DiTBlock(nn.Module):
    def __init__(self, config: DenoiserConfig, with_audio: bool):
        super().__init__()
        d = config.width
        self.config = config
        self.with_audio = with_audio

        self.norm_sa = nn.LayerNorm(d, elementwise_affine=False)
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)

        self.norm_text = nn.LayerNorm(d)
        self.text_attn = CrossAttention(d, config.heads)

        if with_audio:
            self.norm_audio = nn.LayerNorm(d)
            self.audio_attn = CrossAttention(d, config.heads)

        self.norm_mlp = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

        # Six modulation parameters per timestep; zero-init so every branch
        # starts gated off.
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(
        self,
        x: torch.Tensor,
        temb: torch.Tensor,
        video_pos: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        text_tokens: torch.Tensor,
        audio_tokens: torch.Tensor | None,
        audio_q_pos: torch.Tensor,
        audio_k_pos: torch.Tensor,
        disable_self: bool = False,
        disable_text: bool = False,
        record_audio_logits: bool = False,
    ) -> torch.Tensor:
        shift_sa, scale_sa, gate_sa, shift_mlp, scale_mlp, gate_mlp = (
            self.modulation(temb).chunk(6, dim=-1)
        )
        cfg = self.config

        if not disable_self:
            h = _modulate(self.norm_sa(x), shift_sa, scale_sa)
            q, k, v = _split_heads(self.qkv(h), 3 * cfg.heads).chunk(3, dim=1)
            t_pos, h_pos, w_pos = video_pos
            q = rope_rotate_3d(q, t_pos, h_pos, w_pos, cfg.rope_base)
            k = rope_rotate_3d(k, t_pos, h_pos, w_pos, cfg.rope_base)
            attn, _ = _attend(q, k, v)
            x = x + gate_sa.unsqueeze(1) * self.attn_out(_merge_heads(attn))

        if not disable_text:
            x = x + self.text_attn(self.norm_text(x), text_tokens)

        if self.with_audio and audio_tokens is not None:
            x = x + self.audio_attn(
                self.norm_audio(x),
                audio_tokens,
                q_pos=audio_q_pos,
                k_pos=audio_k_pos,
                rope_base=cfg.rope_base,
                record_logits=record_audio_logits,
            )

        h = _modulate(self.norm_mlp(x), shift_mlp, scale_mlp)
        return x + gate_mlp.unsqueeze(1) * self.mlp(h)


class Denoiser(nn.Module):
    """Velocity predictor u(z_t, t, text, condition, audio) -> same shape as z_t.

    The latent, the conditioning latent, and the binary temporal mask are
    concatenated along channels at the input. Missing conditions fall back
    to zeros (condition latent/mask) or learned null embeddings (text,
    audio), which is also what condition dropout feeds during training.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.width
        c = config.in_channels

        self.input_proj = nn.Linear(2 * c + 1, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        # Slot text_vocab is the learned null-text embedding.
        self.text_embed = nn.Embedding(config.text_vocab + 1, d)
        self.audio_proj = nn.Linear(config.audio_dim, d)
        self.null_audio = nn.Parameter(torch.zeros(config.audio_dim))

        self.blocks = nn.ModuleList(
            [DiTBlock(config, config.has_audio_xattn(i)) for i in range(config.depth)]
        )
        self.norm_out = nn.LayerNorm(d)
        self.output_proj = nn.Linear(d, c)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

        # Test hooks (never set in production paths).
        self.disable_self_attn = False
        self.disable_text_attn = False
        self.record_audio_logits = False

    @property
    def null_text_id(self) -> int:
        return self.config.text_vocab

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_inputs(self, z: torch.Tensor) -> None:
        if z.ndim != 5:
            raise ValueError(f"latent must be [B, T, C, h, w], got shape {tuple(z.shape)}")
        if z.shape[2] != self.config.in_channels:
            raise ValueError(
                f"latent has {z.shape[2]} channels, config expects {self.config.in_channels}"
            )
        if not torch.isfinite(z).all():
            raise ValueError("latent contains non-finite values")

    def _embed_tokens(
        self,
        z: torch.Tensor,
        cond_latent: torch.Tensor | None,
        cond_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        b, t, c, h, w = z.shape
        if cond_latent is None:
            cond_latent = torch.zeros_like(z)
        if cond_mask is None:
            cond_mask = z.new_zeros(b, t, 1, h, w)
        if cond_latent.shape != z.shape:
            raise ValueError("condition latent shape must match the noisy latent")
        if cond_mask.shape != (b, t, 1, h, w):
            raise ValueError("condition mask must be [B, T, 1, h, w]")
        x = torch.cat([z, cond_latent, cond_mask], dim=2)  # [B, T, 2C+1, h, w]
        x = x.permute(0, 1, 3, 4, 2).reshape(b, t * h * w, 2 * c + 1)
        return self.input_proj(x)

    def _positions(
        self, t: int, h: int, w: int, frame_offset: int, device, dtype
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        fr = torch.arange(t, device=device)
        rr = torch.arange(h, device=device)
        cc = torch.arange(w, device=device)
        t_pos = (fr[:, None, None] + frame_offset).expand(t, h, w).reshape(-1)
        h_pos = rr[None, :, None].expand(t, h, w).reshape(-1)
        w_pos = cc[None, None, :].expand(t, h, w).reshape(-1)
        audio_q_pos = self.config.tokens_per_frame * t_pos
        return t_pos, h_pos, w_pos, audio_q_pos

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor | float,
        text_ids: torch.Tensor | None = None,
        cond_latent: torch.Tensor | None = None,
        cond_mask: torch.Tensor | None = None,
        audio: torch.Tensor | None = None,
        audio_pos: torch.Tensor | None = None,
        frame_offset: int = 0,
    ) -> torch.Tensor:
        """Predict velocity for a batch of noisy latents [B, T, C, h, w].

        t is flow time in [0, 1] (scalar or [B]); text_ids of -1 (or None)
        select the null-text embedding; audio is [B, L, audio_dim] with
        L = tokens_per_frame * T, or None for the learned null sequence.
        audio_pos carries global token positions when a window is sampled
        mid-sequence; frame_offset shifts the video frame positions to match.
        """
        self._check_inputs(z)
        b, t_frames, _, h, w = z.shape
        device, dtype = z.device, z.dtype
        cfg = self.config

        x = self._embed_tokens(z, cond_latent, cond_mask)

        t_vec = torch.as_tensor(t, dtype=dtype, device=device).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(b)
        temb = self.time_mlp(timestep_embedding(t_vec, cfg.width))

        if text_ids is None:
            ids = torch.full((b,), self.null_text_id, dtype=torch.long, device=device)
        else:
            ids = torch.as_tensor(text_ids, dtype=torch.long, device=device).reshape(-1)
            if ids.numel() == 1:
                ids = ids.expand(b)
            ids = torch.where(ids < 0, torch.full_like(ids, self.null_text_id), ids)
            if int(ids.max()) > self.null_text_id:
                raise ValueError("text id out of vocabulary range")
        text_tokens = self.text_embed(ids).unsqueeze(1)  # [B, 1, d]

        num_audio = cfg.tokens_per_frame * t_frames
        if audio is None:
            audio = self.null_audio.to(dtype).expand(b, num_audio, cfg.audio_dim)
        elif audio.ndim == 2:
            audio = audio.unsqueeze(0).expand(b, -1, -1)
        if audio.shape[1] != num_audio:
            raise ValueError(
                f"audio has {audio.shape[1]} tokens, expected {num_audio} for {t_frames} frames"
            )
        if not torch.isfinite(audio).all():
            raise ValueError("audio tokens contain non-finite values")
        audio_tokens = self.audio_proj(audio)
        if audio_pos is None:
            audio_pos = torch.arange(num_audio, device=device) + cfg.tokens_per_frame * frame_offset
        else:
            audio_pos = torch.as_tensor(audio_pos, device=device)

        t_pos, h_pos, w_pos, audio_q_pos = self._positions(
            t_frames, h, w, frame_offset, device, dtype
        )

        for block in self.blocks:
            x = block(
                x,
                temb,
                (t_pos, h_pos, w_pos),
                text_tokens,
                audio_tokens if block.with_audio else None,
                audio_q_pos,
                audio_pos,
                disable_self=self.disable_self_attn,
                disable_text=self.disable_text_attn,
                record_audio_logits=self.record_audio_logits,
            )

        out = self.output_proj(self.norm_out(x))  # [B, N, C]
        return out.view(b, t_frames, h, w, cfg.in_channels).permute(0, 1, 4, 2, 3).contiguous()

    @torch.no_grad()
    def modulated_input(
        self,
        z: torch.Tensor,
        t: torch.Tensor | float,
        cond_latent: torch.Tensor | None = None,
        cond_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """First block's timestep-modulated input tokens; the change summary
        the step cache thresholds on."""
        self._check_inputs(z)
        b = z.shape[0]
        x = self._embed_tokens(z, cond_latent, cond_mask)
        t_vec = torch.as_tensor(t, dtype=z.dtype, device=z.device).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(b)
        temb = self.time_mlp(timestep_embedding(t_vec, self.config.width))
        block = self.blocks[0]
        shift, scale = block.modulation(temb).chunk(6, dim=-1)[:2]
        return _modulate(block.norm_sa(x), shift, scale)


class CheckpointError(ValueError):
    """Raised when a checkpoint file fails structural validation."""


def save_params(model: Denoiser, path, extras: dict | None = None) -> None:
    """Write the portable checkpoint: magic, JSON header, float32 tensors, CRC32."""
    state = model.state_dict()
    header = {
        "format_version": 1,
        "config": model.config.as_dict(),
        "extras": extras or {},
        "tensors": [
            {"name": name, "shape": list(tensor.shape)} for name, tensor in state.items()
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += len(header_bytes).to_bytes(4, "little")
    payload += header_bytes
    for tensor in state.values():
        array = tensor.detach().cpu().to(torch.float32).numpy()
        payload += np.ascontiguousarray(array, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(payload))
    payload += crc.to_bytes(4, "little")
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def load_params(path) -> tuple[Denoiser, dict]:
    """Read a checkpoint back into a fresh Denoiser; returns (model, extras).

    Raises CheckpointError with the byte offset of the first inconsistency.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError(f"file truncated at offset {len(raw)}: too short for a checkpoint")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic bytes at offset 0")

    stored_crc = int.from_bytes(raw[-4:], "little")
    actual_crc = zlib.crc32(raw[:-4])
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"checksum mismatch at offset {len(raw) - 4}: "
            f"stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )

    offset = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(raw[offset : offset + 4], "little")
    offset += 4
    if offset + header_len > len(raw) - 4:
        raise CheckpointError(f"header overruns file at offset {offset}")
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"invalid header JSON at offset {offset}: {exc}") from exc
    offset += header_len

    if header.get("format_version") != 1:
        raise CheckpointError(f"unsupported format version {header.get('format_version')!r}")
    try:
        config = DenoiserConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid config header: {exc}") from exc

    model = Denoiser(config)
    state = model.state_dict()
    declared = header.get("tensors", [])
    if [d["name"] for d in declared] != list(state.keys()):
        raise CheckpointError("tensor list in header does not match model parameters")

    loaded = {}
    for entry in declared:
        shape = tuple(entry["shape"])
        expected = tuple(state[entry["name"]].shape)
        if shape != expected:
            raise CheckpointError(
                f"tensor {entry['name']} has shape {shape}, model expects {expected}"
            )
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw) - 4:
            raise CheckpointError(f"tensor data truncated at offset {offset}")
        array = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        loaded[entry["name"]] = torch.from_numpy(array.copy())
        offset += nbytes
    if offset != len(raw) - 4:
        raise CheckpointError(f"unexpected trailing bytes at offset {offset}")

    model.load_state_dict(loaded)
    model.eval()
    return model, header.get("extras", {})
