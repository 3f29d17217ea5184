import json
import zlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from blobtalk.denoiser import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    Denoiser,
    DenoiserConfig,
    load_params,
    rope_axis_dims,
    rope_rotate,
    save_params,
)


def tiny_config(**kwargs) -> DenoiserConfig:
    base = dict(width=16, depth=1, heads=2, patch_size=4, audio_dim=8, tokens_per_frame=2)
    base.update(kwargs)
    return DenoiserConfig(**base)


def seeded_model(config=None, seed=0, scale=0.05) -> Denoiser:
    torch.manual_seed(seed)
    model = Denoiser(config or tiny_config())
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * scale)
    return model


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(width=10, heads=4)  # not divisible by 2*heads
    with pytest.raises(ValueError):
        DenoiserConfig(depth=0)
    with pytest.raises(ValueError):
        DenoiserConfig(depth=2, audio_xattn_layers=(5,))


def test_rope_position_zero_identity():
    x = torch.randn(3, 8, dtype=torch.float64)
    out = rope_rotate(x, torch.zeros(3))
    assert torch.allclose(out, x, atol=1e-12)


def test_rope_rejects_odd_dim():
    with pytest.raises(ValueError):
        rope_rotate(torch.randn(2, 5), torch.arange(2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.integers(-50, 50))
def test_rope_relative_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    q = torch.from_numpy(rng.standard_normal(16))
    k = torch.from_numpy(rng.standard_normal(16))
    m, n = map(int, rng.integers(0, 100, 2))
    dot = lambda a, b: float((a * b).sum())
    base = dot(
        rope_rotate(q[None], torch.tensor([m]))[0], rope_rotate(k[None], torch.tensor([n]))[0]
    )
    shifted = dot(
        rope_rotate(q[None], torch.tensor([m + shift]))[0],
        rope_rotate(k[None], torch.tensor([n + shift]))[0],
    )
    assert shifted == pytest.approx(base, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), pos=st.integers(0, 10**4))
def test_rope_norm_preservation(seed, pos):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.standard_normal((4, 12)))
    out = rope_rotate(x, torch.full((4,), pos))
    assert float(out.norm()) == pytest.approx(float(x.norm()), abs=1e-6)


def test_rope_axis_dims():
    assert rope_axis_dims(16) == (6, 6, 4)
    assert rope_axis_dims(8) == (4, 2, 2)
    assert rope_axis_dims(12) == (4, 4, 4)
    for d in (2, 4, 6, 8, 10, 16, 24):
        dims = rope_axis_dims(d)
        assert sum(dims) == d
        assert all(g % 2 == 0 for g in dims)


def _inputs(config, frames=2, batch=1, seed=0):
    rng = np.random.default_rng(seed)
    c = config.in_channels
    z = torch.from_numpy(rng.standard_normal((batch, frames, c, 2, 2)).astype(np.float32))
    audio = torch.from_numpy(
        rng.standard_normal((batch, config.tokens_per_frame * frames, config.audio_dim)).astype(
            np.float32
        )
    )
    return z, audio


def test_forward_shape_and_zero_init_head():
    config = tiny_config()
    model = Denoiser(config)  # fresh init: output projection is zero
    z, audio = _inputs(config)
    out = model(z, 0.5, text_ids=torch.tensor([1]), audio=audio)
    assert out.shape == z.shape
    assert torch.all(out == 0)


def test_forward_deterministic_bitwise():
    model = seeded_model()
    z, audio = _inputs(model.config)
    a = model(z, 0.25, text_ids=torch.tensor([0]), audio=audio)
    b = model(z, 0.25, text_ids=torch.tensor([0]), audio=audio)
    assert torch.equal(a, b)


def test_null_condition_substitution_paths():
    model = seeded_model()
    config = model.config
    z, _ = _inputs(config)
    frames = z.shape[1]
    null_seq = model.null_audio.detach().expand(
        1, config.tokens_per_frame * frames, config.audio_dim
    )
    out_none = model(z, 0.3, text_ids=torch.tensor([2]), audio=None)
    out_null = model(z, 0.3, text_ids=torch.tensor([2]), audio=null_seq)
    assert torch.equal(out_none, out_null)
    out_no_text = model(z, 0.3, text_ids=None)
    out_neg_text = model(z, 0.3, text_ids=torch.tensor([-1]))
    assert torch.equal(out_no_text, out_neg_text)


def test_forward_rejects_bad_inputs():
    model = seeded_model()
    z, audio = _inputs(model.config)
    with pytest.raises(ValueError):
        model(torch.full_like(z, float("nan")), 0.5)
    with pytest.raises(ValueError):
        model(z[:, :, :10], 0.5)  # wrong channel count
    with pytest.raises(ValueError):
        model(z, 0.5, audio=audio[:, :3])  # wrong token count
    with pytest.raises(ValueError):
        model(z, 0.5, text_ids=torch.tensor([99]))


def test_audio_attention_shift_equivariance():
    config = tiny_config(width=32, heads=2)
    model = seeded_model(config, seed=4, scale=0.1).double()
    model.disable_self_attn = True
    model.disable_text_attn = True
    model.record_audio_logits = True

    frames, r = 3, config.tokens_per_frame
    rng = np.random.default_rng(7)
    z = torch.from_numpy(rng.standard_normal((1, frames, config.in_channels, 2, 2)))
    audio = torch.from_numpy(rng.standard_normal((1, r * frames, config.audio_dim)))
    pos = torch.arange(r * frames)

    model(z, 0.4, audio=audio, audio_pos=pos, frame_offset=0)
    logits_base = model.blocks[0].audio_attn.last_logits.clone()

    shift = 5
    model(z, 0.4, audio=audio, audio_pos=pos + r * shift, frame_offset=shift)
    logits_shifted = model.blocks[0].audio_attn.last_logits.clone()

    assert torch.allclose(logits_base, logits_shifted, atol=1e-6)


def test_video_positions_affect_attention():
    # sanity inverse of the probe: shifting only audio positions changes logits
    config = tiny_config(width=32, heads=2)
    model = seeded_model(config, seed=4, scale=0.1).double()
    model.disable_self_attn = model.disable_text_attn = True
    model.record_audio_logits = True
    z, audio = _inputs(config, frames=3)
    model(z.double(), 0.4, audio=audio.double())
    base = model.blocks[0].audio_attn.last_logits.clone()
    model(z.double(), 0.4, audio=audio.double(),
          audio_pos=torch.arange(audio.shape[1]) + 3)
    moved = model.blocks[0].audio_attn.last_logits.clone()
    assert not torch.allclose(base, moved, atol=1e-6)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = seeded_model(seed=11)
    z, audio = _inputs(model.config, seed=5)
    before = model(z, 0.7, text_ids=torch.tensor([1]), audio=audio)
    path = tmp_path / "model.bin"
    save_params(model, path, extras={"tags": ["a", "b"], "note": 3})
    loaded, extras = load_params(path)
    after = loaded(z, 0.7, text_ids=torch.tensor([1]), audio=audio)
    assert torch.equal(before, after)
    assert extras == {"tags": ["a", "b"], "note": 3}


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.bin"
    save_params(seeded_model(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_params(path)


def test_checkpoint_checksum_mismatch(tmp_path):
    path = tmp_path / "model.bin"
    save_params(seeded_model(), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_params(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "model.bin"
    save_params(seeded_model(), path)
    path.write_bytes(path.read_bytes()[:5])
    with pytest.raises(CheckpointError, match="offset"):
        load_params(path)


def test_checkpoint_wrong_config_header(tmp_path):
    path = tmp_path / "model.bin"
    save_params(seeded_model(), path)
    raw = path.read_bytes()
    hlen = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12 : 12 + hlen])
    header["config"]["nonsense_key"] = 1
    new_header = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + len(new_header).to_bytes(4, "little") + new_header + raw[12 + hlen : -4]
    body += zlib.crc32(body).to_bytes(4, "little")
    path.write_bytes(body)
    with pytest.raises(CheckpointError, match="config"):
        load_params(path)


def test_modulated_input_shape():
    model = seeded_model()
    z, _ = _inputs(model.config)
    summary = model.modulated_input(z, 0.2)
    assert summary.shape == (1, z.shape[1] * 4, model.config.width)
    summary2 = model.modulated_input(z, 0.2)
    assert torch.equal(summary, summary2)
