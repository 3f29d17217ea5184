import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from blobtalk.codec import (
    build_condition_inputs,
    decode,
    encode,
    latent_channels,
    pool_mask,
    to_clip,
)
from blobtalk.oracles import maxpool_reference
from blobtalk.world import SceneSpec, VideoClip, gen_audio, mouth_box, render_video


def test_encode_shape():
    clip = np.zeros((16, 32, 32, 3), dtype=np.float32)
    z = encode(clip, 4)
    assert tuple(z.shape) == (16, 48, 8, 8)
    assert latent_channels(4) == 48


def test_encode_zero_is_zero():
    z = encode(np.zeros((2, 8, 8, 3), dtype=np.float32), 4)
    assert torch.all(z == 0)


def test_roundtrip_exact_on_rendered_clip():
    trip = render_video(gen_audio(3, 1.0), SceneSpec())
    z = encode(trip.video, 4)
    assert np.array_equal(decode(z), trip.video.frames)


@settings(max_examples=30, deadline=None)
@given(
    t=st.integers(1, 4),
    hw=st.sampled_from([8, 16]),
    p=st.sampled_from([2, 4]),
    seed=st.integers(0, 10**6),
)
def test_roundtrip_exact_on_arbitrary_inputs(t, hw, p, seed):
    rng = np.random.default_rng(seed)
    frames = rng.standard_normal((t, hw, hw, 3)).astype(np.float32) * 10
    assert np.array_equal(decode(encode(frames, p)), frames)


def test_encode_rejects_indivisible():
    with pytest.raises(ValueError):
        encode(np.zeros((1, 30, 32, 3), dtype=np.float32), 4)


def test_decode_rejects_bad_channels():
    with pytest.raises(ValueError):
        decode(torch.zeros(1, 47, 8, 8))


def test_decode_shape():
    assert decode(torch.zeros(16, 48, 8, 8)).shape == (16, 32, 32, 3)


def test_to_clip_clamps():
    z = encode(np.full((1, 8, 8, 3), 2.0, dtype=np.float32), 4)
    clip = to_clip(z, 16)
    assert clip.frames.max() <= 1.0


def test_pool_mask_all_ones():
    pooled = pool_mask(np.ones((2, 8, 8)), 4)
    assert tuple(pooled.shape) == (2, 1, 2, 2)
    assert torch.all(pooled == 1)


def test_pool_mask_single_hot_block():
    mask = np.zeros((1, 8, 8))
    mask[0, 5, 6] = 1
    pooled = pool_mask(mask, 4)
    assert pooled[0, 0, 1, 1] == 1
    assert pooled.sum() == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.sampled_from([2, 4]))
def test_pool_mask_matches_nested_loop_oracle(seed, p):
    rng = np.random.default_rng(seed)
    mask = (rng.random((3, 8, 8)) < 0.3).astype(np.float64)
    pooled = pool_mask(mask, p).squeeze(1).numpy()
    assert np.array_equal(pooled, maxpool_reference(mask, p))


def test_pool_mask_rejects_non_binary():
    with pytest.raises(ValueError):
        pool_mask(np.full((1, 4, 4), 0.5), 2)


def test_minpool_duality():
    rng = np.random.default_rng(8)
    mask = (rng.random((2, 8, 8)) < 0.5).astype(np.float64)
    maxpooled = pool_mask(mask, 4).squeeze(1).numpy()

    def minpool(m, p):
        t, hh, ww = m.shape
        out = np.ones((t, hh // p, ww // p))
        for k in range(t):
            for i in range(hh // p):
                for j in range(ww // p):
                    out[k, i, j] = m[k, i * p : (i + 1) * p, j * p : (j + 1) * p].min()
        return out

    assert np.array_equal(1 - maxpooled, minpool(1 - mask, 4))
    # and the naive complement identity does NOT hold in general
    assert not np.array_equal(1 - maxpooled, pool_mask(1 - mask, 4).squeeze(1).numpy())


def _ref_clip():
    trip = render_video(gen_audio(17, 1.0), SceneSpec())
    return trip


def test_condition_inputs_animation_mask_template():
    trip = _ref_clip()
    cond = build_condition_inputs("animation", trip.video, None, 8, 4)
    sums = cond.cond_mask.sum(dim=(1, 2, 3)).tolist()
    assert sums == [64.0] + [0.0] * 7  # h*w ones on frame 0 only
    assert torch.all((cond.cond_mask == 0) | (cond.cond_mask == 1))
    # frames past 0 encode empty (zero) pixels
    assert torch.all(cond.cond_latent[1:] == 0)
    assert np.array_equal(decode(cond.cond_latent[:1]), trip.video.frames[:1])


def test_condition_inputs_editing_full_frame_box():
    trip = _ref_clip()
    t = trip.video.num_frames
    cond = build_condition_inputs("editing", trip.video, (0, 32, 0, 32), t, 4)
    assert torch.all(cond.cond_latent[1:] == 0)
    assert torch.all(cond.cond_mask[1:] == 1)
    assert torch.all(cond.cond_mask[0] == 1)


def test_condition_inputs_editing_mouth_box_pixels():
    trip = _ref_clip()
    t = trip.video.num_frames
    box = mouth_box(trip.scene, 32, 32)
    cond = build_condition_inputs("editing", trip.video, box, t, 4)
    decoded = decode(cond.cond_latent)
    r0, r1, c0, c1 = box
    assert np.all(decoded[1:, r0:r1, c0:c1] == 0)
    outside = decoded[1:].copy()
    source = trip.video.frames[1:t].copy()
    outside[:, r0:r1, c0:c1] = 0
    source[:, r0:r1, c0:c1] = 0
    assert np.array_equal(outside, source)


def test_condition_inputs_editing_requires_boxes():
    trip = _ref_clip()
    with pytest.raises(ValueError):
        build_condition_inputs("editing", trip.video, None, trip.video.num_frames, 4)


def test_condition_inputs_rejects_unknown_task():
    trip = _ref_clip()
    with pytest.raises(ValueError):
        build_condition_inputs("restyle", trip.video, None, 4, 4)
