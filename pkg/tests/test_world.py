import numpy as np
import pytest

from blobtalk.world import (
    AudioSignal,
    SceneSpec,
    TripletSample,
    VideoClip,
    audio_envelope,
    filter_pool,
    filter_pool_report,
    gen_audio,
    mouth_aperture,
    render_frame,
    render_video,
    sync_confidence,
)


def test_gen_audio_length_and_peak():
    audio = gen_audio(7, 1.0, 16000)
    assert audio.samples.shape == (16000,)
    assert np.abs(audio.samples).max() == pytest.approx(0.95, abs=1e-6)


def test_gen_audio_deterministic():
    a = gen_audio(7, 1.0)
    b = gen_audio(7, 1.0)
    assert np.array_equal(a.samples, b.samples)


def test_gen_audio_seeds_differ_in_segments():
    a = gen_audio(7, 1.0)
    b = gen_audio(8, 1.0)
    # Compare on/off gating at coarse resolution: active-sample masks differ.
    mask_a = np.abs(a.samples) > 1e-4
    mask_b = np.abs(b.samples) > 1e-4
    assert not np.array_equal(mask_a, mask_b)


def test_gen_audio_rejects_bad_duration():
    with pytest.raises(ValueError):
        gen_audio(0, 0.0)
    with pytest.raises(ValueError):
        gen_audio(0, -1.0)


def _silence(duration_s=1.0, rate=16000):
    return AudioSignal(np.zeros(int(duration_s * rate), dtype=np.float32), rate)


def test_render_silent_audio_closed_mouth():
    scene = SceneSpec()
    trip = render_video(_silence(), scene)
    assert np.all(trip.envelope == 0)
    for frame in trip.video.frames:
        assert mouth_aperture(frame, scene) == pytest.approx(0.0, abs=0.02)
    # no head bob either: every frame identical
    assert np.array_equal(trip.video.frames[0], trip.video.frames[-1])


def test_constant_amplitude_audio_gives_unit_envelope():
    rate = 16000
    t = np.arange(rate) / rate
    audio = AudioSignal((0.9 * np.sin(2 * np.pi * 220 * t)).astype(np.float32), rate)
    trip = render_video(audio, SceneSpec())
    assert trip.envelope == pytest.approx(np.ones_like(trip.envelope), abs=1e-3)


def test_render_measure_consistency():
    scene = SceneSpec(head_bob_gain=0.05)
    trip = render_video(gen_audio(7, 1.0), scene, fps=16)
    assert trip.video.num_frames == 16
    measured = np.array([mouth_aperture(f, scene) for f in trip.video.frames])
    corr = np.corrcoef(measured, trip.envelope)[0, 1]
    assert corr >= 0.99


def test_render_rejects_indivisible_dims():
    with pytest.raises(ValueError):
        render_video(gen_audio(1, 1.0), SceneSpec(), height=30, width=32)


def test_render_rejects_too_short_audio():
    with pytest.raises(ValueError):
        render_video(_silence(0.01), SceneSpec())


def test_render_rejects_out_of_bounds_scene():
    with pytest.raises(ValueError):
        render_video(gen_audio(1, 1.0), SceneSpec(blob_center=(0.1, 0.5), blob_radius=0.3))


def test_aperture_full_open_near_max():
    scene = SceneSpec(mouth_gain=1.0)
    frame = render_frame(scene, 1.0, 0.0, 32, 32)
    assert mouth_aperture(frame, scene) == pytest.approx(1.0, rel=0.05)


def test_aperture_monotone():
    scene = SceneSpec()
    values = [
        mouth_aperture(render_frame(scene, a, 0.0, 32, 32), scene) for a in (0.2, 0.5, 0.9)
    ]
    assert values[0] < values[1] < values[2]


def test_aperture_invariant_to_head_bob():
    scene = SceneSpec(head_bob_gain=0.05)
    still = mouth_aperture(render_frame(scene, 0.6, 0.0, 32, 32), scene)
    bobbed = mouth_aperture(render_frame(scene, 0.6, 0.05, 32, 32), scene)
    assert bobbed == pytest.approx(still, rel=0.1)


def test_sync_matched_pair():
    trip = render_video(gen_audio(21, 2.0), SceneSpec())
    sync_c, sync_d = sync_confidence(trip.video, trip.audio, trip.scene)
    assert sync_c >= 0.95
    assert sync_d == 0


def test_sync_mismatched_below_matched():
    a = render_video(gen_audio(21, 2.0), SceneSpec())
    b = gen_audio(99, 2.0)
    matched, _ = sync_confidence(a.video, a.audio, a.scene)
    mismatched, _ = sync_confidence(a.video, b, a.scene)
    assert abs(mismatched) < matched


def test_sync_zero_variance_video():
    scene = SceneSpec()
    frame = render_frame(scene, 0.5, 0.0, 32, 32)
    clip = VideoClip(np.repeat(frame[None], 16, axis=0), 16)
    sync_c, sync_d = sync_confidence(clip, gen_audio(3, 1.0), scene)
    assert sync_c == 0.0 and sync_d == 0


def test_sync_requires_eight_frames():
    trip = render_video(gen_audio(5, 1.0), SceneSpec())
    short = VideoClip(trip.video.frames[:7], 16)
    with pytest.raises(ValueError):
        sync_confidence(short, trip.audio, trip.scene)


def test_sync_detects_known_lag_and_reversal_symmetry():
    audio = gen_audio(31, 2.0)
    scene = SceneSpec()
    trip = render_video(audio, scene)
    shift = 2
    spf = audio.sample_rate // 16  # samples per frame
    delayed = AudioSignal(np.roll(audio.samples, shift * spf), audio.sample_rate)
    c_fwd, d_fwd = sync_confidence(trip.video, delayed, scene)
    assert d_fwd == -shift  # mouth leads the delayed audio
    rev_clip = VideoClip(trip.video.frames[::-1].copy(), trip.video.fps)
    rev_audio = AudioSignal(delayed.samples[::-1].copy(), audio.sample_rate)
    c_rev, d_rev = sync_confidence(rev_clip, rev_audio, scene)
    assert d_rev == -d_fwd
    assert c_rev == pytest.approx(c_fwd, abs=1e-6)


def _mini_pool(n=10, duration=2.0, base_seed=500):
    return [render_video(gen_audio(base_seed + i, duration), SceneSpec()) for i in range(n)]


def test_filter_pool_vacuous_and_impossible():
    pool = _mini_pool(4)
    assert filter_pool(pool, -1.0, 10**6) == pool
    assert filter_pool(pool, 1.01, 0) == []


def test_filter_pool_keeps_matched_removes_shuffled():
    matched = _mini_pool(10, duration=2.0)
    shuffled = [
        TripletSample(
            audio=matched[(i + 1) % 10].audio,
            video=matched[i].video,
            scene=matched[i].scene,
            envelope=matched[i].envelope,
        )
        for i in range(10)
    ]
    kept, report = filter_pool_report(matched + shuffled, 0.5, 1)
    kept_matched = [s for s in kept if s in matched]
    kept_shuffled = [s for s in kept if s not in matched]
    assert len(kept_matched) == 10
    assert len(kept_shuffled) <= 2
    assert report.total == 20
    assert report.passed_sync_d == len(kept)


def test_filter_pool_idempotent_and_order_preserving():
    pool = _mini_pool(8)
    once = filter_pool(pool, 0.5, 1)
    twice = filter_pool(once, 0.5, 1)
    assert once == twice
    indices = [pool.index(s) for s in once]
    assert indices == sorted(indices)


def test_render_deterministic():
    a = render_video(gen_audio(4, 1.0), SceneSpec())
    b = render_video(gen_audio(4, 1.0), SceneSpec())
    assert np.array_equal(a.video.frames, b.video.frames)
    assert np.array_equal(a.envelope, b.envelope)


def test_envelope_matches_headline_definition():
    # independent check: rms per frame, 3-frame truncated mean, max-normalized
    audio = gen_audio(13, 1.0)
    frames = 16
    spf = audio.sample_rate // 16
    rms = np.array(
        [
            np.sqrt(np.mean(audio.samples[k * spf : (k + 1) * spf].astype(np.float64) ** 2))
            for k in range(frames)
        ]
    )
    smooth = np.array(
        [rms[max(0, k - 1) : min(frames, k + 2)].mean() for k in range(frames)]
    )
    expected = smooth / smooth.max()
    got = audio_envelope(audio, 16, frames)
    assert got == pytest.approx(expected, abs=1e-6)
