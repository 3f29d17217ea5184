"""Dataset and artifact I/O: WAV/PNG serialization, dataset directories
with a JSON manifest, and the generation-job assembly shared by the CLI
and the test suite."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import inference
from .audio_features import AudioTokens, FeatureStats, featurize
from .codec import ConditionInputs, build_condition_inputs, encode, latent_channels, to_clip
from .denoiser import Denoiser
from .inference import SamplerConfig, SampleStats, blf_sample, hybrid_sample, init_noise, plan_windows
from .world import (
    TEXT_TAGS,
    AudioSignal,
    SceneSpec,
    TripletSample,
    VideoClip,
    filter_pool_report,
    gen_audio,
    mouth_box,
    render_video,
    sync_confidence,
)


def write_wav(path: Path | str, audio: AudioSignal) -> None:
    """16-bit PCM little-endian mono."""
    data = np.clip(audio.samples, -1.0, 1.0)
    pcm = np.round(data * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: Path | str) -> AudioSignal:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return AudioSignal(pcm.astype(np.float32) / 32767.0, rate)


def write_frames(dir_path: Path | str, clip: VideoClip) -> list[str]:
    """8-bit RGB PNGs, one per frame, zero-padded names."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    names = []
    for k in range(clip.num_frames):
        arr = np.round(clip.frames[k] * 255.0).astype(np.uint8)
        name = f"{k:05d}.png"
        Image.fromarray(arr, mode="RGB").save(dir_path / name)
        names.append(name)
    return names


def read_frames(dir_path: Path | str, fps: float) -> VideoClip:
    dir_path = Path(dir_path)
    files = sorted(dir_path.glob("*.png"))
    if not files:
        raise ValueError(f"no PNG frames found in {dir_path}")
    frames = np.stack(
        [np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0 for f in files]
    )
    return VideoClip(frames, fps)


def write_preview(path: Path | str, clip: VideoClip) -> None:
    """Animated GIF preview of a clip."""
    images = [
        Image.fromarray(np.round(f * 255.0).astype(np.uint8), mode="RGB") for f in clip.frames
    ]
    images[0].save(
        str(path),
        save_all=True,
        append_images=images[1:],
        duration=int(1000 / clip.fps),
        loop=0,
    )


def scene_to_dict(scene: SceneSpec) -> dict:
    return asdict(scene)


def scene_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(
        text_tag=d["text_tag"],
        blob_center=tuple(d["blob_center"]),
        blob_radius=d["blob_radius"],
        mouth_gain=d["mouth_gain"],
        head_bob_gain=d["head_bob_gain"],
        seed=d["seed"],
    )


def sample_scene(rng: np.random.Generator, seed: int) -> SceneSpec:
    """Random in-bounds scene used by data generation."""
    return SceneSpec(
        text_tag=TEXT_TAGS[int(rng.integers(0, len(TEXT_TAGS)))],
        blob_center=(float(rng.uniform(0.46, 0.54)), float(rng.uniform(0.46, 0.54))),
        blob_radius=float(rng.uniform(0.24, 0.30)),
        mouth_gain=float(rng.uniform(0.8, 1.0)),
        head_bob_gain=float(rng.uniform(0.0, 0.05)),
        seed=seed,
    )


def make_triplet(
    seed: int,
    duration_s: float,
    fps: float = 16,
    size: int = 32,
    scene: SceneSpec | None = None,
) -> TripletSample:
    """Render one synthetic triplet from a seed."""
    if scene is None:
        scene = sample_scene(np.random.default_rng(seed), seed)
    audio = gen_audio(seed, duration_s)
    return render_video(audio, scene, fps=fps, height=size, width=size)


@dataclass
class DatasetParams:
    num_samples: int = 200
    seed: int = 0
    fps: float = 16.0
    size: int = 32
    min_duration_s: float = 1.0
    max_duration_s: float = 3.0
    tokens_per_frame: int = 2
    num_bands: int = 16
    min_sync_c: float = 0.5
    max_abs_sync_d: int = 1


def generate_pool(params: DatasetParams) -> list[TripletSample]:
    rng = np.random.default_rng(params.seed)
    samples = []
    for i in range(params.num_samples):
        seed = int(rng.integers(0, 2**31 - 1))
        duration = float(rng.uniform(params.min_duration_s, params.max_duration_s))
        scene = sample_scene(rng, seed)
        samples.append(
            make_triplet(seed, duration, fps=params.fps, size=params.size, scene=scene)
        )
    return samples


def dataset_feature_stats(samples: list[TripletSample], params: DatasetParams) -> FeatureStats:
    from .audio_features import compute_stats

    raw = [
        featurize(
            s.audio,
            s.video.fps,
            s.video.num_frames,
            tokens_per_frame=params.tokens_per_frame,
            num_bands=params.num_bands,
        ).tokens
        for s in samples
    ]
    return compute_stats(raw)


def write_dataset(out_dir: Path | str, params: DatasetParams) -> dict:
    """Generate, funnel-filter, and persist a dataset directory.

    Layout: manifest.json at the root; per-sample audio.wav and frames/*.png
    under samples/<id>/. Returns the manifest dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    pool = generate_pool(params)
    kept, report = filter_pool_report(pool, params.min_sync_c, params.max_abs_sync_d)
    stats = dataset_feature_stats(kept, params)

    entries = []
    for idx, sample in enumerate(kept):
        sample_dir = out_dir / "samples" / f"{idx:04d}"
        sample_dir.mkdir(parents=True, exist_ok=True)
        write_wav(sample_dir / "audio.wav", sample.audio)
        write_frames(sample_dir / "frames", sample.video)
        sync_c, sync_d = sync_confidence(sample.video, sample.audio, sample.scene)
        entries.append(
            {
                "id": f"{idx:04d}",
                "seed": sample.scene.seed,
                "scene": scene_to_dict(sample.scene),
                "num_frames": sample.video.num_frames,
                "audio": f"samples/{idx:04d}/audio.wav",
                "frames_dir": f"samples/{idx:04d}/frames",
                "sync_c": sync_c,
                "sync_d": sync_d,
                "envelope": [float(v) for v in sample.envelope],
            }
        )

    manifest = {
        "fps": params.fps,
        "size": params.size,
        "tokens_per_frame": params.tokens_per_frame,
        "num_bands": params.num_bands,
        "tags": list(TEXT_TAGS),
        "funnel": report.as_dict(),
        "audio_stats": stats.as_dict(),
        "samples": entries,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


@dataclass
class DatasetBundle:
    samples: list[TripletSample]
    stats: FeatureStats
    manifest: dict


def load_dataset(root: Path | str) -> DatasetBundle:
    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    samples = []
    for entry in manifest["samples"]:
        audio = read_wav(root / entry["audio"])
        video = read_frames(root / entry["frames_dir"], manifest["fps"])
        samples.append(
            TripletSample(
                audio=audio,
                video=video,
                scene=scene_from_dict(entry["scene"]),
                envelope=np.array(entry["envelope"], dtype=np.float32),
            )
        )
    return DatasetBundle(samples, FeatureStats.from_dict(manifest["audio_stats"]), manifest)


@dataclass
class GenerationJob:
    """Everything needed to run one sampling job against a checkpoint."""

    model: Denoiser
    audio: AudioSignal
    text_id: int
    scene: SceneSpec | None
    fps: float
    size: int
    stats: FeatureStats | None


def animation_provider(ref: VideoClip, patch_size: int):
    """Per-window conditions: the reference frame pinned at the window start."""
    cache: dict[int, ConditionInputs] = {}

    def provider(window) -> ConditionInputs:
        s, e = window
        n = e - s
        if n not in cache:
            cache[n] = build_condition_inputs("animation", ref, None, n, patch_size)
        return cache[n]

    return provider


def editing_provider(video: VideoClip, box, patch_size: int):
    """Per-window conditions sliced from a masked source video."""
    cache: dict[tuple[int, int], ConditionInputs] = {}

    def provider(window) -> ConditionInputs:
        s, e = window
        if (s, e) not in cache:
            clip = VideoClip(video.frames[s:e], video.fps)
            cache[(s, e)] = build_condition_inputs("editing", clip, box, e - s, patch_size)
        return cache[(s, e)]

    return provider


def run_generation(
    job: GenerationJob,
    config: SamplerConfig,
    num_frames: int,
    ref_clip: VideoClip,
    mode: str = "animation",
    source_video: VideoClip | None = None,
    stats: SampleStats | None = None,
) -> tuple[VideoClip, SampleStats]:
    """Featurize audio, build providers, sample, and decode to pixels."""
    cfg = job.model.config
    tokens = featurize(
        job.audio,
        job.fps,
        num_frames,
        tokens_per_frame=cfg.tokens_per_frame,
        num_bands=cfg.audio_dim,
        stats=job.stats,
    )
    h = w = job.size // cfg.patch_size
    z_init = init_noise(num_frames, latent_channels(cfg.patch_size), h, w, config.seed)
    stats = stats if stats is not None else SampleStats()

    image_prov = animation_provider(ref_clip, cfg.patch_size)
    if mode == "animation":
        z = blf_sample(
            job.model, image_prov, tokens, job.text_id, num_frames, config, z_init, stats
        )
    elif mode == "editing":
        if source_video is None or job.scene is None:
            raise ValueError("editing mode needs a source video and scene")
        box = mouth_box(job.scene, job.size, job.size)
        video_prov = editing_provider(source_video, box, cfg.patch_size)
        if config.hybrid_switch > 0:
            z = hybrid_sample(
                job.model, video_prov, image_prov, tokens, job.text_id,
                num_frames, config, z_init, stats,
            )
        else:
            z = blf_sample(
                job.model, video_prov, tokens, job.text_id, num_frames, config, z_init, stats
            )
    else:
        raise ValueError(f"unknown generation mode {mode!r}")

    return to_clip(z, job.fps), stats


def generation_plan(num_frames: int, config: SamplerConfig) -> list[tuple[int, int]]:
    return plan_windows(num_frames, min(config.window, num_frames), config.overlap)
