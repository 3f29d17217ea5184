"""Command-line entry points: gen-data, train, infer, eval, bench, oracle.

Option precedence is CLI flag > config file > built-in default; config
files are flat UTF-8 ``key = value`` text with ``#`` comments. Every
command is deterministic given --seed and exits nonzero with a one-line
``error: ...`` message on failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import oracles
from .audio_features import FeatureStats
from .data import (
    DatasetParams,
    GenerationJob,
    generation_plan,
    load_dataset,
    read_frames,
    read_wav,
    run_generation,
    scene_from_dict,
    write_dataset,
    write_frames,
    write_preview,
)
from .denoiser import Denoiser, DenoiserConfig, load_params
from .evaluation import evaluate, seam_gap_ratio
from .inference import SamplerConfig, SampleStats
from .training import TrainConfig, prepare_sample, train_loop
from .world import TEXT_TAGS, VideoClip


def _parse_value(text: str):
    lowered = text.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text.strip()


def load_config_file(path: str | Path) -> dict:
    """Flat key = value config text."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = _parse_value(value)
    return values


def resolve_options(defaults: dict, args: argparse.Namespace, keys: list[str]) -> dict:
    """defaults <- config file <- explicit CLI flags."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        file_values = load_config_file(config_path)
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_values)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _maybe_print_config(args: argparse.Namespace, options: dict) -> bool:
    if getattr(args, "print_config", False):
        for key in sorted(options):
            print(f"{key} = {options[key]}")
        return True
    return False


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective options and exit")


GEN_DEFAULTS = dict(
    num_samples=200, seed=0, fps=16.0, size=32, min_duration_s=1.0, max_duration_s=3.0,
    tokens_per_frame=2, num_bands=16, min_sync_c=0.5, max_abs_sync_d=1,
)


def cmd_gen_data(args: argparse.Namespace) -> int:
    opts = resolve_options(GEN_DEFAULTS, args, list(GEN_DEFAULTS))
    if _maybe_print_config(args, opts):
        return 0
    manifest = write_dataset(args.out, DatasetParams(**opts))
    funnel = manifest["funnel"]
    print(
        f"wrote {len(manifest['samples'])} samples to {args.out} "
        f"(funnel: {funnel['total']} -> {funnel['passed_sync_c']} -> {funnel['passed_sync_d']})"
    )
    return 0


TRAIN_DEFAULTS = dict(
    steps=2000, batch_size=4, lr=1e-3, seed=0, stage=2, width=64, depth=2, heads=4,
    crop_frames=16, mask_weight=2.0, unmask_weight=1.0, p_mask=0.5, dropout_p=0.15,
    face_weight=1.0, face_mode="sum", edit_ratio=0.5, log_interval=50,
    checkpoint_interval=1000,
)


def cmd_train(args: argparse.Namespace) -> int:
    opts = resolve_options(TRAIN_DEFAULTS, args, list(TRAIN_DEFAULTS))
    if _maybe_print_config(args, opts):
        return 0
    bundle = load_dataset(args.data)
    model_cfg = DenoiserConfig(
        width=opts["width"], depth=opts["depth"], heads=opts["heads"],
        tokens_per_frame=bundle.manifest["tokens_per_frame"],
        audio_dim=bundle.manifest["num_bands"],
        text_vocab=len(bundle.manifest["tags"]),
    )
    train_cfg = TrainConfig(
        mask_weight=opts["mask_weight"], unmask_weight=opts["unmask_weight"],
        p_mask=opts["p_mask"], dropout_p=opts["dropout_p"], face_weight=opts["face_weight"],
        face_mode=opts["face_mode"], batch_size=opts["batch_size"], steps=opts["steps"],
        lr=opts["lr"], stage=opts["stage"], edit_ratio=opts["edit_ratio"],
        crop_frames=opts["crop_frames"], seed=opts["seed"],
        log_interval=opts["log_interval"], checkpoint_interval=opts["checkpoint_interval"],
    )
    model = Denoiser(model_cfg)
    prepared = [prepare_sample(s, model_cfg, bundle.stats) for s in bundle.samples]
    extras = {
        "audio_stats": bundle.stats.as_dict(),
        "tags": bundle.manifest["tags"],
        "fps": bundle.manifest["fps"],
        "size": bundle.manifest["size"],
    }
    result = train_loop(prepared, model, train_cfg, args.out, extras=extras,
                        resume_state=args.resume)
    print(
        f"trained {train_cfg.steps} steps ({model.parameter_count()} params); "
        f"checkpoint at {result.checkpoint_path}"
    )
    return 0


INFER_DEFAULTS = dict(
    frames=48, window=16, overlap=4, steps=50, cfg_audio=4.5, cfg_text=1.0,
    cfg_mode="normalized", hybrid_n=0, cache_alpha=0.0, seed=0, text="studio",
    color_fix=True,
)


def _load_job(checkpoint: str, audio_path: str, text: str) -> GenerationJob:
    model, extras = load_params(checkpoint)
    tags = extras.get("tags", list(TEXT_TAGS))
    if text not in tags:
        raise ValueError(f"unknown text tag {text!r}; checkpoint knows {tags}")
    stats = FeatureStats.from_dict(extras["audio_stats"]) if extras.get("audio_stats") else None
    return GenerationJob(
        model=model,
        audio=read_wav(audio_path),
        text_id=tags.index(text),
        scene=None,
        fps=extras.get("fps", 16.0),
        size=extras.get("size", 32),
        stats=stats,
    )


def _sampler_config(opts: dict) -> SamplerConfig:
    return SamplerConfig(
        steps=opts["steps"], cfg_audio=opts["cfg_audio"], cfg_text=opts["cfg_text"],
        cfg_mode=opts["cfg_mode"], window=opts["window"], overlap=opts["overlap"],
        hybrid_switch=opts["hybrid_n"], cache_alpha=opts["cache_alpha"], seed=opts["seed"],
    )


def cmd_infer(args: argparse.Namespace) -> int:
    opts = resolve_options(INFER_DEFAULTS, args, list(INFER_DEFAULTS))
    if _maybe_print_config(args, opts):
        return 0
    job = _load_job(args.checkpoint, args.audio, opts["text"])
    config = _sampler_config(opts)
    num_frames = opts["frames"]

    if args.ref_video:
        source = read_frames(args.ref_video, job.fps)
        if args.scene is None:
            raise ValueError("editing mode (--ref-video) needs --scene for the mouth box")
        job.scene = scene_from_dict(json.loads(Path(args.scene).read_text()))
        ref_clip = VideoClip(source.frames[:1], job.fps)
        mode = "editing"
    elif args.ref_image:
        ref_clip = _single_image(args.ref_image, job.fps)
        source = None
        mode = "animation"
    else:
        raise ValueError("provide --ref-image (animation) or --ref-video (editing)")

    stats = SampleStats()
    clip, stats = run_generation(
        job, config, num_frames, ref_clip, mode=mode, source_video=source, stats=stats
    )
    if opts["color_fix"]:
        from .inference import color_unify

        clip = color_unify(clip, ref_frames=min(config.window, clip.num_frames))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_frames(out / "frames", clip)
    write_preview(out / "preview.gif", clip)
    plan = generation_plan(num_frames, config)
    metrics = {
        "config": {k: opts[k] for k in sorted(opts)},
        "plan": plan,
        "sampler": stats.as_dict(),
        "seam_gap_ratio": seam_gap_ratio(clip.frames, plan),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    print(f"wrote {clip.num_frames} frames to {out} "
          f"({stats.denoiser_calls} denoiser calls, {stats.skipped_evals} skipped evals)")
    return 0


def _single_image(path: str, fps: float) -> VideoClip:
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return VideoClip(arr[None], fps)


def cmd_eval(args: argparse.Namespace) -> int:
    scene = scene_from_dict(json.loads(Path(args.scene).read_text()))
    clip = read_frames(args.frames_dir, args.fps)
    audio = read_wav(args.audio)
    ref = _single_image(args.ref_image, args.fps).frames[0]
    plan = None
    if args.window:
        config = SamplerConfig(window=args.window, overlap=args.overlap, steps=1)
        plan = generation_plan(clip.num_frames, config)
    report = evaluate(clip, audio, ref, scene, plan)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


BENCH_DEFAULTS = dict(
    frames=32, window=16, overlap=4, steps=50, cfg_audio=4.5, cfg_text=1.0,
    cfg_mode="normalized", hybrid_n=0, seed=0, text="studio",
)


def cmd_bench(args: argparse.Namespace) -> int:
    opts = resolve_options(BENCH_DEFAULTS, args, list(BENCH_DEFAULTS))
    if _maybe_print_config(args, opts):
        return 0
    job = _load_job(args.checkpoint, args.audio, opts["text"])
    ref_clip = _single_image(args.ref_image, job.fps)
    alphas = [float(a) for a in args.alphas.split(",")]
    if alphas[0] != 0.0:
        alphas = [0.0] + alphas

    rows = []
    baseline = None
    for alpha in alphas:
        config = _sampler_config({**opts, "cache_alpha": alpha})
        stats = SampleStats()
        start = time.perf_counter()
        clip, stats = run_generation(job, config, opts["frames"], ref_clip, stats=stats)
        elapsed = time.perf_counter() - start
        if baseline is None:
            baseline = clip.frames
        mse = float(np.mean((clip.frames.astype(np.float64) - baseline.astype(np.float64)) ** 2))
        psnr = float("inf") if mse == 0 else float(10 * np.log10(1.0 / mse))
        total = stats.window_evals + stats.skipped_evals
        rows.append(
            {
                "alpha": alpha,
                "wall_time_s": round(elapsed, 3),
                "denoiser_calls": stats.denoiser_calls,
                "window_evals": total,
                "skipped_evals": stats.skipped_evals,
                "skip_rate": stats.skipped_evals / total if total else 0.0,
                "psnr_db": psnr,
            }
        )

    writer = csv.DictWriter(
        sys.stdout if not args.out else open(args.out, "w", newline=""),
        fieldnames=list(rows[0]),
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    sub = args.oracle_cmd
    if sub == "windows":
        print(json.dumps(oracles.plan_windows_reference(args.length, args.window, args.overlap)))
    elif sub == "fuse":
        print(json.dumps(oracles.fuse_weights_reference(args.overlap)))
    elif sub == "masked-loss":
        rng = np.random.default_rng(args.seed)
        shape = (2, 3, 4, 4)
        pred = rng.standard_normal(shape)
        target = rng.standard_normal(shape)
        mask = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.float64)
        print(
            json.dumps(
                {
                    "weighted": oracles.weighted_mse_reference(pred, target, mask, args.w1, args.w2),
                    "masked_mean": oracles.masked_mean_mse_reference(pred, target, mask),
                }
            )
        )
    elif sub == "blf-affine":
        rng = np.random.default_rng(args.seed)
        shape = (args.length, 2, 3, 3)
        z0 = rng.standard_normal(shape)
        a = rng.uniform(-0.5, 0.5, size=shape[1:])
        b = rng.standard_normal(shape[1:])
        out = oracles.windowed_euler_reference(
            lambda z, k: a * z + b, z0, args.window, args.overlap, args.steps
        )
        result = {"checksum": float(out.sum()), "shape": list(out.shape)}
        if args.out:
            np.save(args.out, out)
            result["path"] = args.out
        print(json.dumps(result))
    else:
        raise ValueError(f"unknown oracle subcommand {sub!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blobtalk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    _add_common(p)
    p.add_argument("--out", required=True)
    for key, val in GEN_DEFAULTS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=type(val), default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser on a dataset directory")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="trainer state file to resume from")
    for key, val in TRAIN_DEFAULTS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=type(val), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="generate a clip from audio + reference")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--ref-image", default=None)
    p.add_argument("--ref-video", default=None, help="frame directory for editing mode")
    p.add_argument("--scene", default=None, help="scene JSON (editing mouth box)")
    p.add_argument("--out", required=True)
    for key, val in INFER_DEFAULTS.items():
        flag = f"--{key.replace('_', '-')}"
        if isinstance(val, bool):
            p.add_argument(flag, type=lambda v: v.lower() == "true", default=None)
        else:
            p.add_argument(flag, type=type(val), default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a generated frame directory")
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--ref-image", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--fps", type=float, default=16.0)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--overlap", type=int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="sweep the cache threshold and report speed/quality")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--ref-image", required=True)
    p.add_argument("--alphas", default="0.05,0.1,0.2,0.4")
    p.add_argument("--out", default=None)
    for key, val in BENCH_DEFAULTS.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=type(val), default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="print reference values for derived checks")
    osub = p.add_subparsers(dest="oracle_cmd", required=True)
    q = osub.add_parser("windows")
    q.add_argument("length", type=int)
    q.add_argument("window", type=int)
    q.add_argument("overlap", type=int)
    q = osub.add_parser("fuse")
    q.add_argument("overlap", type=int)
    q = osub.add_parser("masked-loss")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--w1", type=float, default=2.0)
    q.add_argument("--w2", type=float, default=0.0)
    q = osub.add_parser("blf-affine")
    q.add_argument("--seed", type=int, default=3)
    q.add_argument("--length", type=int, default=10)
    q.add_argument("--window", type=int, default=4)
    q.add_argument("--overlap", type=int, default=2)
    q.add_argument("--steps", type=int, default=6)
    q.add_argument("--out", default=None)
    p.set_defaults(func=cmd_oracle)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
