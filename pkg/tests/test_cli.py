import json
from pathlib import Path

import numpy as np
import pytest

from blobtalk.cli import load_config_file, main


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = run_cli(
        "gen-data", "--out", out, "--num-samples", 8, "--seed", 3,
        "--min-duration-s", 1.0, "--max-duration-s", 1.5, "--min-sync-c", 0.0,
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def run_dir(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "toy"
    code = run_cli(
        "train", "--data", dataset_dir, "--out", out, "--steps", 6,
        "--batch-size", 2, "--width", 16, "--depth", 1, "--heads", 2,
        "--crop-frames", 8, "--log-interval", 2, "--checkpoint-interval", 100,
    )
    assert code == 0
    return out


def test_gen_data_layout(dataset_dir):
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    assert manifest["samples"], "dataset should keep samples"
    assert "funnel" in manifest and manifest["funnel"]["total"] == 8
    assert len(manifest["audio_stats"]["mean"]) == manifest["num_bands"]
    first = manifest["samples"][0]
    assert (dataset_dir / first["audio"]).exists()
    frames = list((dataset_dir / first["frames_dir"]).glob("*.png"))
    assert len(frames) == first["num_frames"]


def test_train_outputs(run_dir):
    assert (run_dir / "ckpt_final.bin").exists()
    rows = (run_dir / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "step,loss_joint,loss_face,grad_norm"
    assert len(rows) - 1 == 3  # 6 steps / log every 2


def _write_ref_image(dataset_dir, tmp_path):
    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    entry = manifest["samples"][0]
    frame0 = sorted((dataset_dir / entry["frames_dir"]).glob("*.png"))[0]
    ref = tmp_path / "ref.png"
    ref.write_bytes(frame0.read_bytes())
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps(entry["scene"]))
    return ref, scene, dataset_dir / entry["audio"], entry["scene"]["text_tag"]


def test_infer_eval_cycle(dataset_dir, run_dir, tmp_path):
    ref, scene, audio, tag = _write_ref_image(dataset_dir, tmp_path)
    out = tmp_path / "gen"
    code = run_cli(
        "infer", "--checkpoint", run_dir / "ckpt_final.bin", "--audio", audio,
        "--ref-image", ref, "--text", tag, "--frames", 12, "--window", 8,
        "--overlap", 4, "--steps", 3, "--seed", 5, "--out", out,
    )
    assert code == 0
    frames = sorted((out / "frames").glob("*.png"))
    assert len(frames) == 12
    assert (out / "preview.gif").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["sampler"]["denoiser_calls"] > 0
    assert metrics["plan"][0] == [0, 8]

    code = run_cli(
        "eval", "--frames-dir", out / "frames", "--audio", audio, "--ref-image", ref,
        "--scene", scene, "--window", 8, "--overlap", 4,
        "--out", tmp_path / "report.json",
    )
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report) == {
        "sync_c", "sync_d", "identity_consistency", "seam_gap_ratio", "color_drift",
    }


def test_infer_deterministic_given_seed(dataset_dir, run_dir, tmp_path):
    ref, _, audio, tag = _write_ref_image(dataset_dir, tmp_path)
    outs = []
    for name in ("g1", "g2"):
        out = tmp_path / name
        code = run_cli(
            "infer", "--checkpoint", run_dir / "ckpt_final.bin", "--audio", audio,
            "--ref-image", ref, "--text", tag, "--frames", 8, "--window", 8,
            "--overlap", 0, "--steps", 2, "--seed", 11, "--out", out,
        )
        assert code == 0
        outs.append(b"".join(p.read_bytes() for p in sorted((out / "frames").glob("*.png"))))
    assert outs[0] == outs[1]


def test_bench_csv(dataset_dir, run_dir, tmp_path):
    ref, _, audio, _ = _write_ref_image(dataset_dir, tmp_path)
    out = tmp_path / "bench.csv"
    code = run_cli(
        "bench", "--checkpoint", run_dir / "ckpt_final.bin", "--audio", audio,
        "--ref-image", ref, "--frames", 8, "--window", 8, "--overlap", 0,
        "--steps", 4, "--alphas", "1e9", "--out", out,
    )
    assert code == 0
    rows = out.read_text().strip().splitlines()
    header = rows[0].split(",")
    first = dict(zip(header, rows[1].split(",")))
    assert float(first["alpha"]) == 0.0
    assert float(first["skip_rate"]) == 0.0
    assert first["psnr_db"] == "inf"
    # uncached call count = steps x windows x branches
    assert int(first["denoiser_calls"]) == 4 * 1 * 3
    huge = dict(zip(header, rows[2].split(",")))
    assert float(huge["skip_rate"]) > 0


def test_oracle_subcommands(capsys):
    assert run_cli("oracle", "windows", 10, 4, 2) == 0
    assert json.loads(capsys.readouterr().out) == [[0, 4], [2, 6], [4, 8], [6, 10]]
    assert run_cli("oracle", "fuse", 4) == 0
    weights = json.loads(capsys.readouterr().out)
    assert weights == [0.0, 1 / 3, 2 / 3, 1.0]
    assert run_cli("oracle", "masked-loss", "--seed", 1) == 0
    values = json.loads(capsys.readouterr().out)
    assert set(values) == {"weighted", "masked_mean"}
    assert run_cli("oracle", "blf-affine", "--seed", 3, "--steps", 4) == 0
    blob = json.loads(capsys.readouterr().out)
    assert blob["shape"] == [10, 2, 3, 3]


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("num_samples = 5\nseed = 9  # comment\n")
    code = run_cli("gen-data", "--out", tmp_path / "x", "--config", cfg,
                   "--seed", 1, "--print-config")
    assert code == 0
    lines = dict(l.split(" = ") for l in capsys.readouterr().out.strip().splitlines())
    assert lines["num_samples"] == "5"   # from file
    assert lines["seed"] == "1"          # flag beats file


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("definitely_not_a_key = 1\n")
    code = run_cli("gen-data", "--out", tmp_path / "x", "--config", cfg)
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_load_config_file_parses_types(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("a = 3\nb = 0.5\nc = true\nd = hello\n")
    values = load_config_file(cfg)
    assert values == {"a": 3, "b": 0.5, "c": True, "d": "hello"}


def test_cli_error_exit_code(capsys):
    code = run_cli("infer", "--checkpoint", "/nonexistent.bin", "--audio", "/none.wav",
                   "--out", "/tmp/x")
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")
