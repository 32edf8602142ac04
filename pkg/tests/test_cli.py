import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from animotion.cli import main
from animotion.config import dump_config, paper_config
from animotion.dataset import load_clip
from conftest import tiny_config


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error(err):
    return json.loads(err[err.index("{"):])["error"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(dump_config(tiny_config(epochs=1)))
    assert main(["synth-data", "--out", str(root / "data"), "--n-clips", "3", "--n-test", "2",
                 "--frames", "8", "--resolution", "32", "--seed", "1"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_train_epochs_zero_writes_init_checkpoint(tmp_path, capsys):
    code, out, _ = _run(capsys, "train", "--profile", "desk", "--epochs", "0", "--out", tmp_path)
    assert code == 0
    payload = json.loads(out)
    assert payload["schema_version"] == 1 and payload["step"] == 0
    assert (tmp_path / "checkpoint.pt").exists()
    code, out, _ = _run(capsys, "inspect-checkpoint", tmp_path / "checkpoint.pt")
    info = json.loads(out)
    assert code == 0 and info["epoch"] == 0 and not info["has_optimizer_state"]
    assert info["config"]["profile"] == "desk"


def test_dump_config_round_trip(tmp_path, capsys):
    _, first, _ = _run(capsys, "dump-config", "--profile", "paper")
    path = tmp_path / "p.yaml"
    path.write_text(first)
    _, second, _ = _run(capsys, "dump-config", "--config", path)
    assert first == second == dump_config(paper_config())


def test_precedence_flags_over_file_over_profile(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("profile: desk\ntrain:\n  epochs: 3\n  batch_size: 4\n")
    _, out, _ = _run(capsys, "dump-config", "--config", path, "--epochs", "7",
                     "--set", "train.batch_size=5", "--set", "model.detector.num_kp=6")
    data = yaml.safe_load(out)
    assert data["train"]["epochs"] == 7                       # flag beats file
    assert data["train"]["batch_size"] == 5                   # --set beats file
    assert data["model"]["resolution"] == 64                  # profile default
    assert data["model"]["detector"]["num_kp"] == 6


@pytest.mark.parametrize("argv, code, kind", [
    (["dump-config", "--set", "train.epochz=3"], 2, "ConfigError"),
    (["dump-config", "--set", "nonsense"], 2, "ConfigError"),
    (["train", "--data", "/nonexistent/root", "--out", "{tmp}/r", "--epochs", "1"], 3, "DatasetError"),
    (["train", "--profile", "desk", "--epochs", "2", "--out", "{tmp}/r"], 3, "DatasetError"),
])
def test_error_exit_codes(tmp_path, capsys, argv, code, kind):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    status, out, err = _run(capsys, *argv)
    assert status == code
    error = _error(err)
    assert error["type"] == kind and error["exit_code"] == code and error["command"] == argv[0]


def test_missing_config_file_is_config_error(tmp_path, capsys):
    status, _, err = _run(capsys, "dump-config", "--config", tmp_path / "none.yaml")
    assert status == 2 and "cannot read" in _error(err)["message"]


def test_non_finite_learning_rate_is_config_error(capsys):
    status, _, err = _run(capsys, "dump-config", "--set", "train.learning_rate=.nan")
    assert status == 2 and "learning_rate" in _error(err)["message"]


def test_numeric_abort_exit_code(workspace, tmp_path, capsys):
    import torch
    from animotion.training import load_checkpoint, save_checkpoint
    ckpt = load_checkpoint(workspace / "run" / "checkpoint.pt")
    for v in ckpt.states["generator"].values():
        if v.is_floating_point():
            v.fill_(float("nan"))
    save_checkpoint(ckpt, tmp_path / "poisoned.pt")
    status, _, err = _run(capsys, "train", "--resume", tmp_path / "poisoned.pt", "--epochs", "2",
                          "--data", workspace / "data", "--out", tmp_path / "run")
    assert status == 4 and _error(err)["type"] == "NonFiniteLossError"
    assert (tmp_path / "run" / "diagnostics.json").exists()
    assert torch.isnan(next(iter(ckpt.states["generator"].values()))).all()


def test_training_outputs(workspace):
    run = workspace / "run"
    lines = (run / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2                                    # ceil(3 / 2) steps, one epoch
    assert yaml.safe_load((run / "config.yaml").read_text())["train"]["epochs"] == 1


def test_resume_continues_step_count(workspace, tmp_path, capsys):
    status, out, _ = _run(capsys, "train", "--resume", workspace / "run" / "checkpoint.pt", "--epochs", "2",
                          "--data", workspace / "data", "--out", tmp_path)
    assert status == 0 and json.loads(out)["step"] == 4


def test_reconstruct_with_dumps(workspace, tmp_path, capsys):
    status, out, _ = _run(capsys, "reconstruct", "--checkpoint", workspace / "run" / "checkpoint.pt",
                          "--data", workspace / "data" / "test", "--out", tmp_path, "--dump-branches",
                          "--dump-motion")
    assert status == 0
    outputs = json.loads(out)["outputs"]
    assert len(outputs) == 2
    first = outputs[0]
    clip = load_clip(first, 32, 1)
    assert clip.frames.shape == (8, 32, 32, 1)
    from PIL import Image
    assert Image.open(f"{first}/branches/000000.png").size == (96, 32)
    # one tile per motion slot (background + 6 keypoints) plus occlusion
    assert Image.open(f"{first}/motion/000000.png").size == (32 * 8, 32)


def test_animate_static_driving_repeats_self_reconstruction(workspace, tmp_path, capsys):
    ckpt = workspace / "run" / "checkpoint.pt"
    test_dir = workspace / "data" / "test"
    clips = sorted(p for p in test_dir.iterdir() if p.is_dir())
    single = tmp_path / "single"
    single.mkdir()
    (single / "000000.png").write_bytes((clips[1] / "000000.png").read_bytes())
    status, out, _ = _run(capsys, "animate", "--checkpoint", ckpt, "--source", clips[0], "--source-frame", 2,
                          "--driving", single, "--out", tmp_path / "anim", "--mode", "relative")
    assert status == 0 and json.loads(out)["frames"] == 1

    # a static multi-frame driver reproduces that frame every step
    static = tmp_path / "static"
    static.mkdir()
    for i in range(3):
        (static / f"{i:06d}.png").write_bytes((clips[1] / "000000.png").read_bytes())
    _run(capsys, "animate", "--checkpoint", ckpt, "--source", clips[0], "--source-frame", 2,
         "--driving", static, "--out", tmp_path / "anim3")
    frames = load_clip(tmp_path / "anim3", 32, 1).frames
    first = load_clip(tmp_path / "anim", 32, 1).frames[0]
    for f in frames:
        np.testing.assert_array_equal(f, first)


def test_animate_bad_source_frame(workspace, tmp_path, capsys):
    clips = sorted(p for p in (workspace / "data" / "test").iterdir() if p.is_dir())
    status, _, err = _run(capsys, "animate", "--checkpoint", workspace / "run" / "checkpoint.pt",
                          "--source", clips[0], "--source-frame", 99, "--driving", clips[1],
                          "--out", tmp_path)
    assert status == 3 and "out of range" in _error(err)["message"]


def test_evaluate_emits_versioned_report(workspace, tmp_path, capsys):
    ckpt = workspace / "run" / "checkpoint.pt"
    test_dir = workspace / "data" / "test"
    _run(capsys, "reconstruct", "--checkpoint", ckpt, "--data", test_dir, "--out", tmp_path / "rec")
    status, out, err = _run(capsys, "evaluate", "--real", test_dir, "--fake", tmp_path / "rec",
                            "--prediction", tmp_path / "rec", "--checkpoint", ckpt,
                            "--report", tmp_path / "report.json", "--set", "eval.fvd_frames=4")
    assert status == 0
    report = json.loads(out)
    assert report["schema_version"] == 1
    assert report["provenance"]["image"]["provenance"] == "fixed-seed-fallback"
    assert report["config"]["eval"]["fvd_frames"] == 4
    assert json.loads((tmp_path / "report.json").read_text()) == report
    assert "Reconstruction" in err and "Prediction" in err


def test_evaluate_identical_dirs(workspace, capsys):
    test_dir = workspace / "data" / "test"
    status, out, _ = _run(capsys, "evaluate", "--real", test_dir, "--fake", test_dir, "--profile", "desk",
                          "--set", "model.resolution=32", "--set", "eval.fvd_frames=4")
    report = json.loads(out)
    assert status == 0 and report["l1"] == 0 and report["psnr"] == 99.0


def test_evaluate_without_outputs_is_config_error(workspace, capsys):
    status, _, _ = _run(capsys, "evaluate", "--real", workspace / "data" / "test")
    assert status == 2


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "animotion.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "animotion" in proc.stdout
