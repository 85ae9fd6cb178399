import json

import numpy as np
import pytest

from bayesfpn import cli, io, train
from bayesfpn.io import load_btsr


def run(*argv):
    return cli.main([str(a) for a in argv])


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("phantom", "--count", 10, "--size", 32, "--seed", 3, "--out", root / "ds") == 0
    assert run("train", "--data", root / "ds", "--steps", 4, "--batch", 2, "--eval-every", 2,
               "--seed", 1, "--out", root / "run") == 0
    return root


def test_phantom_outputs(workspace):
    ds = workspace / "ds"
    assert len(list(ds.glob("image_*.pgm"))) == 10
    assert len(list(ds.glob("mask_*.btsr"))) == 10
    assert len((ds / "metadata.jsonl").read_text().splitlines()) == 10
    assert load_btsr(ds / "mask_00000.btsr").shape == (2, 32, 32)


def test_phantom_rerun_byte_identical(workspace, tmp_path):
    assert run("phantom", "--count", 10, "--size", 32, "--seed", 3, "--out", tmp_path / "ds") == 0
    assert files(tmp_path / "ds") == files(workspace / "ds")


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("phantom", "--count", 0, "--out", tmp_path)
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == cli.EXIT_USAGE
    (tmp_path / "bad.json").write_text('{"nonsense": 1}')
    assert run("phantom", "--config", tmp_path / "bad.json", "--out", tmp_path / "x") == cli.EXIT_USAGE


def test_train_outputs(workspace):
    out = workspace / "run"
    assert {"run_config.json", "best.ckpt", "final.ckpt", "loss.csv", "val.csv"} <= set(files(out))
    cfg = json.loads((out / "run_config.json").read_text())
    assert cfg["train"]["batch_size"] == 2 and cfg["model"]["input_size"] == 32
    assert len((out / "loss.csv").read_text().splitlines()) == 5
    _, opt, _ = io.load_checkpoint(out / "final.ckpt")
    assert opt is not None and opt["step"] == 4


def test_train_defaults():
    cfg = cli.default_config()
    assert cfg["train"]["batch_size"] == 8
    assert cfg["train"]["learning_rate"] == 1e-4
    assert cfg["model"]["head_spatial_dropout_p"] == 0.1
    assert cfg["infer"]["T"] == 20


def test_train_rerun_byte_identical(workspace, tmp_path):
    assert run("train", "--data", workspace / "ds", "--steps", 4, "--batch", 2, "--eval-every", 2,
               "--seed", 1, "--out", tmp_path / "run") == 0
    assert files(tmp_path / "run") == files(workspace / "run")


def test_config_file_and_flag_precedence(workspace, tmp_path, monkeypatch):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 5, "train": {"steps": 2, "batch_size": 3}}))
    monkeypatch.setenv("BAYESFPN_SEED", "6")
    assert run("train", "--data", workspace / "ds", "--config", tmp_path / "c.json", "--batch", 2,
               "--out", tmp_path / "r") == 0
    cfg = json.loads((tmp_path / "r" / "run_config.json").read_text())
    assert (cfg["seed"], cfg["train"]["steps"], cfg["train"]["batch_size"]) == (6, 2, 2)


def test_group_norm_run_same_parameter_names(workspace, tmp_path):
    assert run("train", "--data", workspace / "ds", "--steps", 2, "--batch", 2, "--norm", "group",
               "--out", tmp_path / "g") == 0
    a, _, _ = io.load_checkpoint(tmp_path / "g" / "best.ckpt")
    b, _, _ = io.load_checkpoint(workspace / "run" / "best.ckpt")
    assert list(a) == list(b)


def test_train_nan_exit_code(workspace, tmp_path, monkeypatch):
    def diverge(*_, **__):
        raise train.TrainingDivergedError("non-finite loss at step 0")
    monkeypatch.setattr(train, "train", diverge)
    code = run("train", "--data", workspace / "ds", "--steps", 1, "--out", tmp_path / "n")
    assert code == cli.EXIT_NUMERIC


def test_missing_inputs_are_io_errors(workspace, tmp_path):
    assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "o") == cli.EXIT_IO
    assert run("eval", "--ckpt", tmp_path / "none.ckpt", "--data", workspace / "ds",
               "--out", tmp_path / "o") == cli.EXIT_IO


def test_infer_outputs_and_determinism(workspace, tmp_path):
    args = ("infer", "--ckpt", workspace / "run" / "best.ckpt", "--image", workspace / "ds" / "image_00002.pgm",
            "--T", 3, "--seed", 4)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert load_btsr(tmp_path / "a" / "mean_mask.btsr").shape == (2, 32, 32)
    header = (tmp_path / "a" / "ctr.csv").read_text().splitlines()[0]
    assert header.startswith("image,T,ctr_pred")


def test_infer_single_sample_zero_mi(workspace, tmp_path):
    assert run("infer", "--ckpt", workspace / "run" / "best.ckpt", "--image",
               workspace / "ds" / "image_00001.pgm", "--T", 1, "--out", tmp_path) == 0
    assert np.all(load_btsr(tmp_path / "mutual_info.btsr") == 0)


def test_infer_rejects_wrong_size(workspace, tmp_path):
    io.write_pgm(tmp_path / "big.pgm", np.zeros((64, 64), np.uint8))
    assert run("infer", "--ckpt", workspace / "run" / "best.ckpt", "--image", tmp_path / "big.pgm",
               "--out", tmp_path / "o") == cli.EXIT_USAGE


def test_digest_mismatch(workspace, tmp_path):
    code = run("infer", "--ckpt", workspace / "run" / "best.ckpt", "--image", workspace / "ds" / "image_00001.pgm",
               "--config", _write(tmp_path / "c.json", {"model": {"pyramid_channels": 16}}), "--out", tmp_path)
    assert code == cli.EXIT_IO


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_eval_metrics_csv(workspace, tmp_path):
    assert run("eval", "--ckpt", workspace / "run" / "best.ckpt", "--data", workspace / "ds", "--T", 2,
               "--split", "all", "--out", tmp_path) == 0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(lines) == 12 and lines[-1].startswith("mean,")
    rows = [line.split(",") for line in lines[1:-1]]
    mean_iou = np.mean([float(r[1]) for r in rows])
    assert abs(float(lines[-1].split(",")[1]) - mean_iou) < 1e-8
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_images"] == 10


def test_sweep_csv(workspace, tmp_path):
    assert run("sweep", "--ckpt", workspace / "run" / "best.ckpt", "--data", workspace / "ds",
               "--T-list", "2", "--B", 50, "--split", "all", "--out", tmp_path) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "T,metric,value,ci_low,ci_high"
    assert [line.split(",")[1] for line in lines[1:]] == ["iou_heart", "iou_lungs", "ctr_pearson"]
