import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from speckletact.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, main
from speckletact.formats import read_pgm, read_spkl, write_spkl
from speckletact.scene import default_scene, save_scene

COMMANDS = ("simulate", "sweep", "gen-dataset", "train", "eval", "ablate", "bench", "infer")


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "scene.json"
    save_scene(default_scene("flat", scatterer_count=40), path)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, scene_file):
    root = tmp_path_factory.mktemp("cli")
    ds, run = root / "ds", root / "run"
    assert main(["gen-dataset", "--task", "position4", "--scene", str(scene_file), "--seed", "3",
                 "--train-per-class", "2", "--test-per-class", "1", "--keep-raw", "--out", str(ds)]) == EXIT_OK
    assert main(["train", "--dataset", str(ds), "--epochs", "1", "--deterministic", "--out", str(run)]) == EXIT_OK
    return ds, run


def test_help_lists_all_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in COMMANDS:
        assert name in out


@pytest.mark.parametrize("name", COMMANDS)
def test_subcommand_help_has_common_flags(name, capsys):
    assert main([name, "--help"]) == 0
    out = capsys.readouterr().out
    assert "--threads" in out and "--deterministic" in out and "--config" in out


def test_usage_errors_exit_2(capsys, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["simulate"]) == EXIT_USAGE
    assert main(["simulate", "--force", "x", "--out", "a.pgm"]) == EXIT_USAGE
    assert main(["simulate", "--scene", "nowhere", "--out", str(tmp_path / "a.pgm")]) == EXIT_USAGE
    assert "error[invalid-argument]" in capsys.readouterr().err
    assert main(["sweep", "--forces", "1:0:0.1", "--out", "x.csv"]) == EXIT_USAGE


def test_config_file(tmp_path, scene_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"force": 0.5, "seed": 4}))
    out = tmp_path / "f.pgm"
    assert main(["simulate", "--scene", str(scene_file), "--config", str(cfg), "--seed", "9",
                 "--out", str(out)]) == EXIT_OK
    resolved = json.loads((tmp_path / "invocation.json").read_text())["resolved"]
    assert resolved["force"] == 0.5 and resolved["seed"] == 9  # flag wins over config
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == EXIT_USAGE
    assert main(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(out)]) == EXIT_USAGE


def test_simulate_outputs(tmp_path, scene_file):
    out = tmp_path / "frame.pgm"
    assert main(["simulate", "--scene", str(scene_file), "--force", "0.8", "--pos", "27.5,30",
                 "--seed", "1", "--out", str(out)]) == EXIT_OK
    assert read_pgm(out).shape == (192, 192)
    assert read_pgm(tmp_path / "frame.cropA.pgm").shape == (128, 128)
    crop = read_spkl(tmp_path / "frame.spkl")
    raw = read_spkl(tmp_path / "frame.raw.spkl")
    np.testing.assert_array_equal(crop, raw[32:160, 32:160])
    inv = json.loads((tmp_path / "invocation.json").read_text())
    assert inv["argv"][0] == "simulate" and inv["kernel_backend"] in ("compiled", "numpy")


def test_sweep_csv(tmp_path, scene_file):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--scene", str(scene_file), "--forces", "0:0.4:0.2", "--out", str(out)]) == EXIT_OK
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["force_N", "zncc"] and len(rows) == 4
    assert float(rows[1][1]) == pytest.approx(1.0)


def test_gen_and_train_outputs(trained):
    ds, run = trained
    manifest = json.loads((ds / "manifest.json").read_text())
    assert len(manifest["samples"]) == 12 and manifest["keep_raw"]
    for name in ("model.ckpt", "report.json", "metrics.json", "confusion.csv", "invocation.json"):
        assert (run / name).exists(), name
    report = json.loads((run / "report.json").read_text())
    assert report["dataset_manifest_sha256"] and len(report["epoch_loss"]) == 1


def test_eval_bench_infer(trained, tmp_path, capsys):
    ds, run = trained
    ckpt = str(run / "model.ckpt")
    assert main(["eval", "--dataset", str(ds), "--checkpoint", ckpt, "--out", str(tmp_path / "ev")]) == EXIT_OK
    assert (tmp_path / "ev" / "metrics.json").read_bytes() == (run / "metrics.json").read_bytes()
    assert main(["bench", "--checkpoint", ckpt, "--trials", "30", "--out", str(tmp_path / "b.json")]) == EXIT_OK
    assert json.loads((tmp_path / "b.json").read_text())["trials"] == 30
    capsys.readouterr()
    frame = ds / "samples" / "00000.spkl"
    assert main(["infer", "--checkpoint", ckpt, "--image", str(frame)]) == EXIT_OK
    out = capsys.readouterr().out.split()
    assert out[0] == "class" and out[1] in ("P1", "P2", "P3", "P4") and out[2] == "confidence"
    assert 0 < float(out[3]) <= 1
    assert main(["bench", "--checkpoint", ckpt, "--trials", "5", "--out", str(tmp_path / "b.json")]) == EXIT_USAGE


def test_data_errors_exit_3(trained, tmp_path, capsys):
    ds, run = trained
    ckpt = str(run / "model.ckpt")
    assert main(["eval", "--dataset", str(tmp_path / "none"), "--checkpoint", ckpt,
                 "--out", str(tmp_path / "e")]) == EXIT_DATA
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNKJUNKJUNKJUNK")
    assert main(["bench", "--checkpoint", str(bad), "--out", str(tmp_path / "b.json")]) == EXIT_DATA
    assert "error[format-error]" in capsys.readouterr().err
    small = tmp_path / "small.spkl"
    write_spkl(small, np.zeros((64, 64), np.float32))
    assert main(["infer", "--checkpoint", ckpt, "--image", str(small)]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exits_4(trained, tmp_path):
    ds, _ = trained
    hp = tmp_path / "hp.json"
    hp.write_text(json.dumps({"lr": 1e30, "epochs": 2, "batch_size": 4}))
    assert main(["train", "--dataset", str(ds), "--hp", str(hp), "--out", str(tmp_path / "r")]) == EXIT_NUMERIC


def test_ablate_crops(trained, tmp_path):
    ds, _ = trained
    out = tmp_path / "abl"
    assert main(["ablate", "--mode", "crops", "--dataset", str(ds), "--epochs", "1", "--regions", "A,B",
                 "--out", str(out)]) == EXIT_OK
    rows = list(csv.reader(open(out / "crop_regions.csv")))
    assert [r[0] for r in rows] == ["region", "A", "B"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "speckletact.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    proc = subprocess.run([sys.executable, "-m", "speckletact.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "speckletact" in proc.stdout
