import json
import subprocess
import sys

import numpy as np
import pytest

from ctsplat.cli import main
from ctsplat.formats import read_csv, read_image, read_manifest, read_ply, write_ply
from ctsplat.scene import GaussianCloud

SMALL = ["--dims", "16", "--n-views", "4", "--step", "90", "--image-size", "16"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate", "--out", str(d), *SMALL, "-q"]) == 0
    return d


@pytest.fixture(scope="module")
def model_dir(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--manifest", str(dataset), "--out", str(out), "--iterations", "3",
                 "--n-init", "100", "-q"]) == 0
    return out


def test_help_exits_zero():
    r = subprocess.run([sys.executable, "-m", "ctsplat", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("generate", "train", "render", "evaluate", "sweep"):
        assert cmd in r.stdout
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "--out", "x"],
    ["generate", "--out", "x", "--dims", "a,b"],
    ["train", "--manifest", "m", "--out", "x", "--iterations", "many"],
])
def test_bad_flags_exit_two(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_bad_values_exit_two(dataset, tmp_path, capsys):
    assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path),
                 "--train-fraction", "1.5"]) == 2
    assert main(["generate", "--out", str(tmp_path / "g"), "--n-views", "0"]) == 2
    assert main(["render", "--model", "m.ply", "--manifest", str(dataset),
                 "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exits_one(tmp_path, capsys):
    assert main(["train", "--manifest", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "o"), "-q"]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_generate_outputs(dataset, tmp_path):
    m = read_manifest(dataset / "manifest.json")
    assert list(m.angles_deg) == [0.0, 90.0, 180.0, 270.0]
    assert len(list((dataset / "views").glob("*.png"))) == 4
    # same seed, same bytes
    again = tmp_path / "again"
    assert main(["generate", "--out", str(again), *SMALL, "-q"]) == 0
    for f in (dataset / "views").iterdir():
        assert f.read_bytes() == (again / "views" / f.name).read_bytes()
    other = tmp_path / "other"
    assert main(["generate", "--out", str(other), *SMALL, "--seed", "1", "-q"]) == 0
    assert any(f.read_bytes() != (other / "views" / f.name).read_bytes()
               for f in (dataset / "views").iterdir())


def test_train_outputs(model_dir):
    cloud = read_ply(model_dir / "model.ply")
    assert len(cloud) == 100
    rows = read_csv(model_dir / "train_log.csv")
    assert [r["iteration"] for r in rows] == [1, 2, 3]
    split = json.loads((model_dir / "split.json").read_text())
    assert split["train"] == [0, 2] and split["test"] == [1, 3]
    assert json.loads((model_dir / "config.json").read_text())["iterations"] == 3


def test_zero_learning_rate_keeps_initial_cloud(dataset, tmp_path):
    from ctsplat.dataset import Dataset
    from ctsplat.trainer import TrainConfig, initial_cloud

    assert main(["train", "--manifest", str(dataset), "--out", str(tmp_path), "--iterations", "1",
                 "--n-init", "50", "--lr-all", "0", "-q"]) == 0
    init = initial_cloud(Dataset.load(dataset / "manifest.json"), TrainConfig(n_init=50))
    assert read_ply(tmp_path / "model.ply").equals(init)


def test_render_angles_and_determinism(dataset, model_dir, tmp_path):
    args = ["render", "--model", str(model_dir / "model.ply"), "--manifest", str(dataset),
            "--angles", "0,45,90,359.5", "-q"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["render_000.000.png", "render_045.000.png", "render_090.000.png",
                     "render_359.500.png"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    bad = [*args[:5], "--angles", "360", "--out", str(tmp_path / "c")]
    assert main(bad) == 2


def test_render_empty_model_is_black(dataset, tmp_path):
    write_ply(GaussianCloud.empty(), tmp_path / "empty.ply")
    assert main(["render", "--model", str(tmp_path / "empty.ply"), "--manifest", str(dataset),
                 "--out", str(tmp_path / "r"), "--all-test", "--train-fraction", "0.5", "-q"]) == 0
    imgs = sorted((tmp_path / "r").iterdir())
    assert len(imgs) == 2
    assert all(not read_image(p).pixels.any() for p in imgs)


def test_evaluate_writes_reports(dataset, model_dir, tmp_path, capsys):
    assert main(["evaluate", "--model", str(model_dir / "model.ply"), "--manifest", str(dataset),
                 "--out", str(tmp_path), "-q"]) == 0
    rows = read_csv(tmp_path / "metrics.csv")
    assert [r["angle_deg"] for r in rows] == [90.0, 270.0]
    summary = read_csv(tmp_path / "summary.csv")[0]
    assert summary["voxel_bytes"] == 16**3 * 4 and summary["train_fraction"] == 0.5
    assert abs(summary["psnr_mean"] - np.mean([r["psnr"] for r in rows])) < 1e-9
    assert "PSNR" in capsys.readouterr().out


def test_evaluate_against_own_renders(dataset, model_dir, tmp_path):
    # a dataset whose views are the model's own renders scores SSIM 1
    import shutil

    from ctsplat.dataset import Dataset
    from ctsplat.formats import write_image
    from ctsplat.rasterizer import render

    own = tmp_path / "own"
    shutil.copytree(dataset, own)
    ds = Dataset.load(own / "manifest.json")
    cloud = read_ply(model_dir / "model.ply")
    for k, pose in enumerate(ds.poses):
        write_image(render(cloud, pose), ds.manifest.image_path(k))
    assert main(["evaluate", "--model", str(model_dir / "model.ply"), "--manifest", str(own),
                 "--out", str(tmp_path / "e"), "--test-indices", "0,1,2,3", "-q"]) == 0
    rows = read_csv(tmp_path / "e" / "metrics.csv")
    assert all(r["ssim"] > 0.9999 for r in rows)


def test_evaluate_empty_test_set_fails(dataset, model_dir, tmp_path):
    code = main(["evaluate", "--model", str(model_dir / "model.ply"), "--manifest", str(dataset),
                 "--out", str(tmp_path), "--train-fraction", "1.0", "-q"])
    assert code == 2


def test_config_file_precedence(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 2, "n-init": 60, "lambda_beta": 0.0}))
    out = tmp_path / "run"
    assert main(["train", "--manifest", str(dataset), "--out", str(out), "--config", str(cfg),
                 "--n-init", "70", "-q"]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["iterations"] == 2 and saved["n_init"] == 70 and saved["lambda_beta"] == 0.0
    cfg.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit) as exc:
        main(["train", "--manifest", str(dataset), "--out", str(out), "--config", str(cfg)])
    assert exc.value.code == 2


def test_sweep(dataset, tmp_path, capsys):
    assert main(["sweep", "--manifest", str(dataset), "--out", str(tmp_path),
                 "--fractions", "0.5,0.25", "--iterations", "2", "--n-init", "50", "-q"]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert [r["train_fraction"] for r in rows] == [0.5, 0.25]
    assert (tmp_path / "frac_0.25" / "metrics.csv").exists()
    assert "25% views" in capsys.readouterr().out
    assert main(["sweep", "--manifest", str(dataset), "--out", str(tmp_path),
                 "--fractions", "0", "-q"]) == 2


def test_threads_flag(dataset, tmp_path, monkeypatch):
    assert main(["generate", "--out", str(tmp_path / "g"), *SMALL, "--threads", "0"]) == 2
    monkeypatch.setenv("CTSPLAT_THREADS", "x")
    assert main(["generate", "--out", str(tmp_path / "g"), *SMALL, "-q"]) == 2
    monkeypatch.setenv("CTSPLAT_THREADS", "1")
    assert main(["generate", "--out", str(tmp_path / "g"), *SMALL, "-q"]) == 0
