import csv
import json

import numpy as np
import pytest

from stmforge import cli
from stmforge.cli import main
from stmforge.image import SimImage, save_image
from stmforge.models import TrainingAborted, TrainLog, identity_model
from stmforge.patches import load_patch_set, read_archive


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def images(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim") / "imgs"
    assert _run("simulate", "--lattice", "hex1", "--count", 3, "--seed", 7, "--out", out) == 0
    return out


def test_simulate_count_contract(images):
    assert sorted(p.name for p in images.glob("*.pgm")) == [f"hex1_{i:04d}.pgm" for i in range(3)]
    assert len(list(images.glob("hex1_*.json"))) == 3
    manifest = json.loads((images / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["config"]["seed"] == 7
    assert len(manifest["artifacts"]) == 9
    assert set(manifest) >= {"seeds", "version", "wall_seconds", "started"}


def test_simulate_same_seed_same_bytes(images, tmp_path):
    assert _run("simulate", "--lattice", "hex1", "--count", 3, "--seed", 7, "--out", tmp_path) == 0
    for p in images.glob("hex1_*"):
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_simulate_all(tmp_path):
    assert _run("simulate", "--lattice", "all", "--count", 1, "--out", tmp_path) == 0
    names = sorted(p.stem for p in tmp_path.glob("*.pgm"))
    assert names == ["bcc_0000", "fcc_0000", "hex1_0000", "hex2_0000", "simple_cubic_0000"]


def test_simulate_bad_lattice(tmp_path):
    assert _run("simulate", "--lattice", "diamond", "--out", tmp_path) == 2
    assert _run("simulate", "--count", 0, "--out", tmp_path) == 2
    assert _run("simulate", "--gaussian-strength", -1, "--out", tmp_path) == 2


def test_simulate_unwritable_out(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert _run("simulate", "--out", blocker / "sub") == 2


def test_dataset_full_and_subsampled(images, tmp_path):
    one = tmp_path / "one"
    one.mkdir()
    for suffix in (".json", ".f32"):
        (one / f"hex1_0000{suffix}").write_bytes((images / f"hex1_0000{suffix}").read_bytes())
    assert _run("dataset", "--images", one, "--out", tmp_path / "full") == 0
    assert len(read_archive(tmp_path / "full" / "patches.stmp")) == 3600
    assert _run("dataset", "--images", one, "--patches-per-image", 3000, "--out", tmp_path / "sub") == 0
    ps, meta = load_patch_set(tmp_path / "sub" / "patches.stmp")
    assert len(ps) == 3000 and meta["labels"] == {"0": "hex1"}
    manifest = json.loads((tmp_path / "sub" / "manifest.json").read_text())
    assert manifest["per_image"] == {"0": 3000}


def test_dataset_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert _run("dataset", "--images", tmp_path / "empty", "--out", tmp_path / "o") == 3
    assert _run("dataset", "--images", tmp_path / "missing", "--out", tmp_path / "o") == 3


def test_dataset_skips_constant_image(images, tmp_path, capsys):
    folder = tmp_path / "mixed"
    folder.mkdir()
    save_image(SimImage(np.full((64, 64), 0.25)), folder / "flat")
    save_image(SimImage(np.random.default_rng(0).random((64, 64))), folder / "noise")
    assert _run("dataset", "--images", folder, "--out", tmp_path / "ds") == 0
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert [s["file"] for s in manifest["skipped"]] == ["flat.json"]
    assert "skipping flat.json" in capsys.readouterr().err
    only_flat = tmp_path / "flat_only"
    only_flat.mkdir()
    save_image(SimImage(np.zeros((32, 32))), only_flat / "z")
    assert _run("dataset", "--images", only_flat, "--out", tmp_path / "ds2") == 3


def test_dataset_oversampling_is_data_error(images, tmp_path):
    assert _run("dataset", "--images", images, "--patches-per-image", 3601, "--out", tmp_path) == 3


@pytest.fixture(scope="module")
def dataset(images, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert _run("dataset", "--images", images, "--patches-per-image", 100, "--out", out) == 0
    return out


def test_train_and_eval(dataset, tmp_path):
    run = tmp_path / "run"
    code = _run("train", "--data", dataset, "--config", "small_batch", "--epochs", 2, "--patches-per-image", 100, "--out", run)
    assert code == 0
    rows = _read_csv(run / "train_log.csv")
    assert rows[0] == ["epoch", "train_loss", "val_loss", "seconds"] and len(rows) == 3
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["train_config"]["batch"] == 256 and manifest["train_config"]["epochs"] == 2

    ev = tmp_path / "eval"
    assert _run("eval", "--model", run / "model.stmw", "--data", run / "val.stmp", "--samples", 3, "--out", ev) == 0
    metrics = _read_csv(ev / "metrics.csv")
    assert metrics[0] == ["lattice", "config", "avg_mse", "avg_ssim"]
    assert metrics[1][:2] == ["hex1", "small_batch"]
    pca = _read_csv(ev / "pca.csv")
    assert pca[0] == ["pc1", "pc2", "pc3", "lattice", "image_id"] and len(pca) == 31
    pairs = sorted((ev / "recon").glob("*.pgm"))
    assert len(pairs) == 3
    header = pairs[0].read_bytes()[:12]
    assert header.startswith(b"P5\n35 17\n")  # original | gap | reconstruction


def test_train_config_precedence(dataset, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# desk run\nconfig = large_batch\nepochs = 3\nbatch: 64\npatches_per_image = 100\n")
    out = tmp_path / "run"
    assert _run("train", "--data", dataset, "--config", cfg, "--epochs", 1, "--out", out) == 0
    tc = json.loads((out / "manifest.json").read_text())["train_config"]
    assert (tc["name"], tc["lr"], tc["batch"], tc["epochs"]) == ("large_batch", 0.002, 64, 1)


def test_train_json_config(dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "patches_per_image": 100, "lr": 0.01}))
    assert _run("train", "--data", dataset, "--config", cfg, "--out", tmp_path / "r") == 0
    assert json.loads((tmp_path / "r" / "manifest.json").read_text())["train_config"]["lr"] == 0.01


def test_train_config_errors(dataset, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 1\n")
    assert _run("train", "--data", dataset, "--config", bad, "--out", tmp_path) == 2
    assert _run("train", "--data", dataset, "--config", "no_such_preset", "--out", tmp_path) == 2
    assert _run("train", "--data", dataset, "--epochs", 0, "--patches-per-image", 100, "--out", tmp_path) == 2
    # the archive holds 100 per image but baseline wants 3000
    assert _run("train", "--data", dataset, "--epochs", 1, "--out", tmp_path) == 3
    assert _run("train", "--data", tmp_path / "nowhere", "--out", tmp_path) == 3


def test_train_cae_b_rejects_17px(dataset, tmp_path):
    assert _run("train", "--arch", "cae-b", "--data", dataset, "--patches-per-image", 100, "--out", tmp_path) == 2


def test_manifest_for_other_command_rejected(images, tmp_path):
    assert _run("train", "--config", images / "manifest.json", "--out", tmp_path) == 2


def test_nonfinite_exit_code(dataset, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise TrainingAborted("non-finite training loss at epoch 1", TrainLog())

    monkeypatch.setattr(cli, "train", boom)
    assert _run("train", "--data", dataset, "--epochs", 1, "--patches-per-image", 100, "--out", tmp_path) == 4
    assert (tmp_path / "train_log.csv").exists()


def test_identity_checkpoint_scores_zero(dataset, tmp_path):
    identity_model(17).save(tmp_path / "id.stmw")
    assert _run("eval", "--model", tmp_path / "id.stmw", "--data", dataset, "--out", tmp_path / "ev") == 0
    row = _read_csv(tmp_path / "ev" / "metrics.csv")[1]
    assert float(row[2]) == 0.0 and float(row[3]) == 1.0


def test_eval_missing_checkpoint(dataset, tmp_path):
    assert _run("eval", "--model", tmp_path / "none.stmw", "--data", dataset, "--out", tmp_path) == 3


def test_list_configs(capsys):
    assert _run("train", "--list-configs") == 0
    out = capsys.readouterr().out
    for name in ("baseline", "lower_lr", "small_batch", "large_batch", "more_patches", "extended_training", "lr_decay"):
        assert name in out


def test_threads_env(images, tmp_path, monkeypatch):
    monkeypatch.setenv("STMFORGE_THREADS", "abc")
    assert _run("simulate", "--count", 1, "--lattice", "sc", "--out", tmp_path) == 2
    monkeypatch.setenv("STMFORGE_THREADS", "1")
    assert _run("simulate", "--count", 1, "--lattice", "sc", "--out", tmp_path) == 0
    assert _run("simulate", "--threads", 0, "--out", tmp_path) == 2
