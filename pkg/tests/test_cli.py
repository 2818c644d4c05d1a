import hashlib
import json

import numpy as np
import pytest

from volt3d.cli import main
from volt3d.config import RunConfig
from volt3d.errors import ConfigError
from volt3d.gradsuite import LAYER_NAMES
from volt3d.nifti_io import Volume, write_volume

SMALL = ["data.phantom.grid=8,8,6", "model.input_shape=8,8,6", "model.filters=2",
         "model.dense_units=4", "data.phantom.train_counts=3,3", "data.phantom.test_counts=2,2"]


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_inspect_dump(tmp_path, capsys):
    write_volume(tmp_path / "v.nii", Volume(np.zeros((128, 128, 64), np.float32)))
    write_volume(tmp_path / "v.nii.gz", Volume(np.zeros((128, 128, 64), np.float32)))
    assert main(["inspect", str(tmp_path / "v.nii")]) == 0
    plain = capsys.readouterr().out
    assert "dim: 128 128 64" in plain
    assert main(["inspect", str(tmp_path / "v.nii.gz")]) == 0
    assert capsys.readouterr().out == plain


def test_inspect_bad_magic(tmp_path, capsys):
    path = tmp_path / "bad.nii"
    write_volume(path, Volume(np.zeros((2, 2, 2))))
    blob = bytearray(path.read_bytes())
    blob[344:348] = b"xxxx"
    path.write_bytes(bytes(blob))
    assert main(["inspect", str(path)]) == 2
    assert "BadMagic" in capsys.readouterr().err


def test_inspect_missing_file(tmp_path):
    assert main(["inspect", str(tmp_path / "nope.nii")]) == 2


def test_phantom_tree_and_rerun(tmp_path, capsys):
    args = ["phantom", "data.phantom.grid=16,16,8", "data.phantom.test_counts=5,5"]
    assert main(args + [f"out.dir={tmp_path / 'a'}"]) == 0
    assert main(args + [f"out.dir={tmp_path / 'b'}"]) == 0
    files = list((tmp_path / "a").rglob("*.nii.gz"))
    assert len(files) == 28
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_zero_count_fails_at_scan(tmp_path, capsys):
    root = tmp_path / "tree"
    assert main(["phantom", "data.phantom.grid=8,8,6", "data.phantom.train_counts=3,0", f"out.dir={root}"]) == 0
    assert main(["augment", f"data.root={root}", f"out.dir={tmp_path / 'o'}"]) == 2
    assert "EmptyClass" in capsys.readouterr().err


def test_augment_manifest(tmp_path, capsys):
    assert main(["augment", "data.phantom.grid=8,8,6", f"out.dir={tmp_path}"]) == 0
    assert "= 32" in capsys.readouterr().out
    assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 42


def test_preprocess(tmp_path):
    write_volume(tmp_path / "in.nii", Volume(np.arange(60, dtype=np.float32).reshape(5, 4, 3)))
    assert main(["preprocess", str(tmp_path / "in.nii"), str(tmp_path / "out.nii.gz"), "model.input_shape=4,4,2"]) == 0
    assert main(["inspect", str(tmp_path / "out.nii.gz")]) == 0


def test_gradcheck_lists_every_layer(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in LAYER_NAMES:
        assert sum(line.split()[1] == name for line in out.splitlines() if line.startswith(("PASS", "FAIL"))) == 1


def test_gradcheck_corrupt_conv_fails(capsys):
    assert main(["gradcheck", "gradcheck.corrupt=conv3d"]) == 1
    assert any(line.startswith("FAIL") and "conv3d" in line for line in capsys.readouterr().out.splitlines())


def test_config_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("train.epochs=3\ntrain.epoch=4\n")
    with pytest.raises(ConfigError):
        RunConfig.load(cfg)
    assert main(["train", "--config", str(cfg)]) == 2


def test_config_precedence_and_dump(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\ntrain.epochs = 3\naugment.enabled = yes\n")
    rc = RunConfig.load(cfg, ["train.epochs=5"])
    assert rc["train.epochs"] == 5 and rc["augment.enabled"] is True
    assert RunConfig.load(None, rc.dumps().splitlines()) == rc


def test_train_eval_and_determinism(tmp_path, capsys):
    base = ["train", *SMALL, "train.epochs=2", "augment.enabled=true", "augment.count=2"]
    assert main(base + [f"out.dir={tmp_path / 'a'}"]) == 0
    assert "train manifest: 10 records" in capsys.readouterr().out
    assert main(base + [f"out.dir={tmp_path / 'b'}"]) == 0
    for name in ("curves.csv", "model.ckpt", "metrics.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len((tmp_path / "a" / "curves.csv").read_text().splitlines()) == 3
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert metrics["tp"] + metrics["fp"] + metrics["tn"] + metrics["fn"] == 4

    assert main(["eval", *SMALL, f"--checkpoint={tmp_path / 'a' / 'model.ckpt'}", f"out.dir={tmp_path / 'e'}"]) == 0
    assert json.loads((tmp_path / "e" / "metrics.json").read_text()) == metrics


def test_train_kfold_writes_cv_metrics(tmp_path):
    assert main(["train", *SMALL, "train.epochs=1", "train.validation=kfold:3", f"out.dir={tmp_path}"]) == 0
    cv = json.loads((tmp_path / "cv_metrics.json").read_text())
    assert len(cv["folds"]) == 3 and "accuracy" in cv["summary"]


def test_ab_rows(tmp_path, capsys):
    assert main(["ab", *SMALL, "data.phantom.seeds=0,1", "ab.baseline_epochs=1", "ab.augmented_epochs=1",
                 f"out.dir={tmp_path}"]) == 0
    lines = (tmp_path / "ab.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[-1].startswith("mean,")
    assert "mean accuracy delta" in capsys.readouterr().out


def test_ab_needs_two_seeds(tmp_path):
    assert main(["ab", *SMALL, "data.phantom.seeds=0", f"out.dir={tmp_path}"]) == 2
