import csv
import json
import subprocess
import sys

import pytest

from pvrct.cli import main


def tree(root):
    """Relative path -> bytes for every file below ``root``."""
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err
    return code, err


FAST = ["--set", "train.max_epochs=2", "--set", "pretrain.epochs=2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "12", "--positive-fraction", "0.5", "--seed", "7", "--out", str(root / "data")]) == 0
    assert main(["split", "--manifest", str(root / "data" / "manifest.csv"), "--out", str(root / "split")]) == 0
    assert main(["train", "--manifest", str(root / "split" / "train.csv"), "--seed", "0", *FAST,
                 "--out", str(root / "train")]) == 0
    return root


def test_synth_example_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "synth", "--n", 20, "--positive-fraction", 0.5, "--seed", 7, "--out", tmp_path / d)[0] == 0
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b
    assert sum(1 for k in a if k.endswith(".mvol.json") and "_" not in k.split("/")[-1]) == 20
    rows = list(csv.DictReader((tmp_path / "a" / "manifest.csv").open()))
    assert len(rows) == 20 and sum(int(r["label"]) for r in rows) == 10


def test_split_outputs(workspace):
    summary = json.loads((workspace / "split" / "split.json").read_text())
    assert summary["train"]["n"] + summary["test"]["n"] == 12
    text = (workspace / "split" / "train.csv").read_text()
    assert "../data/volumes/" in text  # relative to the split directory


def test_train_then_evaluate(workspace, capsys):
    out = workspace / "eval"
    code, err = run(capsys, "evaluate", "--manifest", workspace / "split" / "test.csv",
                    "--ckpt", workspace / "train" / "model_seed0", "--out", out)
    assert code == 0, err
    rep = json.loads((out / "metric_report.json").read_text())
    assert 0.0 <= rep["balanced_accuracy"] <= 1.0
    assert (out / "confusion.csv").read_text().startswith("truth\\pred,0,1\n")
    assert len((out / "predictions.csv").read_text().splitlines()) == 1 + 2  # one test phantom per class


def test_explain(workspace, capsys):
    out = workspace / "explain"
    code, err = run(capsys, "explain", "--volume", workspace / "data" / "volumes" / "P0000",
                    "--ckpt", workspace / "train" / "model_seed0", "--out", out)
    assert code == 0, err
    meta = json.loads((out / "explain.json").read_text())
    assert meta["layer"] == "features.block3.layer2.body.conv"
    assert (out / "slice_000_cam.pgm").read_bytes().startswith(b"P5")


def test_preprocess_writes_fixed_grid(workspace, capsys):
    out = workspace / "prep"
    code, err = run(capsys, "preprocess", "--manifest", workspace / "data" / "manifest.csv", "--out", out)
    assert code == 0, err
    head = json.loads((out / "volumes" / "P0000.mvol.json").read_text())
    assert head["shape"] == [32, 32, 32] and head["unit"] == "normalized"


def test_pretrain_and_transfer(workspace, capsys):
    pre = workspace / "pretext_data"
    assert run(capsys, "synth", "--pretext", "--n", 6, "--seed", 1, "--out", pre)[0] == 0
    code, err = run(capsys, "pretrain", "--manifest", pre / "manifest.csv", *FAST, "--out", workspace / "pt")
    assert code == 0, err
    code, err = run(capsys, "train", "--manifest", workspace / "split" / "train.csv", "--seed", 3, *FAST,
                    "--ckpt", workspace / "pt" / "pretext", "--out", workspace / "ft")
    assert code == 0, err
    rep = json.loads((workspace / "ft" / "train_report.json").read_text())
    assert rep["pretrained"] and rep["fine_tune_policy"] == "full_ft"


def test_matrix_table(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(capsys, "synth", "--n", 10, "--positive-fraction", 0.5, "--seed", 2, "--out", data)[0] == 0
    code, err = run(capsys, "matrix", "--set", f"paths.data_dir={data}", "--set", "train.seeds=[0,1]",
                    "--set", "synth.pretext_n=4", "--set", "train.max_epochs=1", "--set", "pretrain.epochs=1",
                    "--out", tmp_path / "m")
    assert code == 0, err
    rows = list(csv.DictReader((tmp_path / "m" / "comparison.csv").open()))
    assert [r["training_strategy"] for r in rows] == ["scratch", "pretext-FT", "pretext-FT+mask-crop"]
    assert all("±" in r["test_ba_pct"] for r in rows)
    assert "Training Strategy" in (tmp_path / "m" / "comparison.txt").read_text()


# -- errors ------------------------------------------------------------------

def assert_one_line(err, code):
    lines = err.strip().splitlines()
    assert len(lines) == 1, err
    assert lines[0].startswith(f"ERROR {code}: ")
    assert lines[0].count(": ") >= 2


def test_config_error(workspace, capsys):
    code, err = run(capsys, "train", "--manifest", workspace / "split" / "train.csv",
                    "--set", "train.learning_rate=0", "--out", workspace / "x")
    assert code == 1
    assert_one_line(err, 1)
    assert "train.learning_rate" in err


def test_bad_config_file(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{")
    code, err = run(capsys, "split", "--config", p, "--manifest", p, "--out", tmp_path / "o")
    assert code == 1
    assert_one_line(err, 1)


@pytest.mark.parametrize("argv, field", [
    (["train", "--manifest", "absent.csv"], "manifest"),
    (["evaluate", "--manifest", "absent.csv", "--ckpt", "absent"], "manifest"),
    (["split", "--config", "absent.json", "--manifest", "absent.csv"], "config"),
])
def test_missing_inputs(tmp_path, capsys, argv, field):
    code, err = run(capsys, *argv, "--out", tmp_path / "o")
    assert code == 2
    assert_one_line(err, 2)
    assert f": {field}: " in err


def test_missing_checkpoint(workspace, capsys, tmp_path):
    code, err = run(capsys, "evaluate", "--manifest", workspace / "split" / "test.csv",
                    "--ckpt", tmp_path / "absent", "--out", tmp_path / "o")
    assert code == 2 and ": ckpt: " in err


def test_malformed_manifest(tmp_path, capsys):
    p = tmp_path / "m.csv"
    p.write_text("patient_id,volume\nA,a.mvol.json\n")
    code, err = run(capsys, "split", "--manifest", p, "--out", tmp_path / "o")
    assert code == 2
    assert_one_line(err, 2)


def test_non_finite_loss_exit_3(workspace, capsys):
    code, err = run(capsys, "train", "--manifest", workspace / "split" / "train.csv",
                    "--set", "train.learning_rate=1e30", "--set", "train.max_epochs=3",
                    "--out", workspace / "diverge")
    assert code == 3
    assert_one_line(err, 3)


def test_unknown_layer(workspace, capsys):
    code, err = run(capsys, "explain", "--volume", workspace / "data" / "volumes" / "P0000",
                    "--ckpt", workspace / "train" / "model_seed0", "--layer", "features.nope",
                    "--out", workspace / "x2")
    assert code == 1 and "explain.layer" in err


def test_writes_only_below_out(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(capsys, "synth", "--n", 4, "--positive-fraction", 0.5, "--seed", 1, "--out", "data")[0] == 0
    before = set(tree(tmp_path))
    assert run(capsys, "split", "--manifest", "data/manifest.csv", "--out", "s")[0] == 0
    assert run(capsys, "train", "--manifest", "s/train.csv", "--seed", 0, *FAST, "--out", "t")[0] == 0
    new = set(tree(tmp_path)) - before
    assert new and all(p.startswith(("s/", "t/")) for p in new)


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "pvrct.cli", "split", "--manifest", str(tmp_path / "no.csv"),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 2
    assert res.stderr.startswith("ERROR 2: manifest: ")
