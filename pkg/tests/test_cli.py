import csv
import json
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from transinv import cli
from transinv import data as D
from transinv import report as R

EXAMPLE = Path(str(resources.files("transinv").joinpath("manifests", "example.yaml")))

TINY = """\
name: tiny
seed: 1
repetitions: 1
pretrain:
  bank: {kind: glyph, classes: 3, seed: 100}
  policy: {kind: fully-translated}
  stop: {max_epochs: 1}
  samples_per_epoch: 16
  batch_size: 8
finetune:
  bank: BANK
  policy: {kind: fixed}
  stop: {max_epochs: 1}
  samples_per_epoch: 16
  batch_size: 8
evaluation: {grid: 2, cosine_steps: 2}
"""


def write_tiny(tmp_path, bank="{kind: glyph, classes: 3, seed: 200}", extra=""):
    p = tmp_path / "m.yaml"
    p.write_text(TINY.replace("BANK", bank) + extra)
    return p


def test_example_manifest_emits_four_artifacts(tmp_path, capsys):
    assert cli.main(["experiment", str(EXAMPLE), "-o", str(tmp_path / "out")]) == 0
    printed = capsys.readouterr().out
    for name in ("run.json", "heatmap.csv", "cosine.csv", "heatmap.pgm"):
        assert (tmp_path / "out" / name).is_file()
        assert f"wrote {tmp_path / 'out' / name}" in printed
    rows = list(csv.reader((tmp_path / "out" / "heatmap.csv").open()))
    assert tuple(rows[0]) == R.HEATMAP_COLUMNS
    assert len(rows) == 1 + 2 * 9
    assert tuple(next(csv.reader((tmp_path / "out" / "cosine.csv").open()))) == R.COSINE_COLUMNS
    assert R.read_pgm(tmp_path / "out" / "heatmap.pgm").shape == (17, 17)


def test_env_var_output_dir_and_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "envout"))
    assert cli.main(["experiment", str(write_tiny(tmp_path)), "--seed", "42"]) == 0
    doc = json.loads((tmp_path / "envout" / "run.json").read_text())
    assert doc["cli"]["seed_override"] == 42
    assert doc["manifest"]["seed"] == 42 and doc["seeds"] == [42]


def test_missing_dataset_is_a_data_error_before_training(tmp_path, capsys):
    m = write_tiny(tmp_path, "{kind: idx, images: nowhere.idx, labels: nowhere-labels.idx}")
    assert cli.main(["experiment", str(m), "-o", str(tmp_path / "o")]) == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "nowhere.idx" in err and "not found" in err
    assert not (tmp_path / "o" / "run.json").exists()


def test_malformed_manifest_is_a_config_error(tmp_path, capsys):
    m = write_tiny(tmp_path, extra="repetitions_typo: 3\n")
    assert cli.main(["experiment", str(m), "-o", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "repetitions_typo" in err and ":17:" in err
    assert cli.main(["experiment", str(tmp_path / "absent.yaml")]) == cli.EXIT_CONFIG


def test_gen_data_then_idx_manifest(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--classes", "3", "--size", "16", "--name", "g3", "-o", str(out)]) == 0
    bank = D.load_idx(out / "g3-images-idx3-ubyte", out / "g3-labels-idx1-ubyte")
    assert bank.num_classes == 3 and bank.item_size == 16
    # relative IDX paths resolve against the manifest's directory
    m = write_tiny(tmp_path, "{kind: idx, images: data/g3-images-idx3-ubyte, labels: data/g3-labels-idx1-ubyte}")
    assert cli.main(["experiment", str(m), "-o", str(tmp_path / "run")]) == 0


def test_train_eval_cosine_chain(tmp_path, capsys):
    m = write_tiny(tmp_path)
    assert cli.main(["train", str(m), "--stage", "pretrain", "-o", str(tmp_path / "pre")]) == 0
    ckpt = tmp_path / "pre" / "model.ckpt"
    assert cli.main(["train", str(m), "--stage", "finetune", "--init", str(ckpt), "-o", str(tmp_path / "ft")]) == 0
    ft = tmp_path / "ft" / "model.ckpt"
    assert cli.main(["eval-grid", str(m), "--checkpoint", str(ft), "-o", str(tmp_path / "ev")]) == 0
    assert cli.main(["cosine", str(m), "--checkpoint", str(ft), "-o", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader((tmp_path / "ev" / "cosine.csv").open()))
    assert rows[0]["dx"] == "0" and rows[0]["mean"] == "1.000000"
    assert len(list(csv.DictReader((tmp_path / "ev" / "heatmap.csv").open()))) == 4
    hist = json.loads((tmp_path / "ft" / "history.json").read_text())
    assert hist["stage"] == "finetune" and len(hist["loss"]) == 1


def test_bad_checkpoint_is_data_error(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"nonsense")
    assert cli.main(["eval-grid", str(write_tiny(tmp_path)), "--checkpoint", str(bad), "-o", str(tmp_path)]) == cli.EXIT_DATA


def test_report_regenerates_identical_tables(tmp_path):
    m = write_tiny(tmp_path)
    assert cli.main(["experiment", str(m), "-o", str(tmp_path / "a")]) == 0
    assert cli.main(["report", str(tmp_path / "a" / "run.json"), "-o", str(tmp_path / "b")]) == 0
    for name in ("heatmap.csv", "cosine.csv", "heatmap.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert cli.main(["report", str(tmp_path / "missing.json"), "-o", str(tmp_path / "c")]) == cli.EXIT_DATA


def test_matrix_two_by_two(tmp_path):
    extra = ("matrix:\n  banks:\n    - {kind: glyph, name: A, classes: 3, seed: 1}\n"
             "    - {kind: glyph, name: B, classes: 3, seed: 2}\n")
    m = write_tiny(tmp_path, extra=extra)
    assert cli.main(["matrix", str(m), "-o", str(tmp_path / "mx")]) == 0
    cells = list(csv.DictReader((tmp_path / "mx" / "matrix_cells.csv").open()))
    assert [(c["pretrain"], c["finetune"], c["diagonal"]) for c in cells] == [
        ("A", "A", "1"), ("A", "B", "0"), ("B", "A", "0"), ("B", "B", "1")]
    wide = list(csv.reader((tmp_path / "mx" / "matrix_mean.csv").open()))
    assert wide[0] == ["pretrain", "A", "B"] and [r[0] for r in wide[1:]] == ["A", "B"]
    for i, c in enumerate(cells):
        rec = json.loads((tmp_path / "mx" / f"cell{i:02d}" / "run.json").read_text())
        mean = rec["aggregate"]["mean_normalized_accuracy"]
        assert c["mean"] == f"{mean:.4f}"
        assert wide[1 + i // 2][1 + i % 2] == c["mean"]


def test_matrix_requires_section(tmp_path):
    assert cli.main(["matrix", str(write_tiny(tmp_path)), "-o", str(tmp_path)]) == cli.EXIT_CONFIG
