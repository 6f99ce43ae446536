"""
End-to-end tests of the highfm command line on a small synthetic dataset
"""

import json

import pytest

from highfm.cli import _heads_for, _int_list, _weight_grid, _year_range, main
from highfm.datapipe.container import Manifest
from highfm.mae import load_checkpoint
from highfm.metrics import read_jsonl

GEOMETRY = ["--dim", "16", "--depth", "1", "--decoder-depth", "1", "--batch", "8"]
SEG = ["--decoder-channels", "8,8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """synth -> tile -> collocate -> split, with one year per split"""
    root = tmp_path_factory.mktemp("cli")
    synth = ["synth", "--seed", "2", "--scenes", "6", "--years", "2020,2022,2023", "--fire-density", "0.01"]
    assert main([*synth, "--out", str(root / "raw")]) == 0
    assert main(["tile", "--scenes", str(root / "raw" / "scenes"), "--out", str(root / "tiles")]) == 0
    fire = root / "fire" / "manifest.tsv"
    labels = str(root / "raw" / "labels")
    assert main(["collocate", "--images", str(root / "tiles"), "--labels", labels, "--out", str(fire)]) == 0
    assert main(["split", "--manifest", str(fire)]) == 0
    return root


def test_argument_helpers():
    assert _int_list("0..4") == [0, 1, 2, 3, 4]
    assert _int_list("3,5") == [3, 5]
    assert _year_range("2014-2018") == (2014, 2018)
    assert _year_range("2019") == (2019, 2019)
    assert _weight_grid("1:1,1:500") == [(1.0, 1.0), (1.0, 500.0)]
    assert _heads_for(768) == 12
    assert _heads_for(16) == 4


def test_dataset_preparation(dataset):
    tiles = Manifest.read(dataset / "tiles" / "manifest.tsv")
    assert set(tiles.splits) == {"unassigned"}
    fire = Manifest.read(dataset / "fire" / "manifest.tsv")
    assert set(fire.splits) == {"train", "validation", "test"}
    assert all(e.path.startswith("fire/") for e in fire.entries)


def test_stats(dataset, capsys):
    assert main(["stats", "--data", str(dataset / "fire" / "manifest.tsv")]) == 0
    out = capsys.readouterr().out
    assert "target_ratio" in out
    assert "validation" in out


def test_split_with_rules_file(dataset, tmp_path):
    rules = tmp_path / "rules.json"
    rules.write_text(json.dumps({"train": [[2020, 2022]], "test": [[2023, 2023]]}))
    out = tmp_path / "resplit.tsv"
    fire = str(dataset / "fire" / "manifest.tsv")
    assert main(["split", "--manifest", fire, "--rules", str(rules), "--out", str(out)]) == 0
    assert set(Manifest.read(out).splits) == {"train", "test"}


def test_pretrain_finetune_eval(dataset, tmp_path, capsys):
    tiles = dataset / "tiles" / "manifest.tsv"
    # entries resolve against the manifest's directory, so the rewrite stays next to the tiles
    pre_manifest = dataset / "tiles" / "pretrain.tsv"
    assert main(["split", "--manifest", str(tiles), "--pretrain-years", "2020-2022", "--out", str(pre_manifest)]) == 0
    assert set(Manifest.read(pre_manifest).splits) == {"train", "validation"}

    mae_ckpt = tmp_path / "mae.ckpt"
    args = ["pretrain", "--data", str(pre_manifest), *GEOMETRY, "--epochs", "1", "--lr", "1e-3", "--out", str(mae_ckpt)]
    assert main(args) == 0
    _, meta = load_checkpoint(mae_ckpt)
    assert meta["kind"] == "mae"
    assert meta["model"]["embed_dim"] == 16
    assert read_jsonl(f"{mae_ckpt}.history.jsonl")[0]["epoch"] == 1

    seg_ckpt = tmp_path / "seg.ckpt"
    fire = str(dataset / "fire" / "manifest.tsv")
    args = ["finetune", "--data", fire, "--ckpt", str(mae_ckpt), *SEG, "--batch", "8", "--epochs", "2"]
    assert main([*args, "--loss", "dice", "--augment", "on", "--out", str(seg_ckpt)]) == 0
    _, meta = load_checkpoint(seg_ckpt)
    assert meta["kind"] == "segmentation"
    assert meta["seg"]["loss_kind"] == "dice"
    assert meta["best_epoch"] in (1, 2)

    report = tmp_path / "eval.jsonl"
    export = tmp_path / "preds"
    capsys.readouterr()
    args = ["eval", "--ckpt", str(seg_ckpt), "--data", fire, "--report", str(report)]
    assert main([*args, "--export", str(export)]) == 0
    assert "balanced_accuracy" in capsys.readouterr().out
    record = read_jsonl(report)[0]
    assert record["split"] == "test"
    assert record["n_images"] == len(list(export.glob("*.hfmp")))
    assert (export / "metrics.txt").exists()

    args = ["eval", "--ckpt", str(seg_ckpt), "--data", fire, "--split", "validation", "--report", str(report)]
    assert main([*args, "--append"]) == 0
    assert [r["split"] for r in read_jsonl(report)] == ["test", "validation"]


def test_finetune_from_scratch_and_sweep(dataset, tmp_path):
    fire = str(dataset / "fire" / "manifest.tsv")
    report = tmp_path / "sweep.jsonl"
    args = ["sweep", "--data", fire, *GEOMETRY, *SEG, "--epochs", "1"]
    assert main([*args, "--grid", "1:1,1:5", "--seeds", "0,1", "--aggregate", "--report", str(report)]) == 0
    records = read_jsonl(report)
    runs = [r for r in records if r["record"] == "run"]
    assert len(runs) == 4
    assert {tuple(r["class_weights"]) for r in runs} == {(1.0, 1.0), (1.0, 5.0)}
    assert any(r["record"] == "aggregate" and r["split"] == "test" for r in records)

    compare = tmp_path / "compare.jsonl"
    assert main([*args, "--compare", "--seeds", "0", "--report", str(compare)]) == 0
    assert {r["loss"] for r in read_jsonl(compare)} == {"wce", "dice"}


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--config", "toy"]) == 0
    out = capsys.readouterr().out
    assert out.count("✅") == 3


def test_errors_are_reported(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path / "m.tsv")]) == 2
    err = capsys.readouterr().err
    payload = json.loads(err.strip().splitlines()[-1][len("error: "):])
    assert payload["type"] == "CheckpointError"

    assert main(["gradcheck", "--config", "full"]) == 2
    err = capsys.readouterr().err
    assert json.loads(err.strip().splitlines()[-1][len("error: "):])["type"] == "ConfigError"


def test_invalid_geometry_is_a_config_error(dataset, capsys):
    fire = str(dataset / "fire" / "manifest.tsv")
    args = ["finetune", "--data", fire, "--dim", "18", "--heads", "3", "--depth", "1", "--epochs", "1"]
    assert main([*args, "--out", "unused.ckpt"]) == 2
    assert '"ConfigError"' in capsys.readouterr().err
