import json

import numpy as np
import pytest

from tubeseg import io, postprocess
from tubeseg.cli import main

TINY = ["--set", "encoder_stage_depths=1,1,1,1", "--set", "base_width=8", "--augment", "none", "--tta", "off"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert main(["generate", "--out", str(out), "--count", "6", "--size", "64", "--seed", "2"]) == 0
    return out / "manifest.tsv"


def test_generate_default_count(tmp_path):
    assert main(["generate", "--out", str(tmp_path), "--size", "64"]) == 0
    assert len(io.read_manifest(tmp_path / "manifest.tsv")) == 40


def test_eval_identical_manifests_is_perfect(dataset, tmp_path, capsys):
    assert main(["eval", "--pred", str(dataset), "--gt", str(dataset), "--out", str(tmp_path / "m.csv")]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "image,fold,iou,fscore,mean_iou,aji"
    assert all(line.endswith("1.000000,1.000000,1.000000,1.000000") for line in lines[1:])
    assert "iou 1.000000" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--manifest", "m.tsv", "--out", "o", "--epochs", "0"],
        ["train", "--manifest", "m.tsv", "--out", "o", "--no-such-flag"],
        ["train", "--manifest", "m.tsv", "--out", "o", "--set", "lossy=1"],
        ["train", "--manifest", "m.tsv", "--out", "o", "--set", "nonsense"],
        ["infer", "--checkpoint", "c", "--input", "i", "--out", "o", "--tta", "maybe"],
        ["bogus"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_missing_checkpoint_exits_1(tmp_path):
    assert main(["infer", "--checkpoint", str(tmp_path / "none.ckpt"), "--input", str(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_stats(dataset, tmp_path):
    assert main(["stats", "--manifest", str(dataset), "--out", str(tmp_path / "s.json")]) == 0
    stats = json.loads((tmp_path / "s.json").read_text())
    assert len(stats["mean"]) == 3 and min(stats["std"]) > 0


def test_train_infer_eval_round_trip(dataset, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--manifest", str(dataset), "--out", str(run), "--fold", "0", "--k", "3", "--epochs", "1", *TINY]) == 0
    assert (run / "final.ckpt").exists() and (run / "log.csv").exists() and (run / "config.txt").exists()
    assert main(["train", "--manifest", str(dataset), "--out", str(run), "--fold", "0", "--k", "3", "--epochs", "2",
                 "--resume", str(run / "final.ckpt"), *TINY]) == 0
    assert len((run / "log.csv").read_text().splitlines()) == 2  # header plus the resumed epoch
    images = dataset.parent / "images"
    assert main(["infer", "--checkpoint", str(run / "final.ckpt"), "--input", str(images), "--out", str(tmp_path / "pred"), "--tta", "off"]) == 0
    assert main(["eval", "--pred", str(tmp_path / "pred" / "predictions.tsv"), "--gt", str(dataset), "--out", str(tmp_path / "m.csv")]) == 0
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 1 + 6 + 1


def test_cross_validate(dataset, tmp_path, capsys):
    assert main(["cross-validate", "--manifest", str(dataset), "--out", str(tmp_path), "--k", "2", "--epochs", "1", *TINY]) == 0
    out = capsys.readouterr().out
    assert "fold 1:" in out and "aji:" in out
    assert (tmp_path / "metrics.csv").exists() and (tmp_path / "audit.json").exists()


def test_postprocess_with_seed_file(dataset, tmp_path):
    rec = io.read_manifest(dataset)[0]
    assert main(["postprocess", "--mask", str(rec.mask2), "--out", str(tmp_path / "auto.png")]) == 0
    auto = io.read_mask(tmp_path / "auto.png")
    assert np.array_equal(auto > 0, io.read_mask(rec.mask2) > 0)
    fg = io.read_mask(rec.mask2) > 0
    y, x = (int(v[0]) for v in np.nonzero(fg))
    postprocess.write_seeds(tmp_path / "s.txt", [(x, y)])
    assert main(["postprocess", "--mask", str(rec.mask2), "--out", str(tmp_path / "one.png"), "--seeds", str(tmp_path / "s.txt")]) == 0
    assert io.read_mask(tmp_path / "one.png").max() >= 1
    assert main(["postprocess", "--mask", str(rec.mask3), "--out", str(tmp_path / "three.png"), "--three-class"]) == 0
    assert io.read_mask(tmp_path / "three.png").max() == io.read_mask(rec.instances).max()
