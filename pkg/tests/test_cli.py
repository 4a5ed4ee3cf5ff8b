import csv
import hashlib
import logging
from pathlib import Path

import pytest

from voxpipe.main import main

SMALL_PHANTOM = [
    "--set", "phantom.xy=48",
    "--set", "phantom.nz_range=[24,24]",
    "--set", "phantom.arch_radius_mm=20",
    "--set", "phantom.base_radius_mm=8",
    "--set", "phantom.bulge_extent_mm=[16,20]",
]  # fmt: skip

SMALL_MODEL = [
    "--set", "prep.crop_xy=32",
    "--set", "model.generator_channels=[2,4]",
    "--set", "model.residual_blocks=1",
    "--set", "model.discriminator_channels=[2,2,2,2,2]",
    "--set", "model.discriminator_blocks=[1,1,1,1,1]",
    "--set", "train.seg_folds=2",
    "--set", "train.cls_folds=2",
    "--set", "train.seg_epochs=1",
    "--set", "train.cls_epochs=1",
    "--set", "train.cls_mask_source=\"ground_truth\"",
]  # fmt: skip


@pytest.fixture(autouse=True)
def _restore_root_handlers():
    """コマンド実行で root logger に足されたハンドラを外す"""
    root = logging.getLogger()
    before = list(root.handlers)
    level = root.level
    yield
    for h in root.handlers[:]:
        if h not in before:
            root.removeHandler(h)
            h.close()
    root.setLevel(level)


def _write_scores(path: Path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "deepvox", "deepaaa", "unet3d"])
        for i, row in enumerate([[0.9, 0.8, 0.7], [0.95, 0.85, 0.6], [0.8, 0.7, 0.5], [0.99, 0.9, 0.1]]):
            w.writerow([f"c{i}"] + row)
    return path


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["stats", "--bogus"]) == 2
    assert main([]) == 2
    scores = _write_scores(tmp_path / "s.csv")
    code = main(["stats", "--scores", str(scores), "--out-dir", str(tmp_path), "--set", "bogus=1"])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_version_exits_0():
    assert main(["--version"]) == 0


def test_missing_scores_file_exits_1(tmp_path):
    assert main(["stats", "--scores", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)]) == 1
    assert (tmp_path / "logs" / "voxpipe.log").exists()


def test_stats_prints_friedman_and_nemenyi(tmp_path, capsys):
    scores = _write_scores(tmp_path / "s.csv")
    assert main(["stats", "--scores", str(scores), "--out-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("chi2 8.0000  df 2  p 0.0183")
    assert out[1].startswith("nemenyi CD")
    assert any(line.startswith("deepvox") for line in out)


def test_gen_data_writes_cohort(tmp_path, capsys):
    code = main(["gen-data", "--n", "10", "--seed", "4", "--out-dir", str(tmp_path)] + SMALL_PHANTOM)
    assert code == 0
    data = tmp_path / "data"
    with open(data / "manifest.csv", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 10
    for row in rows:
        for suffix in (".nrrd", ".mask.nrrd", ".meta.json"):
            assert (data / f"{row['id']}{suffix}").exists()
    assert "generated 10 cases" in capsys.readouterr().out


@pytest.mark.slow
def test_end_to_end_pipeline(tmp_path):
    common = ["--out-dir", str(tmp_path)] + SMALL_PHANTOM + SMALL_MODEL
    assert main(["gen-data", "--n", "10"] + common) == 0
    assert main(["preprocess", "--annotators"] + common) == 0
    assert main(["train-seg", "--arch", "deepvox"] + common) == 0
    assert (tmp_path / "seg_deepvox_dev.csv").exists()
    assert main(["train-cls"] + common) == 0
    assert (tmp_path / "checkpoints" / "cls_savect_fold0.ckpt").exists()
    assert main(["eval"] + common) == 0
    case_id = sorted(p.name for p in (tmp_path / "prep").glob("an_*.meta.json"))[0].split(".")[0]
    assert main(["gradcam", case_id] + common) == 0
    assert main(["montage", case_id] + common) == 0
    scan = tmp_path / "data" / f"{case_id}.nrrd"
    inputs = [scan, scan.with_name(f"{case_id}.meta.json"), scan.with_name(f"{case_id}.mask.nrrd")] + sorted((tmp_path / "checkpoints").glob("*.ckpt"))
    before = {p: hashlib.sha256(p.read_bytes()).hexdigest() for p in inputs}
    assert main(["predict", str(scan), "--checkpoint", "seg_deepvox_fold0", "--classify"] + common) == 0
    assert {p: hashlib.sha256(p.read_bytes()).hexdigest() for p in inputs} == before
    assert (tmp_path / f"{case_id}.mask.nrrd").exists()
    assert (tmp_path / "predictions.csv").exists()
