import csv
import dataclasses

import numpy as np
import pytest

from conftest import make_rows, mask_of, windowed
from voxpipe.domain.config import TrainConfig
from voxpipe.domain.models import Group
from voxpipe.domain.seeding import derive_seed
from voxpipe.nets.builders import build_deepvox_discriminator, build_deepvox_generator, build_segmenter, build_unet3d_fixed
from voxpipe.repositories.checkpoint_file import FileCheckpointRepository
from voxpipe.training.folds import stratified_kfold
from voxpipe.training.loops import (
    SEG_COLUMNS,
    SegSample,
    gan_train_step,
    predict_probs,
    seg_checkpoint_name,
    train_classifier,
    train_segmentation,
)
from voxpipe.training.optim import Adam


def _case(seed, nz=4, xy=16):
    rng = np.random.default_rng(seed)
    m = np.zeros((nz, xy, xy), dtype=np.uint8)
    m[:, 5:11, 6:10] = 1
    img = np.clip(0.3 + 0.5 * m + rng.normal(0.0, 0.05, m.shape), 0.0, 1.0)
    return windowed(img), mask_of(m)


def _samples(rows):
    out = {}
    for i, row in enumerate(rows):
        vol, mask = _case(i)
        out[row.case_id] = SegSample(row.case_id, vol, mask, row.group)
    return out


def _read_csv(path):
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.reader(f))


def test_gan_step_with_zero_lr_changes_nothing(small_model):
    G = build_deepvox_generator(1, small_model)
    D = build_deepvox_discriminator(2, small_model)
    g0, d0 = G.state_dict(), D.state_dict()
    vol, mask = _case(0)
    ld, lg = gan_train_step(G, D, Adam(G.trainable(), lr=0.0), Adam(D.trainable(), lr=0.0), vol.data, mask.data)
    assert np.isfinite(ld) and np.isfinite(lg)
    for name, arr in G.state_dict().items():
        np.testing.assert_array_equal(arr, g0[name])
    for name, arr in D.state_dict().items():
        np.testing.assert_array_equal(arr, d0[name])


def test_gan_step_clears_discriminator_grads(small_model):
    G = build_deepvox_generator(1, small_model)
    D = build_deepvox_discriminator(2, small_model)
    vol, mask = _case(1)
    before = D.state_dict()
    gan_train_step(G, D, Adam(G.trainable(), lr=1e-3), Adam(D.trainable(), lr=1e-3), vol.data, mask.data)
    assert all(p.grad is None or not np.any(p.grad) for p in D.trainable())
    assert any(not np.array_equal(before[n], a) for n, a in D.state_dict().items())


def test_predict_probs_restores_depth_for_fixed_z(small_model):
    net = build_unet3d_fixed(0, small_model)
    vol, _ = _case(0, nz=5)
    prob = predict_probs(net, vol)
    assert prob.data.shape == vol.data.shape
    assert prob.spacing == vol.spacing
    assert 0.0 <= prob.data.min() and prob.data.max() <= 1.0


def test_zero_epochs_keeps_initial_checkpoint(tmp_path, tiny_run):
    cfg = dataclasses.replace(tiny_run, train=TrainConfig(seg_folds=2, seg_epochs=0))
    rows = make_rows((2, 2, 0, 0, 0))
    folds = stratified_kfold(rows, 2, 0)
    ckpts = FileCheckpointRepository(tmp_path / "ckpt")
    res = train_segmentation(cfg, _samples(rows), folds, tmp_path, ckpts, arch="deepaaa", fold_ids=[0])
    assert _read_csv(tmp_path / "deepaaa_fold0_metrics.csv") == [list(SEG_COLUMNS)]
    init = build_segmenter("deepaaa", derive_seed(cfg.seed, "seg", "deepaaa", 0), cfg.model)
    saved = ckpts.load(seg_checkpoint_name("deepaaa", 0), init.arch)
    for name, arr in init.state_dict().items():
        np.testing.assert_allclose(saved[name], arr, rtol=1e-6)
    assert res.folds[0].best_epoch == 0
    assert set(res.report.rows) == set(folds.dev_ids(0))


@pytest.mark.parametrize("arch", ["deepvox", "unet3d"])
def test_one_epoch_segmentation(tmp_path, tiny_run, arch):
    rows = make_rows((2, 2, 0, 0, 0))
    folds = stratified_kfold(rows, 2, 0)
    ckpts = FileCheckpointRepository(tmp_path / "ckpt")
    res = train_segmentation(tiny_run, _samples(rows), folds, tmp_path, ckpts, arch=arch)
    assert [f.fold for f in res.folds] == [0, 1]
    assert ckpts.names() == [f"seg_{arch}_fold0", f"seg_{arch}_fold1"]
    table = _read_csv(tmp_path / f"{arch}_fold1_metrics.csv")
    assert len(table) == 2 and table[1][0] == "1"
    assert len(_read_csv(tmp_path / f"{arch}_fold1_timing.csv")) == 2
    assert sorted(res.dev_masks) == sorted(r.case_id for r in rows)
    assert all(m.data.shape == (4, 16, 16) for m in res.dev_masks.values())
    assert res.mean_epoch_seconds > 0


def test_one_epoch_classifier(tmp_path, tiny_run):
    rows = make_rows((2, 0, 0, 2, 0))
    folds = stratified_kfold(rows, 2, 0)
    masks = {r.case_id: _case(i)[1] for i, r in enumerate(rows)}
    labels = {r.case_id: r.label for r in rows}
    assert sorted(labels.values()) == [0, 0, 1, 1]
    ckpts = FileCheckpointRepository(tmp_path / "ckpt")
    res = train_classifier(tiny_run, masks, labels, folds, tmp_path, ckpts)
    assert sorted(res.report.rows) == ["fold0", "fold1"]
    assert sorted(res.probs) == sorted(labels)
    assert all(0.0 <= p <= 1.0 for p in res.probs.values())
    assert _read_csv(tmp_path / "savect_fold0_metrics.csv")[0][:3] == ["epoch", "lr", "train_loss"]
    assert {r.group for r in rows} == {Group.LD, Group.AN}
