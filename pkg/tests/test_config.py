import json

import pytest

from voxpipe.domain.config import (
    EvalConfig,
    HybridFocalParams,
    RunConfig,
    TrainConfig,
    load_run_config,
    run_config_to_dict,
    save_run_config,
)
from voxpipe.domain.errors import ConfigError, InvalidConfig


def test_defaults_without_file():
    cfg = load_run_config()
    assert cfg == RunConfig()
    assert cfg.loss.adversarial_weight == 5.0
    assert cfg.prep.target_spacing == (2.0, 2.0, 3.0)


def test_json_file_and_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 3, "train": {"arch": "deepaaa", "seg_epochs": 2}}), encoding="utf-8")
    cfg = load_run_config(str(path), ["train.seg_epochs=7", "model.generator_channels=[4,8]", "out_dir=elsewhere"])
    assert cfg.seed == 3
    assert cfg.train.arch == "deepaaa"
    assert cfg.train.seg_epochs == 7
    assert cfg.model.generator_channels == (4, 8)
    assert cfg.out_dir == "elsewhere"


def test_saved_config_loads_back(tmp_path):
    cfg = RunConfig(seed=11, train=TrainConfig(holdout_counts=(1, 1, 1, 1, 0)))
    path = tmp_path / "saved.json"
    save_run_config(cfg, path)
    assert load_run_config(str(path)) == cfg
    assert run_config_to_dict(cfg)["train"]["holdout_counts"] == (1, 1, 1, 1, 0)


@pytest.mark.parametrize(
    "override",
    [
        "bogus=1",
        "train.bogus=1",
        "train.arch=resnet",
        "train.seg_epochs=1.5",
        "post.connectivity=8",
        "eval.alpha=0.01",
        "seed",
        "train=3",
    ],
)
def test_invalid_overrides(override):
    with pytest.raises(InvalidConfig):
        load_run_config(None, [override])


def test_missing_or_broken_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "none.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(str(broken))


def test_section_validation():
    with pytest.raises(InvalidConfig):
        HybridFocalParams(lam=1.5)
    with pytest.raises(InvalidConfig):
        EvalConfig(aggregate="median")
    assert HybridFocalParams(gamma=0.75).gamma_focal == 0.75
    assert HybridFocalParams(gamma=0.75, focal_gamma=1.0).gamma_focal == 1.0
