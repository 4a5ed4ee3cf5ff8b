import numpy as np
import pytest

from voxpipe.domain.config import ModelConfig
from voxpipe.domain.errors import CheckpointMismatch, LayerNotFound, WrongInputShape
from voxpipe.engine.tensor import Tensor
from voxpipe.nets.builders import (
    build_deepaaa,
    build_deepvox_discriminator,
    build_deepvox_generator,
    build_savect,
    build_segmenter,
    build_unet3d_fixed,
)


def _scan(z, xy=16, seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(1, 1, z, xy, xy)).astype(np.float32)


@pytest.mark.parametrize("z", [5, 17, 40])
def test_generator_accepts_any_depth(small_model, z):
    net = build_deepvox_generator(0, small_model)
    out = net.infer(_scan(z))
    assert out.shape == (1, 1, z, 16, 16)
    assert np.all((out > 0.0) & (out < 1.0))


def test_generator_zero_input(small_model):
    out = build_deepvox_generator(0, small_model).infer(np.zeros((1, 1, 8, 16, 16), dtype=np.float32))
    assert out.shape == (1, 1, 8, 16, 16)
    assert np.all((out > 0.0) & (out < 1.0))


@pytest.mark.parametrize("z", [5, 17])
def test_deepaaa_variable_depth(small_model, z):
    out = build_deepaaa(1, small_model).infer(_scan(z))
    assert out.shape == (1, 1, z, 16, 16)


def test_unet3d_requires_fixed_depth(small_model):
    net = build_unet3d_fixed(2, small_model)
    assert net.infer(_scan(8)).shape == (1, 1, 8, 16, 16)
    with pytest.raises(WrongInputShape):
        net.infer(_scan(5))


def test_discriminator_is_conditioned_on_scan_and_mask(small_model):
    D = build_deepvox_discriminator(3, small_model)
    scan = Tensor(_scan(6))
    mask = Tensor((_scan(6, seed=1) > 0.5).astype(np.float32))
    patches = D.score(scan, mask)
    assert patches.shape[:3] == (1, 1, 6)
    assert D.input_spec["channels"] == 2
    with pytest.raises(WrongInputShape):
        D(scan)


def test_savect_all_zero_mask_gives_sigmoid_of_bias(small_model):
    net = build_savect(4, small_model)
    p = net.infer(np.zeros((1, 1, 7, 16, 16), dtype=np.float32))
    assert p.shape == (1, 1)
    assert p[0, 0] == pytest.approx(0.5)


def test_savect_blocks_double_each_conv(small_model):
    net = build_savect(4, small_model)
    assert [len(b) for b in net.blocks] == [2, 2, 2, 2, 2]
    assert net.last_conv() == "block4.conv1"


def test_same_seed_same_parameters(small_model):
    a = build_segmenter("deepvox", 7, small_model).state_dict()
    b = build_segmenter("deepvox", 7, small_model).state_dict()
    c = build_segmenter("deepvox", 8, small_model).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith(".w"))


def test_unknown_architecture(small_model):
    with pytest.raises(ValueError):
        build_segmenter("vnet", 0, small_model)


def test_capture_keeps_layer_output(small_model):
    net = build_savect(5, small_model)
    x = np.ones((1, 1, 4, 16, 16), dtype=np.float32)
    with net.capture(net.last_conv()):
        net.logits(x)
    assert net.captured is not None
    assert net.captured.shape[:2] == (1, 2)
    with pytest.raises(LayerNotFound):
        with net.capture("block9.conv0"):
            pass


def test_load_state_dict_checks_names_and_shapes(small_model):
    net = build_savect(6, small_model)
    state = net.state_dict()
    other = build_savect(9, small_model)
    other.load_state_dict(state)
    assert all(np.array_equal(other.state_dict()[k], state[k]) for k in state)

    missing = dict(state)
    missing.pop(next(iter(missing)))
    with pytest.raises(CheckpointMismatch):
        other.load_state_dict(missing)
    bad = dict(state)
    key = next(k for k in bad if k.endswith(".w"))
    bad[key] = np.zeros((1,), dtype=np.float32)
    with pytest.raises(CheckpointMismatch):
        other.load_state_dict(bad)


def test_trainable_params_are_disjoint_between_generator_and_discriminator(small_model):
    G = build_deepvox_generator(0, small_model)
    D = build_deepvox_discriminator(0, small_model)
    g_ids = {id(p.tensor) for p in G.trainable()}
    d_ids = {id(p.tensor) for p in D.trainable()}
    assert g_ids and d_ids
    assert not g_ids & d_ids


def test_baseline_is_larger_than_generator_with_default_channels():
    cfg = ModelConfig()
    assert build_deepaaa(0, cfg).param_count() > build_deepvox_generator(0, cfg).param_count()
