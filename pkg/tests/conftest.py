import numpy as np
import pytest

from voxpipe.domain.config import ModelConfig, PhantomConfig, RunConfig, TrainConfig
from voxpipe.domain.models import Group, ManifestRow, MaskVolume, Volume, VolumeKind


@pytest.fixture
def small_model() -> ModelConfig:
    """テスト用の小さなネットワーク（XY 16、チャネル数は数個）"""
    return ModelConfig(
        xy=16,
        fixed_z=8,
        generator_channels=(2, 4),
        residual_blocks=1,
        discriminator_channels=(2, 2, 2, 2, 2),
        discriminator_blocks=(1, 1, 1, 1, 1),
        deepaaa_channels=(2, 4),
        unet_channels=(2, 4),
    )


@pytest.fixture
def small_phantom() -> PhantomConfig:
    return PhantomConfig(xy=48, nz_range=(24, 24), arch_radius_mm=20.0, base_radius_mm=8.0, bulge_extent_mm=(16.0, 20.0), n_total=10)


@pytest.fixture
def tiny_run(small_model) -> RunConfig:
    return RunConfig(model=small_model, train=TrainConfig(seg_folds=2, cls_folds=2, seg_epochs=1, cls_epochs=1))


def make_rows(counts, start_seed: int = 0):
    """群ごとの件数 (LD, SD, CTA, AN, ANNC) から ManifestRow を作る"""
    rows = []
    n = 0
    for group, count in zip(Group, counts):
        for _ in range(count):
            rows.append(ManifestRow(f"{group.value.lower()}_{n:04d}", group, group.label, 8, 1.0, start_seed + n))
            n += 1
    return rows


def windowed(data, spacing=(2.0, 2.0, 3.0)) -> Volume:
    return Volume(data=np.asarray(data, dtype=np.float32), spacing=spacing, kind=VolumeKind.WINDOWED)


def mask_of(data, spacing=(2.0, 2.0, 3.0)) -> MaskVolume:
    return MaskVolume(data=np.asarray(data, dtype=np.uint8), spacing=spacing)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """中心差分による数値勾配（x は float64）"""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g
