import numpy as np
import pytest

from conftest import mask_of
from voxpipe.domain.config import PrepConfig
from voxpipe.domain.errors import DegenerateOutput, GeometryMismatch, WrongKind
from voxpipe.domain.models import Group, Orientation, ScanMeta, Volume, VolumeKind
from voxpipe.processing.prep import (
    crop_or_pad_xy,
    preprocess_pair,
    reshape_z,
    resample_nn,
    window,
    z_trim,
)
from voxpipe.processing.volio import hu_convert, reorient_hfs

META = ScanMeta(2.0, -50.0, Group.SD, 0)


def _raw(data, **kw):
    return Volume(data=np.asarray(data, dtype=np.int16), spacing=kw.pop("spacing", (1.0, 1.0, 1.0)), **kw)


def test_hu_convert_applies_rescale():
    out = hu_convert(_raw(np.full((1, 1, 1), 100)), META)
    assert out.kind is VolumeKind.HU
    assert out.data[0, 0, 0] == pytest.approx(150.0)
    with pytest.raises(WrongKind):
        hu_convert(out, META)


def test_reorient_ffs_reverses_z():
    data = np.arange(4).reshape(4, 1, 1)
    out = reorient_hfs(_raw(data, orientation=Orientation.FFS))
    assert out.orientation is Orientation.HFS
    np.testing.assert_array_equal(out.data[:, 0, 0], [3, 2, 1, 0])
    hfs = _raw(data)
    assert reorient_hfs(hfs) is hfs


def test_reorient_hfp_flips_in_plane():
    data = np.arange(8).reshape(2, 2, 2)
    out = reorient_hfs(_raw(data, orientation=Orientation.HFP))
    np.testing.assert_array_equal(out.data, data[:, ::-1, ::-1])


def test_window_soft_tissue():
    hu = Volume(data=np.array([[[-150.0, 50.0, 250.0, -500.0]]]), spacing=(1.0, 1.0, 1.0), kind=VolumeKind.HU)
    out = window(hu, PrepConfig(window_level=50.0, window_width=400.0))
    assert out.kind is VolumeKind.WINDOWED
    np.testing.assert_allclose(out.data[0, 0], [0.0, 0.5, 1.0, 0.0], atol=1e-7)
    with pytest.raises(WrongKind):
        window(out)


def test_resample_nn_halves_grid():
    data = np.arange(64).reshape(4, 4, 4)
    out = resample_nn(_raw(data), (2.0, 2.0, 2.0))
    assert out.dims == (2, 2, 2)
    assert out.spacing == (2.0, 2.0, 2.0)
    np.testing.assert_array_equal(out.data, data[np.ix_([1, 3], [1, 3], [1, 3])])


def test_resample_nn_rejects_degenerate_targets():
    with pytest.raises(ValueError):
        resample_nn(_raw(np.zeros((2, 2, 2))), (0.0, 1.0, 1.0))
    with pytest.raises(DegenerateOutput):
        resample_nn(_raw(np.zeros((2, 2, 2))), (1.0, 1.0, 10.0))


def test_crop_and_pad_xy():
    cropped = crop_or_pad_xy(_raw(np.ones((2, 130, 130))), 128)
    assert cropped.dims == (128, 128, 2)
    padded = crop_or_pad_xy(_raw(np.ones((2, 120, 120))), 128)
    assert padded.dims == (128, 128, 2)
    assert padded.data[0, :4].sum() == 0 and padded.data[0, 124:].sum() == 0
    assert padded.data[0, 4:124, 4:124].min() == 1


def test_reshape_z():
    data = np.arange(256).reshape(256, 1, 1)
    out = reshape_z(_raw(data), 128)
    np.testing.assert_array_equal(out.data[:, 0, 0], np.arange(1, 256, 2))
    assert out.spacing[2] == pytest.approx(2.0)
    up = reshape_z(_raw(np.arange(64).reshape(64, 1, 1)), 128)
    np.testing.assert_array_equal(up.data[:, 0, 0], np.repeat(np.arange(64), 2))


def test_z_trim_keeps_annotated_range():
    m = np.zeros((80, 3, 3), dtype=np.uint8)
    m[10:65, 1, 1] = 1
    vol = _raw(np.arange(80 * 9).reshape(80, 3, 3))
    res = z_trim(mask_of(m, (1.0, 1.0, 1.0)), vol)
    assert not res.empty
    assert res.z_range == (10, 65)
    assert res.mask.dims[2] == 55 and res.volume.dims[2] == 55
    np.testing.assert_array_equal(res.volume.data, vol.data[10:65])


def test_z_trim_empty_mask():
    res = z_trim(mask_of(np.zeros((5, 2, 2))))
    assert res.empty and res.z_range == (0, 1)
    assert res.volume is None
    with pytest.raises(GeometryMismatch):
        z_trim(mask_of(np.zeros((5, 2, 2))), _raw(np.zeros((4, 2, 2))))


def test_preprocess_pair_keeps_geometry_aligned():
    vol = _raw(np.full((9, 20, 20), 1100), spacing=(1.0, 1.0, 1.5))
    m = np.zeros((9, 20, 20), dtype=np.uint8)
    m[3:6, 8:12, 8:12] = 1
    meta = ScanMeta(1.0, -1024.0, Group.SD, 0)
    cfg = PrepConfig(crop_xy=16)
    pv, pm = preprocess_pair(vol, mask_of(m, (1.0, 1.0, 1.5)), meta, cfg)
    assert pv.dims == pm.dims == (16, 16, 5)
    assert pv.spacing == pm.spacing == (2.0, 2.0, 3.0)
    assert pv.kind is VolumeKind.WINDOWED
    assert pm.foreground > 0
