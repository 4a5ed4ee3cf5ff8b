"""HU 変換と HFS への向き揃え"""

import numpy as np

from voxpipe.domain.errors import UnknownOrientationCode, WrongKind
from voxpipe.domain.models import Orientation, ScanMeta, Volume, VolumeKind

# HFS 基準で反転する配列軸（data は (z, y, x)）
_FLIP_AXES = {
    Orientation.HFS: (),
    Orientation.FFS: (0,),
    Orientation.HFP: (1, 2),
    Orientation.FFP: (0, 1, 2),
}


def hu_convert(v: Volume, meta: ScanMeta) -> Volume:
    """raw → HU: out = slope * in + intercept"""
    if v.kind is not VolumeKind.RAW:
        raise WrongKind(f"hu_convert は raw ボリュームのみ（kind={v.kind.value}）")
    hu = v.data.astype(np.float64) * meta.rescale_slope + meta.rescale_intercept
    return v.replace(data=hu.astype(np.float32), kind=VolumeKind.HU)


def reorient_hfs(v):
    """向きコードに応じて軸を反転し HFS にそろえる（再サンプリングはしない）"""
    if not isinstance(v.orientation, Orientation) or v.orientation not in _FLIP_AXES:
        raise UnknownOrientationCode(f"未知の向きコード: {v.orientation}")
    axes = _FLIP_AXES[v.orientation]
    if not axes:
        return v
    return v.replace(data=np.flip(v.data, axis=axes), orientation=Orientation.HFS)
