"""前処理チェーン（HU 変換 → HFS → ウィンドウ → 再サンプリング → クロップ → Z 変形）。

どの関数も入力を書き換えず、新しい Volume / MaskVolume を返す。
ペアで渡す操作は、出力のペアも dims / spacing が一致する。
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from voxpipe.domain.config import PrepConfig
from voxpipe.domain.errors import DegenerateOutput, GeometryMismatch, WrongKind
from voxpipe.domain.models import MaskVolume, ScanMeta, Volume, VolumeKind, same_geometry
from voxpipe.processing.volio import hu_convert, reorient_hfs

_log = logging.getLogger("voxpipe.prep")


def window(v: Volume, cfg: PrepConfig = PrepConfig()) -> Volume:
    """軟部組織ウィンドウ: [level - width/2, level + width/2] を [0,1] に線形写像"""
    if v.kind is not VolumeKind.HU:
        raise WrongKind(f"window は HU ボリュームのみ（kind={v.kind.value}）")
    lo = cfg.window_level - cfg.window_width / 2.0
    out = (v.data.astype(np.float64) - lo) / cfg.window_width
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return v.replace(data=out, kind=VolumeKind.WINDOWED)


def nearest_indices(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """出力ボクセル中心 j → 入力 index floor(j*scale + 0.5*scale)（範囲内に丸める）"""
    j = np.arange(n_out, dtype=np.float64)
    idx = np.floor(j * scale + 0.5 * scale).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_nn(v, target_spacing: Tuple[float, float, float]):
    """最近傍補間で target_spacing (sx, sy, sz) に再サンプリング"""
    if any(not (t > 0) for t in target_spacing):
        raise ValueError(f"target_spacing は正の値: {target_spacing}")
    nx, ny, nz = v.dims
    sx, sy, sz = v.spacing
    tx, ty, tz = (float(t) for t in target_spacing)
    out = []
    for n, s, t in ((nz, sz, tz), (ny, sy, ty), (nx, sx, tx)):
        m = math.floor(n * s / t + 0.5)
        if m < 1:
            raise DegenerateOutput(f"再サンプリング後のボクセル数が 0 になります: n={n} spacing={s} target={t}")
        out.append(nearest_indices(n, m, t / s))
    data = v.data[np.ix_(out[0], out[1], out[2])]
    return v.replace(data=data, spacing=(tx, ty, tz))


def _crop_or_pad_axis(data: np.ndarray, axis: int, size: int) -> np.ndarray:
    n = data.shape[axis]
    if n == size:
        return data
    if n > size:
        lo = (n - size) // 2  # 奇数の余りは高い側から落とす
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(lo, lo + size)
        return data[tuple(sl)]
    total = size - n
    lo = total // 2  # 奇数の余りは高い側に詰める
    pad = [(0, 0)] * data.ndim
    pad[axis] = (lo, total - lo)
    return np.pad(data, pad, mode="constant", constant_values=0)


def crop_or_pad_xy(v, size: int = 128):
    """X / Y を size にそろえる（中央クロップ or 0 パディング）。Z はそのまま"""
    data = _crop_or_pad_axis(v.data, 1, size)
    data = _crop_or_pad_axis(data, 2, size)
    return v.replace(data=data)


def reshape_z(v, nz: int = 128):
    """Z 方向だけ最近傍補間で nz 枚にする（固定 Z の 3D U-Net 用）"""
    n = v.data.shape[0]
    if n == nz:
        return v
    idx = nearest_indices(n, nz, n / nz)
    sx, sy, sz = v.spacing
    return v.replace(data=v.data[idx], spacing=(sx, sy, sz * n / nz))


@dataclass(frozen=True)
class ZTrimResult:
    mask: MaskVolume
    volume: Optional[Volume]
    empty: bool  # 全スライスが背景だった（警告）
    z_range: Tuple[int, int]  # 残したスライス [start, stop)


def z_trim(m: MaskVolume, paired: Optional[Volume] = None) -> ZTrimResult:
    """前後の全 0 スライスを落とす。全部 0 なら 1 枚だけ残して empty=True"""
    if paired is not None and not same_geometry(m, paired):
        raise GeometryMismatch("z_trim: マスクとボリュームの幾何が一致しません")
    per_slice = m.data.reshape(m.data.shape[0], -1).any(axis=1)
    nonzero = np.flatnonzero(per_slice)
    if nonzero.size == 0:
        _log.warning("z_trim: mask is empty, keeping a single slice")
        start, stop, empty = 0, 1, True
    else:
        start, stop, empty = int(nonzero[0]), int(nonzero[-1]) + 1, False
    mask = m.replace(data=m.data[start:stop])
    vol = paired.replace(data=paired.data[start:stop]) if paired is not None else None
    return ZTrimResult(mask=mask, volume=vol, empty=empty, z_range=(start, stop))


def preprocess_volume(v: Volume, meta: ScanMeta, cfg: PrepConfig = PrepConfig()) -> Volume:
    """raw スキャン → モデル入力（windowed, 2x2x3 mm, 128 x 128 x Z）"""
    out = window(reorient_hfs(hu_convert(v, meta)), cfg)
    out = crop_or_pad_xy(resample_nn(out, cfg.target_spacing), cfg.crop_xy)
    if cfg.fixed_z is not None:
        out = reshape_z(out, cfg.fixed_z)
    return out


def preprocess_mask(m: MaskVolume, cfg: PrepConfig = PrepConfig()) -> MaskVolume:
    out = crop_or_pad_xy(resample_nn(reorient_hfs(m), cfg.target_spacing), cfg.crop_xy)
    if cfg.fixed_z is not None:
        out = reshape_z(out, cfg.fixed_z)
    return out


def preprocess_pair(v: Volume, m: MaskVolume, meta: ScanMeta, cfg: PrepConfig = PrepConfig()) -> Tuple[Volume, MaskVolume]:
    if not same_geometry(v, m):
        raise GeometryMismatch("preprocess_pair: ボリュームとマスクの幾何が一致しません")
    pv, pm = preprocess_volume(v, meta, cfg), preprocess_mask(m, cfg)
    _log.debug("preprocessed pair dims=%s", pv.dims)
    return pv, pm
