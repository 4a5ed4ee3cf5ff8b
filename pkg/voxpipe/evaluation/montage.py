"""軸位断スライスのモンタージュ画像（バイナリ PGM / PPM）。

オーバーレイなし → グレースケール P5、マスク輪郭か CAM ヒートマップがあれば P6。
同じ入力からは同じバイト列になる。
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from voxpipe.domain.errors import GeometryMismatch, IoFailure, SliceIndexError
from voxpipe.domain.models import MaskVolume, Volume, VolumeKind, same_geometry

_log = logging.getLogger("voxpipe.eval.montage")

CONTOUR_RGB = (255, 0, 0)
CAM_OPACITY = 0.5


def _unit_range(v: Volume) -> np.ndarray:
    data = v.data.astype(np.float64)
    if v.kind is VolumeKind.WINDOWED:
        return data
    lo, hi = float(data.min()), float(data.max())
    return (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)


def heat_rgb(c: np.ndarray) -> np.ndarray:
    """[0,1] → jet 風の RGB（[0,1] の float, 末尾軸が色）"""
    c = np.clip(c, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4.0 * c - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * c - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * c - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def _contour(mask2d: np.ndarray) -> np.ndarray:
    m = mask2d.astype(bool)
    return m & ~ndimage.binary_erosion(m)


def default_slices(nz: int, n: int) -> List[int]:
    """等間隔に n 枚（nz が足りなければ全スライス）"""
    if n >= nz:
        return list(range(nz))
    return [int(round(i)) for i in np.linspace(0, nz - 1, n)]


def render_montage(
    volume: Volume,
    rows: int = 4,
    cols: int = 8,
    slices: Optional[Sequence[int]] = None,
    mask: Optional[MaskVolume] = None,
    cam: Optional[Volume] = None,
) -> Image.Image:
    if rows < 1 or cols < 1:
        raise ValueError(f"rows / cols は1以上: {rows}x{cols}")
    nz, ny, nx = volume.data.shape
    for other in (mask, cam):
        if other is not None and not same_geometry(volume, other):
            raise GeometryMismatch("montage: オーバーレイの幾何がボリュームと一致しません")
    idx = list(slices) if slices is not None else default_slices(nz, rows * cols)
    for z in idx:
        if not 0 <= int(z) < nz:
            raise SliceIndexError(f"スライス番号が範囲外: {z}（0..{nz - 1}）")
    if len(idx) > rows * cols:
        raise SliceIndexError(f"スライス数 {len(idx)} がマス目 {rows}x{cols} を超えています")

    color = mask is not None or cam is not None
    gray = _unit_range(volume)
    canvas = np.zeros((rows * ny, cols * nx, 3 if color else 1), dtype=np.float64)
    for n, z in enumerate(idx):
        r, c = divmod(n, cols)
        tile = np.repeat(gray[z][..., None], canvas.shape[-1], axis=-1)
        if cam is not None:
            weight = CAM_OPACITY * cam.data[z].astype(np.float64)[..., None]
            tile = (1.0 - weight) * tile + weight * heat_rgb(cam.data[z].astype(np.float64))
        if mask is not None:
            tile[_contour(mask.data[z])] = np.array(CONTOUR_RGB) / 255.0
        canvas[r * ny : (r + 1) * ny, c * nx : (c + 1) * nx] = tile
    pixels = np.rint(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
    if color:
        return Image.fromarray(pixels)
    return Image.fromarray(np.ascontiguousarray(pixels[..., 0]))


def write_montage(
    path,
    volume: Volume,
    rows: int = 4,
    cols: int = 8,
    slices: Optional[Sequence[int]] = None,
    mask: Optional[MaskVolume] = None,
    cam: Optional[Volume] = None,
) -> Path:
    """モンタージュを書き出す。拡張子は PGM なら .pgm、カラーなら .ppm に直す"""
    img = render_montage(volume, rows, cols, slices, mask, cam)
    path = Path(path).with_suffix(".ppm" if img.mode == "RGB" else ".pgm")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format="PPM")
    except OSError as e:
        _log.exception("montage write failed: %s", path)
        raise IoFailure(f"モンタージュを書き込めません: {path}: {e}")
    _log.info("montage written: %s (%dx%d, %s)", path, img.width, img.height, img.mode)
    return path
