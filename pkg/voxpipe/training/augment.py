"""学習時のオンライン拡張（データセットの件数は増やさない）。

順番は 回転 → 反転 → ガンマ/ゲイン（画像のみ）→ elastic。
画像は線形補間、マスクは最近傍でそろえるので、マスクは常に 0/1 のまま。
"""

import math
from typing import Tuple

import numpy as np
from scipy import ndimage

from voxpipe.domain.config import AugmentConfig
from voxpipe.domain.errors import GeometryMismatch
from voxpipe.domain.models import MaskVolume, Volume, same_geometry
from voxpipe.domain.seeding import rng_for

_FLIP_AXIS = {"z": 0, "y": 1, "x": 2}


def _rotation_matrix(angles_rad) -> np.ndarray:
    """(z, y, x) 軸まわりの回転を合成した 3x3 行列（配列軸の順）"""
    az, ay, ax = angles_rad
    cz, sz = math.cos(az), math.sin(az)
    cy, sy = math.cos(ay), math.sin(ay)
    cx, sx = math.cos(ax), math.sin(ax)
    # z 軸まわり = (y, x) 平面, y 軸まわり = (z, x) 平面, x 軸まわり = (z, y) 平面
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _rotate(img: np.ndarray, mask: np.ndarray, angles_deg, spacing_zyx) -> Tuple[np.ndarray, np.ndarray]:
    rot = _rotation_matrix([math.radians(a) for a in angles_deg])
    s = np.diag(spacing_zyx)
    s_inv = np.diag(1.0 / np.asarray(spacing_zyx))
    # 出力座標 → 入力座標（物理空間で逆回転してから index に戻す）
    matrix = s_inv @ rot.T @ s
    center = (np.asarray(img.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ center
    img_r = ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="nearest")
    mask_r = ndimage.affine_transform(mask, matrix, offset=offset, order=0, mode="constant", cval=0)
    return img_r, mask_r


def _elastic(img: np.ndarray, mask: np.ndarray, sigma: float, alpha: float, rng) -> Tuple[np.ndarray, np.ndarray]:
    """ガウス平滑した変位場（標準偏差 alpha ボクセル）で座標をずらす"""
    coords = np.indices(img.shape, dtype=np.float64)
    for axis in range(3):
        field = ndimage.gaussian_filter(rng.normal(0.0, 1.0, img.shape), sigma)
        std = float(field.std())
        if std > 0:
            coords[axis] += field / std * alpha
    img_e = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    mask_e = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0)
    return img_e, mask_e


def augment_sample(vol: Volume, mask: MaskVolume, cfg: AugmentConfig, seed: int) -> Tuple[Volume, MaskVolume]:
    if not same_geometry(vol, mask):
        raise GeometryMismatch("augment_sample: ボリュームとマスクの幾何が一致しません")
    rng = rng_for(seed, "augment")
    img = np.asarray(vol.data, dtype=np.float64)
    msk = np.asarray(mask.data, dtype=np.uint8)
    changed = False

    if cfg.rotation and cfg.rot_deg_max > 0:
        angles = rng.uniform(-cfg.rot_deg_max, cfg.rot_deg_max, size=3)
        if np.any(angles != 0):
            sx, sy, sz = vol.spacing
            img, msk = _rotate(img, msk, angles, (sz, sy, sx))
            changed = True

    if cfg.flip:
        for name in cfg.flip_axes:
            if rng.random() < cfg.flip_prob:
                axis = _FLIP_AXIS[name]
                img, msk = np.flip(img, axis=axis), np.flip(msk, axis=axis)
                changed = True

    if cfg.intensity:
        gamma = rng.uniform(*cfg.gamma_range) if cfg.gamma_range[1] > cfg.gamma_range[0] else cfg.gamma_range[0]
        gain = rng.uniform(*cfg.gain_range) if cfg.gain_range[1] > cfg.gain_range[0] else cfg.gain_range[0]
        if gamma != 1.0 or gain != 1.0:
            img = np.clip(gain * np.power(np.clip(img, 0.0, 1.0), gamma), 0.0, 1.0)
            changed = True

    if cfg.elastic and cfg.elastic_alpha > 0:
        img, msk = _elastic(img, msk, cfg.elastic_sigma, cfg.elastic_alpha, rng)
        changed = True

    if not changed:
        return vol, mask
    img = np.clip(img, 0.0, 1.0).astype(vol.data.dtype)
    return vol.replace(data=img), mask.replace(data=(msk > 0).astype(np.uint8))
