"""3D Grad-CAM（SAVE-CT の sigmoid 前スコアに対する勾配で重み付け）"""

import logging
from typing import Optional, Tuple

import numpy as np

from voxpipe.domain.models import MaskVolume, Volume, VolumeKind
from voxpipe.nets.builders import SaveCT
from voxpipe.processing.prep import nearest_indices

_log = logging.getLogger("voxpipe.eval.gradcam")


def _upsample_nearest(a: np.ndarray, shape: Tuple[int, int, int]) -> np.ndarray:
    idx = [nearest_indices(n, m, n / m) for n, m in zip(a.shape, shape)]
    return a[np.ix_(*idx)]


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if not hi > lo:
        return np.zeros_like(a, dtype=np.float32)
    return ((a - lo) / (hi - lo)).astype(np.float32)


def cam_from_activation(activation: np.ndarray, grad: np.ndarray, out_shape: Tuple[int, int, int]) -> np.ndarray:
    """(C, d, h, w) の活性と勾配 → 入力解像度の正規化 CAM"""
    alpha = grad.mean(axis=(1, 2, 3))
    raw = np.maximum(np.tensordot(alpha, activation, axes=(0, 0)), 0.0)
    return _minmax(_upsample_nearest(raw, out_shape))


def gradcam3d(net: SaveCT, mask: MaskVolume, layer: Optional[str] = None) -> Volume:
    """mask を入力にしたときの CAM を mask と同じ幾何の Volume（値は [0,1]）で返す"""
    layer = layer or net.last_conv()
    x = np.asarray(mask.data, dtype=np.float32)[None, None]
    with net.capture(layer):
        score = net.logits(x)
        a = net.captured
        score.sum().backward()
    grad = a.grad if a.grad is not None else np.zeros_like(a.data)
    cam = cam_from_activation(a.data[0].astype(np.float64), grad[0].astype(np.float64), mask.data.shape)
    net.zero_grad()
    _log.debug("gradcam3d: layer=%s act=%s score=%.4f", layer, a.shape, float(score.data.reshape(-1)[0]))
    return Volume(data=cam, spacing=mask.spacing, orientation=mask.orientation, kind=VolumeKind.WINDOWED)


def peak_slice_window(cam: Volume, n_slices: int) -> Tuple[int, int]:
    """CAM の質量が最大のスライスを中心に、連続 n_slices 枚の [start, stop)"""
    nz = cam.data.shape[0]
    n = max(1, min(n_slices, nz))
    peak = int(np.argmax(cam.data.reshape(nz, -1).sum(axis=1)))
    start = min(max(peak - n // 2, 0), nz - n)
    return start, start + n
