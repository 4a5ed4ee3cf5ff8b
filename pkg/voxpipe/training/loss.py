"""学習の目的関数。すべて Tensor を返し、backward で勾配が流れる。

p は確率（sigmoid 出力）、y は 0/1 の正解（numpy 配列でも Tensor でもよい）。
log の引数は 1e-12 で下から抑える。
"""

import numpy as np

from voxpipe.domain.config import HybridFocalParams
from voxpipe.domain.errors import ShapeMismatch
from voxpipe.engine.tensor import Tensor

LOG_FLOOR = 1e-12


def _pair(p: Tensor, y):
    if not isinstance(p, Tensor):
        p = Tensor(p)
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=p.dtype))
    if p.shape != y.shape:
        raise ShapeMismatch(f"予測 {p.shape} と正解 {y.shape} の形状が不一致")
    return p, y


def _safe_log(t: Tensor) -> Tensor:
    return t.clip(LOG_FLOOR, None).log()


def dice_loss(p, y, smooth: float = 1e-6) -> Tensor:
    """1 - (2Σpy + s) / (Σp + Σy + s)"""
    p, y = _pair(p, y)
    inter = (p * y).sum()
    return 1.0 - (inter * 2.0 + smooth) / (p.sum() + y.sum() + smooth)


def dsc_soft(p, y, smooth: float = 1e-6) -> Tensor:
    return 1.0 - dice_loss(p, y, smooth)


def focal_loss(p, y, delta: float, gamma: float) -> Tensor:
    """ボクセル平均の focal 損失。指数は γf = 2·gamma"""
    p, y = _pair(p, y)
    gf = 2.0 * gamma
    pos = y * ((1.0 - p) ** gf) * _safe_log(p) * delta
    neg = (1.0 - y) * (p**gf) * _safe_log(1.0 - p) * (1.0 - delta)
    return -(pos + neg).mean()


def tversky_index(p, y, delta: float, smooth: float = 1e-6) -> Tensor:
    p, y = _pair(p, y)
    tp = (p * y).sum()
    fn = ((1.0 - p) * y).sum()
    fp = (p * (1.0 - y)).sum()
    return (tp + smooth) / (tp + fn * delta + fp * (1.0 - delta) + smooth)


def focal_tversky_loss(p, y, delta: float, gamma: float, smooth: float = 1e-6) -> Tensor:
    """(1 - TI)^gamma。底は 1e-12 で抑える（gamma < 1 で 0 の勾配が発散しないように）"""
    ti = tversky_index(p, y, delta, smooth)
    return (1.0 - ti).clip(LOG_FLOOR, None) ** gamma


def hybrid_focal(p, y, params: HybridFocalParams = HybridFocalParams()) -> Tensor:
    """lam · focal + (1 - lam) · focal-Tversky"""
    f = focal_loss(p, y, params.delta, params.gamma_focal)
    ft = focal_tversky_loss(p, y, params.delta, params.gamma, params.smooth)
    return f * params.lam + ft * (1.0 - params.lam)


def bce(p, y) -> Tensor:
    p, y = _pair(p, y)
    return -(y * _safe_log(p) + (1.0 - y) * _safe_log(1.0 - p)).mean()


def d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """LSGAN の discriminator 損失: real → 1, fake → 0 の二乗誤差（パッチ平均）"""
    if d_real.shape != d_fake.shape:
        raise ShapeMismatch(f"パッチマップの形状が不一致: {d_real.shape} vs {d_fake.shape}")
    return ((d_real - 1.0) ** 2).mean() + (d_fake**2).mean()


def g_adv(d_fake: Tensor) -> Tensor:
    return ((d_fake - 1.0) ** 2).mean()


def g_total(d_fake: Tensor, p, y, params: HybridFocalParams = HybridFocalParams(), weight: float = 5.0) -> Tensor:
    """generator 損失 = 敵対項 + weight · hybrid focal"""
    return g_adv(d_fake) + hybrid_focal(p, y, params) * weight


def baseline_loss(kind: str, p, y, params: HybridFocalParams = HybridFocalParams()) -> Tensor:
    """DeepAAA / 3D U-Net の教師あり損失"""
    if kind == "hybrid":
        return hybrid_focal(p, y, params)
    if kind == "dice":
        return dice_loss(p, y, params.smooth)
    raise ValueError(f"未知の損失: {kind}")
