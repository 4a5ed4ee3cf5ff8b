"""予測の後処理: 二値化、連結成分ラベリング、小成分の除去"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from voxpipe.domain.models import MaskVolume, Volume

_log = logging.getLogger("voxpipe.post")

# 近傍の種類 → generate_binary_structure の connectivity
_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True, eq=False)
class ComponentLabels:
    labels: np.ndarray  # 0 = 背景, 1..n = 成分
    sizes: np.ndarray  # sizes[i] = ラベル i+1 のボクセル数

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def binarize(p: Volume, t: float = 0.5) -> MaskVolume:
    """確率 >= t を 1 とする"""
    data = (np.asarray(p.data) >= t).astype(np.uint8)
    return MaskVolume(data=data, spacing=p.spacing, orientation=p.orientation)


def connected_components(m: MaskVolume, connectivity: int = 26) -> ComponentLabels:
    if connectivity not in _RANK:
        raise ValueError(f"connectivity は 6 / 18 / 26: {connectivity}")
    structure = ndimage.generate_binary_structure(3, _RANK[connectivity])
    labels, n = ndimage.label(m.data, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return ComponentLabels(labels=labels.astype(np.int32), sizes=sizes)


def remove_small(m: MaskVolume, threshold_frac: float = 0.05, connectivity: int = 26) -> MaskVolume:
    """総マスク体積（除去前）の threshold_frac 未満の成分を落とす"""
    cc = connected_components(m, connectivity)
    if cc.count <= 1:
        return m
    total = int(cc.sizes.sum())
    keep = np.concatenate([[False], cc.sizes >= threshold_frac * total])
    removed = int((~keep[1:]).sum())
    if removed:
        _log.info("remove_small: removed %d of %d components", removed, cc.count)
    return m.replace(data=keep[cc.labels].astype(np.uint8))
