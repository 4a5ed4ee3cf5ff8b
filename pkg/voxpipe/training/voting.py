from typing import Sequence

import numpy as np

from voxpipe.domain.errors import GeometryMismatch
from voxpipe.domain.models import MaskVolume, same_geometry


def vote_masks(masks: Sequence[MaskVolume]) -> MaskVolume:
    """3人のアノテーションの多数決: 2人以上が 1 のボクセルだけ残す"""
    if len(masks) != 3:
        raise ValueError(f"vote_masks は3枚のマスクが必要です（{len(masks)} 枚）")
    ref = masks[0]
    for m in masks[1:]:
        if not same_geometry(ref, m):
            raise GeometryMismatch("vote_masks: マスクの幾何が一致しません")
    votes = sum(m.data.astype(np.uint8) for m in masks)
    return ref.replace(data=(votes >= 2).astype(np.uint8))
