"""ノンパラメトリック検定: Friedman 検定と Nemenyi 事後検定（α = 0.05）"""

import itertools
import logging
import math
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from voxpipe.domain.errors import DegenerateInput, KOutOfTableRange

_log = logging.getLogger("voxpipe.eval.stats")

# α = 0.05 の studentized range q 値を √2 で割ったもの（k = 2..10）
Q_ALPHA_005 = {2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.949, 8: 3.031, 9: 3.102, 10: 3.164}


class FriedmanResult(NamedTuple):
    chi2: float
    df: int
    p: float
    rank_means: Tuple[float, ...]


def _scores_matrix(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 2:
        raise DegenerateInput(f"scores は (N 症例, k 手法) の2次元: shape={arr.shape}")
    n, k = arr.shape
    if k < 2:
        raise DegenerateInput(f"手法は2つ以上必要です: k={k}")
    if n < 2:
        raise DegenerateInput(f"症例は2つ以上必要です: N={n}")
    if not np.isfinite(arr).all():
        raise DegenerateInput("scores に有限でない値があります")
    return arr


def case_ranks(scores, higher_is_better: bool = True) -> np.ndarray:
    """症例ごとの順位（1 = 最良、同点は平均順位）"""
    arr = _scores_matrix(scores)
    return sps.rankdata(-arr if higher_is_better else arr, axis=1, method="average")


def friedman_test(scores, higher_is_better: bool = True) -> FriedmanResult:
    ranks = case_ranks(scores, higher_is_better)
    n, k = ranks.shape
    rsum = ranks.sum(axis=0)
    chi2 = 12.0 / (n * k * (k + 1)) * float(np.sum(rsum**2)) - 3.0 * n * (k + 1)
    # 浮動小数の丸めで -0 付近になる全同点のケース
    chi2 = max(chi2, 0.0)
    df = k - 1
    p = float(sps.chi2.sf(chi2, df))
    _log.info("friedman: N=%d k=%d chi2=%.4f p=%.4g", n, k, chi2, p)
    return FriedmanResult(chi2, df, p, tuple(float(r) for r in rsum / n))


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    """CD = q_α(k)·sqrt(k(k+1) / 6N)"""
    if alpha != 0.05:
        raise KOutOfTableRange(f"q 表は α=0.05 のみ: alpha={alpha}")
    if k not in Q_ALPHA_005:
        raise KOutOfTableRange(f"k は 2..10: k={k}")
    if n < 1:
        raise DegenerateInput(f"N は1以上: N={n}")
    return Q_ALPHA_005[k] * math.sqrt(k * (k + 1) / (6.0 * n))


def nemenyi_pairs(rank_means: Sequence[float], cd: float) -> List[Tuple[int, int]]:
    """|順位平均の差| > CD のペア（0 始まりの添字、i < j）"""
    means = list(rank_means)
    if len(means) < 2:
        raise DegenerateInput("順位平均は2つ以上必要です")
    return [(i, j) for i, j in itertools.combinations(range(len(means)), 2) if abs(means[i] - means[j]) > cd]
