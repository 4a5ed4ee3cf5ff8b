"""評価指標: セグメンテーション（DSC / precision / sensitivity）と分類（混同行列系）"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from voxpipe.domain.errors import GeometryMismatch
from voxpipe.domain.models import MaskVolume, same_geometry

_log = logging.getLogger("voxpipe.eval")

SEG_METRICS = ("dsc", "precision", "sensitivity")
CLS_METRICS = ("accuracy", "precision", "sensitivity", "specificity", "f1")


class SegScores(NamedTuple):
    dsc: float
    precision: float
    sensitivity: float


class ClsScores(NamedTuple):
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    undefined: Tuple[str, ...] = ()  # 分母 0 で 0 を入れた指標


def _ratio(num: float, den: float) -> Tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def seg_metrics(pred: MaskVolume, gt: MaskVolume) -> SegScores:
    """両方空なら (1,1,1)。それ以外で分母が 0 の指標は 0"""
    if not same_geometry(pred, gt):
        raise GeometryMismatch("seg_metrics: 予測と正解の幾何が一致しません")
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp + fn == 0:
        return SegScores(1.0, 1.0, 1.0)
    dsc, _ = _ratio(2 * tp, 2 * tp + fp + fn)
    precision, _ = _ratio(tp, tp + fp)
    sensitivity, _ = _ratio(tp, tp + fn)
    return SegScores(dsc, precision, sensitivity)


def cls_metrics(preds: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ClsScores:
    probs = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if probs.size == 0 or probs.shape != y.shape:
        raise ValueError(f"preds と labels は同じ長さの非空配列: {probs.shape} vs {y.shape}")
    yhat = probs >= threshold
    pos = y == 1
    tp = int(np.count_nonzero(yhat & pos))
    tn = int(np.count_nonzero(~yhat & ~pos))
    fp = int(np.count_nonzero(yhat & ~pos))
    fn = int(np.count_nonzero(~yhat & pos))
    flags = []
    accuracy = (tp + tn) / y.size
    precision, bad = _ratio(tp, tp + fp)
    if bad:
        flags.append("precision")
    sensitivity, bad = _ratio(tp, tp + fn)
    if bad:
        flags.append("sensitivity")
    specificity, bad = _ratio(tn, tn + fp)
    if bad:
        flags.append("specificity")
    f1, bad = _ratio(2 * precision * sensitivity, precision + sensitivity)
    if bad:
        flags.append("f1")
    if flags:
        _log.warning("cls_metrics: undefined ratios reported as 0: %s", ",".join(flags))
    return ClsScores(accuracy, precision, sensitivity, specificity, f1, tuple(flags))


def mean_std(values: Iterable[float]) -> Tuple[float, float]:
    """平均と標準偏差（n > 1 では不偏、n = 1 では 0）"""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def format_mean_std(values: Iterable[float], digits: int = 3) -> str:
    """[0.9, 0.95, ...] → "0.932 ± 0.028" """
    mean, std = mean_std(values)
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def inter_observer_dsc(masks: Sequence[MaskVolume]) -> Tuple[float, float]:
    """アノテーター間のペアごとの DSC の平均と標準偏差"""
    if len(masks) < 2:
        raise ValueError("inter_observer_dsc には2枚以上のマスクが必要です")
    scores = [seg_metrics(a, b).dsc for a, b in itertools.combinations(masks, 2)]
    return mean_std(scores)


@dataclass
class MetricsReport:
    """症例ごと（seg）または fold ごと（cls）の指標と、その平均 ± 標準偏差"""

    kind: str  # "seg" / "cls"
    rows: Dict[str, Dict[str, float]] = field(default_factory=dict)  # id → 指標
    fold_of: Dict[str, int] = field(default_factory=dict)

    @property
    def metric_names(self) -> Tuple[str, ...]:
        return SEG_METRICS if self.kind == "seg" else CLS_METRICS

    def add(self, key: str, scores, fold: Optional[int] = None) -> None:
        self.rows[key] = {m: float(getattr(scores, m)) for m in self.metric_names}
        if fold is not None:
            self.fold_of[key] = fold

    def aggregate(self, mode: str = "case") -> Dict[str, Tuple[float, float]]:
        """mode="case": 全行の平均。mode="fold": fold 平均の平均"""
        if mode == "case" or not self.fold_of:
            return {m: mean_std(r[m] for r in self.rows.values()) for m in self.metric_names}
        if mode != "fold":
            raise ValueError(f"aggregate は case / fold: {mode}")
        folds = sorted(set(self.fold_of.values()))
        out = {}
        for m in self.metric_names:
            per_fold = [np.mean([r[m] for k, r in self.rows.items() if self.fold_of.get(k) == f]) for f in folds]
            out[m] = mean_std(per_fold)
        return out

    def summary(self, mode: str = "case") -> Dict[str, str]:
        agg = self.aggregate(mode)
        return {m: f"{mean:.3f} ± {std:.3f}" for m, (mean, std) in agg.items()}

    def to_rows(self) -> List[List[str]]:
        header = ["id", "fold"] + list(self.metric_names)
        body = [
            [key, str(self.fold_of.get(key, ""))] + [f"{r[m]:.6f}" for m in self.metric_names] for key, r in sorted(self.rows.items())
        ]
        return [header] + body
