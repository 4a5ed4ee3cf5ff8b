"""層化 k-fold、ホールドアウト、クラスバランス用のダウンサンプリング"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

from voxpipe.domain.errors import EmptyStratum, InsufficientGroup, MissingClass
from voxpipe.domain.models import GROUP_ORDER, FoldSplit, Group, ManifestRow
from voxpipe.domain.seeding import rng_for
from voxpipe.processing.phantom import group_counts

_log = logging.getLogger("voxpipe.folds")

# 4 群 + 少数の ANNC からなる 60 件のホールドアウト（LD, SD, CTA, AN, ANNC）
REFERENCE_HOLDOUT = (15, 15, 15, 12, 3)
REFERENCE_COHORT = 587


def _by_group(manifest: Sequence[ManifestRow]) -> Dict[Group, List[str]]:
    out: Dict[Group, List[str]] = {g: [] for g in GROUP_ORDER}
    for row in manifest:
        out[row.group].append(row.case_id)
    return out


def stratified_kfold(manifest: Sequence[ManifestRow], k: int, seed: int) -> FoldSplit:
    """群ごとにシャッフルしてから round-robin で fold に配る。

    開始 fold は群をまたいで引き継ぐので、各 fold の総数も ±1 に収まる。
    """
    if k < 2:
        raise ValueError(f"k は 2 以上: {k}")
    groups = {g: ids for g, ids in _by_group(manifest).items() if ids}
    if not groups:
        raise EmptyStratum("症例がありません")
    split = FoldSplit(k=k)
    offset = 0
    for g in GROUP_ORDER:
        ids = groups.get(g)
        if not ids:
            continue
        order = rng_for(seed, "kfold", g.value).permutation(len(ids))
        for n, idx in enumerate(order):
            cid = ids[int(idx)]
            split.assignments[cid] = (offset + n) % k
            split.stratum[cid] = g
        offset = (offset + len(ids)) % k
    _log.info("stratified_kfold: k=%d n=%d strata=%d", k, len(split.assignments), len(groups))
    return split


def default_holdout_counts(manifest: Sequence[ManifestRow]) -> Tuple[int, ...]:
    """基準のホールドアウト比率（60 / 587）をコホートサイズに合わせて縮める。

    manifest に居ない群（サブセット学習時）の割り当ては 0。
    """
    present = {row.group for row in manifest}
    weights = tuple(w if g in present else 0 for g, w in zip(GROUP_ORDER, REFERENCE_HOLDOUT))
    if not any(weights):
        return (0,) * len(GROUP_ORDER)
    n_test = round(len(manifest) * sum(REFERENCE_HOLDOUT) / REFERENCE_COHORT)
    return group_counts(n_test, weights)


def holdout_test(
    manifest: Sequence[ManifestRow], counts: Optional[Sequence[int]], seed: int
) -> Tuple[List[str], List[ManifestRow]]:
    """群ごとに counts 件を非復元抽出してテスト集合にする。戻り値は (test ids, 残り)"""
    if counts is None:
        counts = default_holdout_counts(manifest)
    if len(counts) != len(GROUP_ORDER):
        raise ValueError(f"counts は {len(GROUP_ORDER)} 群ぶん必要: {counts}")
    groups = _by_group(manifest)
    test: List[str] = []
    for g, want in zip(GROUP_ORDER, counts):
        ids = groups[g]
        if want > len(ids):
            raise InsufficientGroup(f"{g.value}: {want} 件要求に対して {len(ids)} 件しかありません")
        if want == 0:
            continue
        picked = rng_for(seed, "holdout", g.value).choice(len(ids), size=int(want), replace=False)
        test.extend(ids[int(i)] for i in sorted(picked))
    chosen = set(test)
    rest = [row for row in manifest if row.case_id not in chosen]
    _log.info("holdout_test: test=%d rest=%d", len(test), len(rest))
    return test, rest


def balance_downsample(records: Sequence, seed: int, label_of=lambda r: r.label) -> List:
    """クラス 0 をクラス 1 の件数までランダムに間引く（クラス 1 はそのまま）"""
    zeros = [r for r in records if label_of(r) == 0]
    ones = [r for r in records if label_of(r) == 1]
    if not zeros or not ones:
        raise MissingClass(f"両クラスが必要です: class0={len(zeros)} class1={len(ones)}")
    if len(zeros) <= len(ones):
        return list(records)
    keep_idx = set(int(i) for i in rng_for(seed, "balance").choice(len(zeros), size=len(ones), replace=False))
    kept_zeros = {id(zeros[i]) for i in keep_idx}
    return [r for r in records if label_of(r) == 1 or id(r) in kept_zeros]


def subset_filter(manifest: Sequence[ManifestRow], subset: str) -> List[ManifestRow]:
    """造影あり（CTA, AN）/ 造影なし（LD, SD, ANNC）/ 全部"""
    if subset == "all":
        return list(manifest)
    if subset == "contrast":
        return [r for r in manifest if r.group.contrast]
    if subset == "non_contrast":
        return [r for r in manifest if not r.group.contrast]
    raise ValueError(f"未知の subset: {subset}")
