"""CLI から呼ばれるユースケース層。

リポジトリと processing / training / evaluation の関数をつなぐだけで、
計算そのものはここに書かない。
"""

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from voxpipe.domain.config import RunConfig
from voxpipe.domain.errors import DegenerateInput, IoFailure, WrongKind
from voxpipe.domain.models import CaseRecord, FoldSplit, ManifestRow, MaskVolume, Volume
from voxpipe.domain.seeding import derive_seed
from voxpipe.evaluation.gradcam import gradcam3d, peak_slice_window
from voxpipe.evaluation.metrics import MetricsReport, cls_metrics, inter_observer_dsc, seg_metrics
from voxpipe.evaluation.montage import write_montage
from voxpipe.evaluation.stats import FriedmanResult, friedman_test, nemenyi_cd, nemenyi_pairs
from voxpipe.io_importers.meta_json import read_meta
from voxpipe.io_importers.nrrd_io import read_nrrd, write_nrrd
from voxpipe.nets.builders import build_savect, build_segmenter
from voxpipe.nets.network import Network
from voxpipe.processing.phantom import make_cohort, simulate_annotators
from voxpipe.processing.prep import preprocess_pair, preprocess_volume, z_trim
from voxpipe.repositories.base import CaseRepository, CheckpointRepository
from voxpipe.training.folds import holdout_test, stratified_kfold, subset_filter
from voxpipe.training.loops import (
    ClsTrainResult,
    SegSample,
    SegTrainResult,
    compare_epoch_times,
    postprocess,
    predict_probability,
    predict_probs,
    train_classifier,
    train_segmentation,
)
from voxpipe.training.voting import vote_masks

_log = logging.getLogger("voxpipe.services")

MASK_DIR = "masks"
PREDICTIONS_CSV = "predictions.csv"


def write_rows(path: Path, rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(rows)
    except OSError as e:
        _log.exception("report write failed: %s", path)
        raise IoFailure(f"レポートを書き込めません: {path}: {e}")
    return path


def mask_path(out_dir, case_id: str) -> Path:
    return Path(out_dir) / MASK_DIR / f"{case_id}.mask.nrrd"


@dataclass
class CohortPlan:
    rows: List[ManifestRow]
    test_ids: List[str]
    folds: FoldSplit

    @property
    def dev_ids(self) -> List[str]:
        return list(self.folds.assignments)


def plan_cohort(rows: Sequence[ManifestRow], cfg: RunConfig, k: int, fold_key: str) -> CohortPlan:
    """サブセット → ホールドアウト → 層化 k-fold。ホールドアウトは k によらず同じ"""
    rows = subset_filter(rows, cfg.train.subset)
    test_ids, rest = holdout_test(rows, cfg.train.holdout_counts, derive_seed(cfg.seed, "holdout"))
    folds = stratified_kfold(rest, k, derive_seed(cfg.seed, fold_key))
    return CohortPlan(rows=list(rows), test_ids=test_ids, folds=folds)


# =============================================================================
# コホート（生成・前処理）
# =============================================================================
class CohortService:
    def __init__(self, raw_repo: CaseRepository, prep_repo: Optional[CaseRepository] = None):
        self._raw = raw_repo
        self._prep = prep_repo

    def generate(self, cfg: RunConfig, n_total: Optional[int] = None, progress_cb=None) -> List[ManifestRow]:
        n = n_total if n_total is not None else cfg.phantom.n_total
        _, rows = make_cohort(cfg.phantom, n, derive_seed(cfg.seed, "cohort"), repo=self._raw, progress_cb=progress_cb)
        return rows

    def preprocess_case(self, cfg: RunConfig, row: ManifestRow, annotators: bool = False) -> Tuple[ManifestRow, Optional[float]]:
        """1症例を前処理して prep 側に保存する。annotators=True なら3人分の模擬マスクを多数決する"""
        if self._prep is None:
            raise ValueError("前処理の出力先リポジトリがありません")
        volume = self._raw.read_volume(row.case_id)
        mask = self._raw.read_mask(row.case_id)
        meta = self._raw.read_meta(row.case_id)
        agreement = None
        if annotators:
            marks = simulate_annotators(mask, 3, derive_seed(cfg.seed, "annotators", row.case_id))
            agreement = inter_observer_dsc(marks)[0]
            mask = vote_masks(marks)
        pv, pm = preprocess_pair(volume, mask, meta, cfg.prep)
        self._prep.add_case(CaseRecord(row.case_id, pv, pm, meta, row.ratio, row.seed))
        return dataclasses.replace(row, nz=pv.data.shape[0]), agreement

    def finish_preprocess(self, rows: List[ManifestRow]) -> None:
        self._prep.write_manifest(rows)


# =============================================================================
# セグメンテーション
# =============================================================================
@dataclass
class SegRunSummary:
    result: SegTrainResult
    test_report: MetricsReport
    plan: CohortPlan
    report_paths: List[Path]


class SegmentationService:
    def __init__(self, prep_repo: CaseRepository, ckpt_repo: CheckpointRepository):
        self._prep = prep_repo
        self._ckpts = ckpt_repo

    def load_samples(self, rows: Sequence[ManifestRow], ids: Sequence[str]) -> Dict[str, SegSample]:
        group_of = {r.case_id: r.group for r in rows}
        out = {}
        for cid in ids:
            vol = self._prep.read_volume(cid)
            out[cid] = SegSample(case_id=cid, volume=vol, mask=self._prep.read_mask(cid), group=group_of[cid])
        return out

    def load_network(self, cfg: RunConfig, arch: str, checkpoint: str) -> Network:
        net = build_segmenter(arch, 0, cfg.model)
        net.load_state_dict(self._ckpts.load(checkpoint, net.arch))
        return net

    def train(self, cfg: RunConfig, rows: Sequence[ManifestRow], out_dir, arch: Optional[str] = None, progress_cb=None) -> SegRunSummary:
        arch = arch or cfg.train.arch
        out_dir = Path(out_dir)
        plan = plan_cohort(rows, cfg, cfg.train.seg_folds, "seg_folds")
        samples = self.load_samples(plan.rows, plan.dev_ids)
        result = train_segmentation(cfg, samples, plan.folds, out_dir, self._ckpts, arch=arch, progress_cb=progress_cb)
        for cid, m in result.dev_masks.items():
            write_nrrd(m, mask_path(out_dir, cid))

        test_report = MetricsReport("seg")
        if plan.test_ids and result.folds:
            test = self.load_samples(plan.rows, plan.test_ids)
            best = max(result.folds, key=lambda f: f.best_dsc)
            for fr in result.folds:
                net = self.load_network(cfg, arch, fr.checkpoint)
                for cid, s in test.items():
                    pred = postprocess(predict_probs(net, s.volume), cfg.post)
                    test_report.add(f"{cid}@fold{fr.fold}", seg_metrics(pred, s.mask), fr.fold)
                    if fr is best:
                        write_nrrd(pred, mask_path(out_dir, cid))
        paths = [
            write_rows(out_dir / f"seg_{arch}_dev.csv", result.report.to_rows()),
            write_rows(out_dir / f"seg_{arch}_test.csv", test_report.to_rows()),
        ]
        _log.info("segmentation done: arch=%s dev=%s test=%s", arch, result.report.summary(), test_report.summary() if test_report.rows else "-")
        return SegRunSummary(result, test_report, plan, paths)

    def compare_baseline(self, cfg: RunConfig, rows: Sequence[ManifestRow], out_dir, baseline: str = "deepaaa") -> Tuple[SegRunSummary, SegRunSummary, float]:
        """同じ予算で baseline と DeepVox を学習し、1 epoch あたり時間の比を返す"""
        base = self.train(cfg, rows, Path(out_dir) / baseline, arch=baseline)
        ours = self.train(cfg, rows, Path(out_dir) / "deepvox", arch="deepvox")
        ratio = compare_epoch_times(base.result, ours.result)
        _log.info("epoch time ratio %s/deepvox = %.2f", baseline, ratio)
        return base, ours, ratio


# =============================================================================
# 分類
# =============================================================================
@dataclass
class ClsRunSummary:
    result: ClsTrainResult
    test_report: MetricsReport
    plan: CohortPlan
    report_paths: List[Path]


class ClassificationService:
    def __init__(self, prep_repo: CaseRepository, ckpt_repo: CheckpointRepository):
        self._prep = prep_repo
        self._ckpts = ckpt_repo
        self.warnings: List[str] = []

    def load_mask(self, cfg: RunConfig, case_id: str, out_dir) -> Optional[MaskVolume]:
        """分類器の入力（Z トリム済み）。予測マスクが無ければ None"""
        if cfg.train.cls_mask_source == "ground_truth":
            mask = self._prep.read_mask(case_id)
        else:
            path = mask_path(out_dir, case_id)
            if not path.exists():
                self.warnings.append(f"{case_id}: 予測マスクがありません（{path}）")
                return None
            mask = read_nrrd(path)
        return z_trim(mask).mask

    def train(self, cfg: RunConfig, rows: Sequence[ManifestRow], out_dir, progress_cb=None) -> ClsRunSummary:
        out_dir = Path(out_dir)
        self.warnings = []
        plan = plan_cohort(rows, cfg, cfg.train.cls_folds, "cls_folds")
        labels = {r.case_id: r.label for r in plan.rows}
        masks = {cid: m for cid in plan.dev_ids if (m := self.load_mask(cfg, cid, out_dir)) is not None}
        result = train_classifier(cfg, masks, labels, plan.folds, out_dir, self._ckpts, progress_cb=progress_cb)

        test_report = MetricsReport("cls")
        test_masks = {cid: m for cid in plan.test_ids if (m := self.load_mask(cfg, cid, out_dir)) is not None}
        if test_masks:
            ids = sorted(test_masks)
            y = [labels[c] for c in ids]
            for fr in result.folds:
                net = build_savect(0, cfg.model)
                net.load_state_dict(self._ckpts.load(fr.checkpoint, net.arch))
                probs = [predict_probability(net, test_masks[c]) for c in ids]
                test_report.add(f"fold{fr.fold}", cls_metrics(probs, y), fr.fold)
        probs = result.probs
        prob_rows = [["id", "label", "probability"]] + [[c, labels[c], f"{probs[c]:.6f}"] for c in sorted(probs)]
        paths = [
            write_rows(out_dir / "cls_savect_dev.csv", result.report.to_rows()),
            write_rows(out_dir / "cls_savect_test.csv", test_report.to_rows()),
            write_rows(out_dir / "cls_savect_dev_probs.csv", prob_rows),
        ]
        for w in self.warnings:
            _log.warning("classification: %s", w)
        _log.info("classification done: dev=%s warnings=%d", result.report.summary("fold"), len(self.warnings))
        return ClsRunSummary(result, test_report, plan, paths)


# =============================================================================
# 推論
# =============================================================================
@dataclass(frozen=True)
class Prediction:
    case_id: str
    mask_path: Path
    probability: Optional[float] = None

    @property
    def label(self) -> Optional[int]:
        return None if self.probability is None else int(self.probability >= 0.5)


def case_id_from_path(path) -> str:
    name = Path(path).name
    for suffix in (".mask.nrrd", ".nrrd"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


class PredictionService:
    """read → HU → HFS → window → 再サンプリング → クロップ → 生成器 → 二値化 → 小成分除去 → Z トリム"""

    def __init__(self, ckpt_repo: CheckpointRepository):
        self._ckpts = ckpt_repo

    def predict(
        self,
        cfg: RunConfig,
        scan_paths: Sequence,
        out_dir,
        seg_checkpoint: str,
        cls_checkpoint: Optional[str] = None,
        arch: Optional[str] = None,
    ) -> List[Prediction]:
        out_dir = Path(out_dir)
        net = build_segmenter(arch or cfg.train.arch, 0, cfg.model)
        net.load_state_dict(self._ckpts.load(seg_checkpoint, net.arch))
        cls_net = None
        if cls_checkpoint:
            cls_net = build_savect(0, cfg.model)
            cls_net.load_state_dict(self._ckpts.load(cls_checkpoint, cls_net.arch))
        out: List[Prediction] = []
        for path in scan_paths:
            path = Path(path)
            cid = case_id_from_path(path)
            scan = read_nrrd(path)
            if not isinstance(scan, Volume):
                raise WrongKind(f"{path}: スキャンではなくマスクです")
            meta = read_meta(path.parent / f"{cid}.meta.json")
            prob = predict_probs(net, preprocess_volume(scan, meta, cfg.prep))
            trimmed = z_trim(postprocess(prob, cfg.post)).mask
            target = write_nrrd(trimmed, out_dir / f"{cid}.mask.nrrd")
            p = predict_probability(cls_net, trimmed) if cls_net is not None else None
            out.append(Prediction(cid, target, p))
            _log.info("predict: %s foreground=%d probability=%s", cid, trimmed.foreground, "-" if p is None else f"{p:.4f}")
        if cls_net is not None:
            self._append_predictions(out_dir / PREDICTIONS_CSV, out)
        return out

    @staticmethod
    def _append_predictions(path: Path, preds: Sequence[Prediction]) -> None:
        try:
            new = not path.exists()
            with open(path, "a", encoding="utf-8", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                if new:
                    w.writerow(["id", "probability", "label"])
                for p in preds:
                    w.writerow([p.case_id, f"{p.probability:.6f}", p.label])
        except OSError as e:
            _log.exception("predictions write failed: %s", path)
            raise IoFailure(f"predictions.csv を書き込めません: {path}: {e}")


# =============================================================================
# 評価・統計・可視化
# =============================================================================
@dataclass
class StatsSummary:
    methods: List[str]
    friedman: FriedmanResult
    cd: float
    significant: List[Tuple[str, str]]


def read_score_table(path) -> Tuple[List[str], np.ndarray]:
    """1列目が症例 id、残りが手法ごとのスコアの CSV"""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            table = [row for row in csv.reader(f) if row]
    except OSError as e:
        raise IoFailure(f"スコア表を読めません: {path}: {e}")
    if len(table) < 2 or len(table[0]) < 3:
        raise DegenerateInput(f"{path}: ヘッダ + 2行以上、id + 2手法以上が必要です")
    methods = table[0][1:]
    try:
        scores = np.array([[float(v) for v in row[1:]] for row in table[1:]], dtype=np.float64)
    except ValueError as e:
        raise DegenerateInput(f"{path}: 数値でないスコアがあります: {e}")
    if scores.shape[1] != len(methods):
        raise DegenerateInput(f"{path}: 列数がヘッダと一致しません")
    return methods, scores


class EvaluationService:
    def __init__(self, prep_repo: CaseRepository, ckpt_repo: Optional[CheckpointRepository] = None):
        self._prep = prep_repo
        self._ckpts = ckpt_repo

    def evaluate_masks(self, mask_dir, case_ids: Sequence[str]) -> MetricsReport:
        """mask_dir/<id>.mask.nrrd を前処理済みの正解と比べる（無い症例は飛ばす）"""
        report = MetricsReport("seg")
        for cid in case_ids:
            path = Path(mask_dir) / f"{cid}.mask.nrrd"
            if not path.exists():
                continue
            report.add(cid, seg_metrics(read_nrrd(path), self._prep.read_mask(cid)))
        _log.info("evaluate_masks done: n=%d", len(report.rows))
        return report

    def stats(self, score_csv, higher_is_better: bool = True, alpha: float = 0.05) -> StatsSummary:
        methods, scores = read_score_table(score_csv)
        fr = friedman_test(scores, higher_is_better)
        cd = nemenyi_cd(len(methods), scores.shape[0], alpha)
        pairs = [(methods[i], methods[j]) for i, j in nemenyi_pairs(fr.rank_means, cd)]
        return StatsSummary(methods, fr, cd, pairs)

    def gradcam(self, cfg: RunConfig, case_id: str, cls_checkpoint: str, out_path, mask_dir=None, layer: Optional[str] = None):
        """CAM 質量が最大のスライス周辺を、全スライス共通のカラースケールで描く"""
        net = build_savect(0, cfg.model)
        net.load_state_dict(self._ckpts.load(cls_checkpoint, net.arch))
        if mask_dir is not None:
            mask = read_nrrd(Path(mask_dir) / f"{case_id}.mask.nrrd")
        else:
            mask = self._prep.read_mask(case_id)
        trimmed = z_trim(mask, self._prep.read_volume(case_id))
        cam = gradcam3d(net, trimmed.mask, layer)
        rows, cols = cfg.eval.montage_rows, cfg.eval.montage_cols
        start, stop = peak_slice_window(cam, rows * cols)
        path = write_montage(out_path, trimmed.volume, rows, cols, list(range(start, stop)), mask=trimmed.mask, cam=cam)
        return path, cam

    def montage(self, cfg: RunConfig, case_id: str, out_path, with_mask: bool = True) -> Path:
        vol = self._prep.read_volume(case_id)
        mask = self._prep.read_mask(case_id) if with_mask else None
        return write_montage(out_path, vol, cfg.eval.montage_rows, cfg.eval.montage_cols, mask=mask)
