"""学習ループ: GAN の1ステップ、セグメンテーション / 分類の fold 学習。

バッチサイズは 1。各 epoch で学習 fold をシャッフルし、症例ごとに1回だけ
オンライン拡張をかける（1 epoch のサンプル数 = 学習 fold の症例数）。
epoch ごとの指標 CSV は決定的に書き、壁時計時間は別の timing CSV に分ける。
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from voxpipe.domain.config import HybridFocalParams, PostConfig, RunConfig
from voxpipe.domain.errors import IoFailure
from voxpipe.domain.models import FoldSplit, Group, MaskVolume, Volume, VolumeKind
from voxpipe.domain.seeding import derive_seed, rng_for
from voxpipe.engine.tensor import Tensor, no_grad
from voxpipe.evaluation.metrics import ClsScores, MetricsReport, cls_metrics, mean_std, seg_metrics
from voxpipe.nets.builders import DeepVoxDiscriminator, build_deepvox_discriminator, build_savect, build_segmenter
from voxpipe.nets.network import Network
from voxpipe.processing.post import binarize, remove_small
from voxpipe.processing.prep import reshape_z
from voxpipe.repositories.base import CheckpointRepository
from voxpipe.training.augment import augment_sample
from voxpipe.training.folds import balance_downsample
from voxpipe.training.loss import baseline_loss, bce, d_loss, g_total
from voxpipe.training.optim import Adam, CosineRestartSchedule, PlateauState, cosine_restart_lr, plateau_update

_log = logging.getLogger("voxpipe.train")

SEG_COLUMNS = ("epoch", "lr", "train_loss", "dev_dsc", "dev_precision", "dev_sensitivity")
CLS_COLUMNS = ("epoch", "lr", "train_loss", "accuracy", "precision", "sensitivity", "specificity", "f1")


@dataclass(frozen=True, eq=False)
class SegSample:
    """前処理済み（windowed, 128 x 128 x Z）のスキャンと正解マスク"""

    case_id: str
    volume: Volume
    mask: MaskVolume
    group: Group


def as_input(data: np.ndarray) -> Tensor:
    """(Z, Y, X) → (1, 1, Z, Y, X) の float32 Tensor"""
    return Tensor(np.asarray(data, dtype=np.float32)[None, None])


class _CsvLog:
    """行ごとに flush する CSV 書き出し（浮動小数は固定桁）"""

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(columns)
        except OSError as e:
            _log.exception("csv open failed: %s", self.path)
            raise IoFailure(f"CSV を作れません: {self.path}: {e}")

    def row(self, values: Sequence) -> None:
        cells = [v if isinstance(v, (int, str)) else f"{float(v):.6f}" for v in values]
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(cells)


# =============================================================================
# 1ステップ
# =============================================================================
def gan_train_step(
    G: Network,
    D: DeepVoxDiscriminator,
    opt_G: Adam,
    opt_D: Adam,
    scan: np.ndarray,
    gt_mask: np.ndarray,
    params: HybridFocalParams = HybridFocalParams(),
    adv_weight: float = 5.0,
) -> Tuple[float, float]:
    """D を (real, detach した fake) で1回、続けて G を g_total で1回更新する"""
    x = as_input(scan)
    y = as_input(gt_mask)
    fake = Tensor(G.infer(x))

    opt_D.zero_grad()
    ld = d_loss(D.score(x, y), D.score(x, fake))
    ld.backward()
    opt_D.step()

    opt_G.zero_grad()
    p = G(x)
    lg = g_total(D.score(x, p), p, y, params, adv_weight)
    lg.backward()
    opt_G.step()
    # G の backward で D 側に溜まった勾配は捨てる
    D.zero_grad()
    return ld.item(), lg.item()


def supervised_step(net: Network, opt: Adam, scan: np.ndarray, gt_mask: np.ndarray, kind: str, params: HybridFocalParams) -> float:
    opt.zero_grad()
    x, y = as_input(scan), as_input(gt_mask)
    loss = baseline_loss(kind, net(x), y, params)
    loss.backward()
    opt.step()
    return loss.item()


# =============================================================================
# 推論ヘルパ
# =============================================================================
def predict_probs(net: Network, vol: Volume) -> Volume:
    """確率マップを vol と同じ幾何で返す（固定 Z のモデルは Z を変形して戻す）"""
    src = vol
    if net.z_policy == "fixed" and vol.data.shape[0] != net.fixed_z:
        src = reshape_z(vol, net.fixed_z)
    probs = net.infer(src.data[None, None])[0, 0]
    out = Volume(data=np.clip(probs, 0.0, 1.0).astype(np.float32), spacing=src.spacing, orientation=src.orientation, kind=VolumeKind.WINDOWED)
    if out.data.shape[0] != vol.data.shape[0]:
        out = reshape_z(out, vol.data.shape[0])
    return out.replace(spacing=vol.spacing)


def postprocess(prob: Volume, cfg: PostConfig = PostConfig()) -> MaskVolume:
    return remove_small(binarize(prob, cfg.threshold), cfg.removal_frac, cfg.connectivity)


def _fit_z(net: Network, vol: Volume, mask: MaskVolume) -> Tuple[Volume, MaskVolume]:
    if net.z_policy == "fixed" and vol.data.shape[0] != net.fixed_z:
        return reshape_z(vol, net.fixed_z), reshape_z(mask, net.fixed_z)
    return vol, mask


# =============================================================================
# セグメンテーション
# =============================================================================
@dataclass
class SegFoldResult:
    fold: int
    checkpoint: str
    best_epoch: int
    best_dsc: float
    epoch_seconds: List[float] = field(default_factory=list)


@dataclass
class SegTrainResult:
    arch: str
    folds: List[SegFoldResult]
    report: MetricsReport
    dev_masks: Dict[str, MaskVolume]

    @property
    def mean_epoch_seconds(self) -> float:
        secs = [s for f in self.folds for s in f.epoch_seconds]
        return float(np.mean(secs)) if secs else float("nan")


def seg_checkpoint_name(arch: str, fold: int) -> str:
    return f"seg_{arch}_fold{fold}"


def cls_checkpoint_name(fold: int) -> str:
    return f"cls_savect_fold{fold}"


def _evaluate_seg(net: Network, samples: Sequence[SegSample], cfg: RunConfig, loss_kind: str):
    """dev の症例ごとの指標・後処理済みマスク・平均損失"""
    scores, masks, losses = {}, {}, []
    for s in samples:
        prob = predict_probs(net, s.volume)
        with no_grad():
            losses.append(baseline_loss(loss_kind, Tensor(prob.data), s.mask.data, cfg.loss.hybrid).item())
        pred = postprocess(prob, cfg.post)
        masks[s.case_id] = pred
        scores[s.case_id] = seg_metrics(pred, s.mask)
    return scores, masks, (float(np.mean(losses)) if losses else float("nan"))


def train_segmentation(
    cfg: RunConfig,
    samples: Dict[str, SegSample],
    folds: FoldSplit,
    out_dir,
    ckpts: CheckpointRepository,
    arch: Optional[str] = None,
    fold_ids: Optional[Sequence[int]] = None,
    progress_cb=None,
) -> SegTrainResult:
    """fold ごとに学習し、dev DSC が最良の epoch のパラメータを保存する"""
    arch = arch or cfg.train.arch
    out_dir = Path(out_dir)
    epochs = cfg.train.seg_epochs
    loss_kind = "hybrid" if arch == "deepvox" else cfg.loss.baseline_kind
    report = MetricsReport("seg")
    dev_masks: Dict[str, MaskVolume] = {}
    results: List[SegFoldResult] = []
    _log.info("train_segmentation start: arch=%s k=%d epochs=%d n=%d", arch, folds.k, epochs, len(samples))

    for fold in fold_ids if fold_ids is not None else range(folds.k):
        train_ids = [cid for cid in folds.train_ids(fold) if cid in samples]
        dev = [samples[cid] for cid in folds.dev_ids(fold) if cid in samples]
        net = build_segmenter(arch, derive_seed(cfg.seed, "seg", arch, fold), cfg.model)
        opt = Adam.from_config(net.trainable(), cfg.optim, cfg.optim.seg_lr)
        D = opt_D = None
        if arch == "deepvox":
            D = build_deepvox_discriminator(derive_seed(cfg.seed, "disc", fold), cfg.model)
            opt_D = Adam.from_config(D.trainable(), cfg.optim, cfg.optim.seg_lr)
        sched = CosineRestartSchedule(
            eta0=cfg.optim.seg_lr,
            first_cycle_steps=max(len(train_ids), 1),
            t_mul=cfg.optim.t_mul,
            m_mul=cfg.optim.m_mul,
            alpha_min=cfg.optim.alpha_min,
        )
        plateau = PlateauState.from_config(cfg.optim, cfg.optim.seg_lr)
        metrics_log = _CsvLog(out_dir / f"{arch}_fold{fold}_metrics.csv", SEG_COLUMNS)
        timing_log = _CsvLog(out_dir / f"{arch}_fold{fold}_timing.csv", ("epoch", "seconds"))
        name = seg_checkpoint_name(arch, fold)
        ckpts.save(name, net.arch, net.state_dict())
        best_dsc, best_epoch, seconds = -1.0, 0, []
        step = 0

        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            order = rng_for(cfg.seed, "shuffle", arch, fold, epoch).permutation(len(train_ids))
            lr_epoch = cosine_restart_lr(sched, step) if cfg.train.schedule == "cosine" else plateau.lr
            losses = []
            for n, idx in enumerate(order):
                s = samples[train_ids[int(idx)]]
                vol, mask = augment_sample(s.volume, s.mask, cfg.train.augment, derive_seed(cfg.seed, "aug", fold, epoch, n))
                vol, mask = _fit_z(net, vol, mask)
                lr = cosine_restart_lr(sched, step) if cfg.train.schedule == "cosine" else plateau.lr
                opt.lr = lr
                if D is not None:
                    opt_D.lr = lr
                    _, loss = gan_train_step(net, D, opt, opt_D, vol.data, mask.data, cfg.loss.hybrid, cfg.loss.adversarial_weight)
                else:
                    loss = supervised_step(net, opt, vol.data, mask.data, loss_kind, cfg.loss.hybrid)
                losses.append(loss)
                step += 1
            scores, _, dev_loss = _evaluate_seg(net, dev, cfg, loss_kind)
            dsc = mean_std(sc.dsc for sc in scores.values())[0] if scores else 0.0
            prec = mean_std(sc.precision for sc in scores.values())[0] if scores else 0.0
            sens = mean_std(sc.sensitivity for sc in scores.values())[0] if scores else 0.0
            train_loss = float(np.mean(losses)) if losses else 0.0
            metrics_log.row([epoch, lr_epoch, train_loss, dsc, prec, sens])
            if cfg.train.schedule == "plateau" and np.isfinite(dev_loss):
                plateau_update(plateau, dev_loss)
            if dsc > best_dsc:
                best_dsc, best_epoch = dsc, epoch
                ckpts.save(name, net.arch, net.state_dict())
            elapsed = time.perf_counter() - t0
            seconds.append(elapsed)
            timing_log.row([epoch, elapsed])
            _log.info("seg %s fold=%d epoch=%d lr=%.3g loss=%.4f dev_dsc=%.4f (%.1fs)", arch, fold, epoch, lr_epoch, train_loss, dsc, elapsed)
            if progress_cb:
                progress_cb(epoch)

        net.load_state_dict(ckpts.load(name, net.arch))
        scores, masks, _ = _evaluate_seg(net, dev, cfg, loss_kind)
        for cid, sc in scores.items():
            report.add(cid, sc, fold)
        dev_masks.update(masks)
        results.append(SegFoldResult(fold, name, best_epoch, max(best_dsc, 0.0), seconds))
        _log.info("seg %s fold=%d done: best_epoch=%d best_dsc=%.4f", arch, fold, best_epoch, max(best_dsc, 0.0))

    return SegTrainResult(arch, results, report, dev_masks)


def compare_epoch_times(baseline: SegTrainResult, deepvox: SegTrainResult) -> float:
    """baseline / DeepVox の1 epoch あたり平均時間の比"""
    return baseline.mean_epoch_seconds / deepvox.mean_epoch_seconds


# =============================================================================
# 分類（SAVE-CT）
# =============================================================================
@dataclass
class ClsFoldResult:
    fold: int
    checkpoint: str
    best_epoch: int
    scores: ClsScores
    probs: Dict[str, float]


@dataclass
class ClsTrainResult:
    folds: List[ClsFoldResult]
    report: MetricsReport

    @property
    def probs(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for f in self.folds:
            out.update(f.probs)
        return out


def predict_probability(net: Network, mask: MaskVolume) -> float:
    return float(net.infer(mask.data[None, None]).reshape(-1)[0])


def train_classifier(
    cfg: RunConfig,
    masks: Dict[str, MaskVolume],
    labels: Dict[str, int],
    folds: FoldSplit,
    out_dir,
    ckpts: CheckpointRepository,
    fold_ids: Optional[Sequence[int]] = None,
    progress_cb=None,
) -> ClsTrainResult:
    """Z トリム済みマスクから TAA 確率を学習する（学習 fold のみクラスバランス）"""
    out_dir = Path(out_dir)
    epochs = cfg.train.cls_epochs
    report = MetricsReport("cls")
    results: List[ClsFoldResult] = []
    _log.info("train_classifier start: k=%d epochs=%d n=%d", folds.k, epochs, len(masks))

    for fold in fold_ids if fold_ids is not None else range(folds.k):
        train_ids = [cid for cid in folds.train_ids(fold) if cid in masks]
        train_ids = balance_downsample(train_ids, derive_seed(cfg.seed, "balance", fold), label_of=labels.__getitem__)
        dev_ids = [cid for cid in folds.dev_ids(fold) if cid in masks]
        net = build_savect(derive_seed(cfg.seed, "cls", fold), cfg.model)
        opt = Adam.from_config(net.trainable(), cfg.optim, cfg.optim.cls_lr)
        plateau = PlateauState.from_config(cfg.optim, cfg.optim.cls_lr)
        metrics_log = _CsvLog(out_dir / f"savect_fold{fold}_metrics.csv", CLS_COLUMNS)
        timing_log = _CsvLog(out_dir / f"savect_fold{fold}_timing.csv", ("epoch", "seconds"))
        name = cls_checkpoint_name(fold)
        ckpts.save(name, net.arch, net.state_dict())

        def evaluate():
            probs = {cid: predict_probability(net, masks[cid]) for cid in dev_ids}
            if not probs:
                return probs, None, float("nan")
            p = np.array([probs[c] for c in dev_ids], dtype=np.float64)
            y = np.array([labels[c] for c in dev_ids], dtype=np.float64)
            with no_grad():
                dev_loss = bce(Tensor(p), y).item()
            return probs, cls_metrics(p, y.astype(int)), dev_loss

        best_probs, best_scores, _ = evaluate()
        best_acc, best_epoch = -1.0, 0
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            order = rng_for(cfg.seed, "cls_shuffle", fold, epoch).permutation(len(train_ids))
            lr_epoch = plateau.lr
            opt.lr = plateau.lr
            losses = []
            for idx in order:
                cid = train_ids[int(idx)]
                opt.zero_grad()
                p = net(as_input(masks[cid].data))
                loss = bce(p, np.full(p.shape, labels[cid], dtype=np.float32))
                loss.backward()
                opt.step()
                losses.append(loss.item())
            probs, scores, dev_loss = evaluate()
            train_loss = float(np.mean(losses)) if losses else 0.0
            if scores is not None:
                metrics_log.row([epoch, lr_epoch, train_loss, scores.accuracy, scores.precision, scores.sensitivity, scores.specificity, scores.f1])
                if np.isfinite(dev_loss):
                    plateau_update(plateau, dev_loss)
                if scores.accuracy > best_acc:
                    best_acc, best_epoch, best_probs, best_scores = scores.accuracy, epoch, probs, scores
                    ckpts.save(name, net.arch, net.state_dict())
            elapsed = time.perf_counter() - t0
            timing_log.row([epoch, elapsed])
            _log.info("cls fold=%d epoch=%d lr=%.3g loss=%.4f dev_loss=%.4f", fold, epoch, lr_epoch, train_loss, dev_loss)
            if progress_cb:
                progress_cb(epoch)

        if best_scores is not None:
            report.add(f"fold{fold}", best_scores, fold)
            results.append(ClsFoldResult(fold, name, best_epoch, best_scores, best_probs))
        _log.info("cls fold=%d done: best_epoch=%d", fold, best_epoch)

    return ClsTrainResult(results, report)
