"""コマンドライン（argparse のサブコマンド）と各コマンドの処理。

サービスの組み立ては app.py（Composition Root）が行い、ここには
引数の解釈と結果の表示だけを書く。
"""

import argparse
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List

from voxpipe import __version__
from voxpipe.domain.config import RunConfig
from voxpipe.evaluation.metrics import format_mean_std
from voxpipe.services.services import write_rows
from voxpipe.ui.utils.formatters import format_report, format_stats, format_table
from voxpipe.ui.workers import ManifestImportWorker, parallel_map

_log = logging.getLogger("voxpipe.cli")


@dataclass(frozen=True)
class Workspace:
    """out_dir 以下の既定の置き場所（各コマンドのフラグで上書き可）"""

    out_dir: Path
    data_dir: Path
    prep_dir: Path
    ckpt_dir: Path

    @classmethod
    def from_args(cls, args: argparse.Namespace, cfg: RunConfig) -> "Workspace":
        out = Path(args.out_dir or cfg.out_dir)
        return cls(
            out_dir=out,
            data_dir=Path(getattr(args, "data_dir", None) or out / "data"),
            prep_dir=Path(getattr(args, "prep_dir", None) or out / "prep"),
            ckpt_dir=Path(getattr(args, "ckpt_dir", None) or out / "checkpoints"),
        )


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON 設定ファイル")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="設定の上書き（例: train.seg_epochs=30）")
    p.add_argument("--seed", type=int, help="グローバルシード（seed=... の上書きと同じ）")
    p.add_argument("--out-dir", help="成果物の出力先（既定: 設定の out_dir）")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="voxpipe", description="thoracic aorta segmentation and TAA classification pipeline")
    parser.add_argument("--version", action="version", version=f"voxpipe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="合成ファントムのコホートを作る")
    p.add_argument("--n", type=int, help="症例数（既定: phantom.n_total）")
    p.add_argument("--data-dir")

    p = sub.add_parser("preprocess", parents=[common], help="コホートを前処理する")
    p.add_argument("--data-dir")
    p.add_argument("--prep-dir")
    p.add_argument("--annotators", action="store_true", help="3人分の模擬アノテーションを多数決して正解にする")

    p = sub.add_parser("train-seg", parents=[common], help="セグメンテーションの k-fold 学習")
    p.add_argument("--prep-dir")
    p.add_argument("--ckpt-dir")
    p.add_argument("--arch", choices=("deepvox", "deepaaa", "unet3d"))
    p.add_argument("--compare", metavar="BASELINE", choices=("deepaaa", "unet3d"), help="baseline と DeepVox の epoch 時間を比べる")

    p = sub.add_parser("train-cls", parents=[common], help="SAVE-CT の k-fold 学習")
    p.add_argument("--prep-dir")
    p.add_argument("--ckpt-dir")

    p = sub.add_parser("predict", parents=[common], help="スキャンからマスク（と TAA 確率）を推論する")
    p.add_argument("scans", nargs="+", help="<id>.nrrd（同じ場所に <id>.meta.json が必要）")
    p.add_argument("--checkpoint", required=True, help="セグメンテーションのチェックポイント名 or .ckpt パス")
    p.add_argument("--classify", action="store_true")
    p.add_argument("--cls-checkpoint", default="cls_savect_fold0")
    p.add_argument("--arch", choices=("deepvox", "deepaaa", "unet3d"))
    p.add_argument("--ckpt-dir")

    p = sub.add_parser("eval", parents=[common], help="予測マスクを正解と比べる")
    p.add_argument("--prep-dir")
    p.add_argument("--masks", help="予測マスクのディレクトリ（既定: <out_dir>/masks）")

    p = sub.add_parser("gradcam", parents=[common], help="3D Grad-CAM のモンタージュ")
    p.add_argument("case_id")
    p.add_argument("--checkpoint", default="cls_savect_fold0")
    p.add_argument("--masks", help="予測マスクのディレクトリ（省略時は正解マスク）")
    p.add_argument("--layer")
    p.add_argument("--prep-dir")
    p.add_argument("--ckpt-dir")
    p.add_argument("--out")

    p = sub.add_parser("stats", parents=[common], help="Friedman + Nemenyi 検定")
    p.add_argument("--scores", required=True, help="id, method1, method2, ... の CSV")
    p.add_argument("--lower-is-better", action="store_true")

    p = sub.add_parser("montage", parents=[common], help="前処理済みスキャンのスライス一覧")
    p.add_argument("case_id")
    p.add_argument("--prep-dir")
    p.add_argument("--no-mask", action="store_true")
    p.add_argument("--out")
    return parser


def config_overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return overrides


# =============================================================================
# コマンド
# =============================================================================
def _read_manifest(case_dir: Path, ws: Workspace):
    rows, log_path = ManifestImportWorker(case_dir, ws.out_dir).run()
    if log_path:
        print(f"manifest: {len(rows)} rows, warnings written to {log_path}")
    return rows


def cmd_gen_data(args, cfg, ws: Workspace, services) -> int:
    rows = services.cohort(ws).generate(cfg, args.n)
    print(f"generated {len(rows)} cases in {ws.data_dir}")
    return 0


def cmd_preprocess(args, cfg, ws: Workspace, services) -> int:
    svc = services.cohort(ws)
    rows = _read_manifest(ws.data_dir, ws)
    results = parallel_map(lambda r: svc.preprocess_case(cfg, r, args.annotators), rows)
    svc.finish_preprocess([row for row, _ in results])
    agreement = [a for _, a in results if a is not None]
    if agreement:
        print(f"inter-observer DSC {format_mean_std(agreement)}")
    print(f"preprocessed {len(results)} cases into {ws.prep_dir}")
    return 0


def cmd_train_seg(args, cfg, ws: Workspace, services) -> int:
    svc = services.segmentation(ws)
    rows = _read_manifest(ws.prep_dir, ws)
    mode = cfg.eval.aggregate
    if args.compare:
        base, ours, ratio = svc.compare_baseline(cfg, rows, ws.out_dir, args.compare)
        print(format_report(f"{args.compare} dev", base.result.report, mode))
        print(format_report("deepvox dev", ours.result.report, mode))
        print(f"epoch time ratio {args.compare}/deepvox = {ratio:.2f}")
        return 0
    summary = svc.train(cfg, rows, ws.out_dir, args.arch)
    print(format_report(f"{summary.result.arch} dev", summary.result.report, mode))
    print(format_report(f"{summary.result.arch} test", summary.test_report, mode))
    return 0


def cmd_train_cls(args, cfg, ws: Workspace, services) -> int:
    svc = services.classification(ws)
    rows = _read_manifest(ws.prep_dir, ws)
    summary = svc.train(cfg, rows, ws.out_dir)
    print(format_report("savect dev", summary.result.report, "fold"))
    print(format_report("savect test", summary.test_report, "fold"))
    if svc.warnings:
        print(f"{len(svc.warnings)} cases skipped (see log)")
    return 0


def cmd_predict(args, cfg, ws: Workspace, services) -> int:
    cls_ckpt = args.cls_checkpoint if args.classify else None
    preds = services.prediction(ws).predict(cfg, args.scans, ws.out_dir, args.checkpoint, cls_ckpt, args.arch)
    rows = [[p.case_id, str(p.mask_path), "-" if p.probability is None else f"{p.probability:.4f}", "-" if p.label is None else p.label] for p in preds]
    print(format_table(["id", "mask", "probability", "label"], rows))
    return 0


def cmd_eval(args, cfg, ws: Workspace, services) -> int:
    rows = _read_manifest(ws.prep_dir, ws)
    mask_dir = Path(args.masks) if args.masks else ws.out_dir / "masks"
    report = services.evaluation(ws).evaluate_masks(mask_dir, [r.case_id for r in rows])
    path = write_rows(ws.out_dir / "eval_report.csv", report.to_rows())
    print(format_report("segmentation", report, "case"))
    print(f"report: {path}")
    return 0


def cmd_gradcam(args, cfg, ws: Workspace, services) -> int:
    out = args.out or ws.out_dir / "gradcam" / f"{args.case_id}_cam.ppm"
    path, _ = services.evaluation(ws).gradcam(cfg, args.case_id, args.checkpoint, out, args.masks, args.layer)
    print(f"grad-cam montage: {path}")
    return 0


def cmd_stats(args, cfg, ws: Workspace, services) -> int:
    s = services.evaluation(ws).stats(args.scores, not args.lower_is_better, cfg.eval.alpha)
    print(format_stats(s.methods, s.friedman.chi2, s.friedman.df, s.friedman.p, s.friedman.rank_means, s.cd, s.significant))
    return 0


def cmd_montage(args, cfg, ws: Workspace, services) -> int:
    out = args.out or ws.out_dir / "montage" / f"{args.case_id}.pgm"
    path = services.evaluation(ws).montage(cfg, args.case_id, out, with_mask=not args.no_mask)
    print(f"montage: {path}")
    return 0


HANDLERS: Dict[str, Callable[..., int]] = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "train-seg": cmd_train_seg,
    "train-cls": cmd_train_cls,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "stats": cmd_stats,
    "montage": cmd_montage,
}
