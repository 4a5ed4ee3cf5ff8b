import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional, Sequence

from voxpipe.domain.config import load_run_config
from voxpipe.domain.errors import ConfigError, VoxPipeError
from voxpipe.repositories.checkpoint_file import FileCheckpointRepository
from voxpipe.repositories.nrrd_cases import NrrdCaseRepository
from voxpipe.services.services import (
    ClassificationService,
    CohortService,
    EvaluationService,
    PredictionService,
    SegmentationService,
)
from voxpipe.ui.cli import HANDLERS, Workspace, build_parser, config_overrides

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _setup_logging(out_dir) -> None:
    """<out_dir>/logs/voxpipe.log に INFO 以上をローテーション保存し、WARNING 以上は stderr にも出す"""
    root = logging.getLogger()
    # すでに RotatingFileHandler がついている場合は二重設定しない。
    # 同じプロセスで何度コマンドを実行しても同じログが重複して記録されないようにする。
    if any(isinstance(h, RotatingFileHandler) for h in root.handlers):
        return
    log_dir = Path(out_dir) / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)

    root.setLevel(logging.INFO)
    fmt = logging.Formatter(
        "%(asctime)s [%(levelname)s] %(name)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    fh = RotatingFileHandler(str(log_dir / "voxpipe.log"), maxBytes=2_000_000, backupCount=10, encoding="utf-8")
    fh.setFormatter(fmt)
    root.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setLevel(logging.WARNING)
    sh.setFormatter(fmt)
    root.addHandler(sh)


class ServiceBundle:
    """依存関係の組み立て（Composition Root）。Workspace ごとにリポジトリを作ってサービスへ注入する"""

    def cohort(self, ws: Workspace) -> CohortService:
        return CohortService(NrrdCaseRepository(ws.data_dir), NrrdCaseRepository(ws.prep_dir))

    def segmentation(self, ws: Workspace) -> SegmentationService:
        return SegmentationService(NrrdCaseRepository(ws.prep_dir), FileCheckpointRepository(ws.ckpt_dir))

    def classification(self, ws: Workspace) -> ClassificationService:
        return ClassificationService(NrrdCaseRepository(ws.prep_dir), FileCheckpointRepository(ws.ckpt_dir))

    def prediction(self, ws: Workspace) -> PredictionService:
        return PredictionService(FileCheckpointRepository(ws.ckpt_dir))

    def evaluation(self, ws: Workspace) -> EvaluationService:
        return EvaluationService(NrrdCaseRepository(ws.prep_dir), FileCheckpointRepository(ws.ckpt_dir))


class VoxPipeApplication:
    def __init__(self, services: Optional[ServiceBundle] = None):
        self.services = services or ServiceBundle()

    def run(self, argv: Sequence[str]) -> int:
        parser = build_parser()
        try:
            args = parser.parse_args(list(argv))
        except SystemExit as e:
            # argparse は誤用で 2、--help / --version で 0
            return int(e.code or 0)

        log = logging.getLogger("voxpipe.app")
        try:
            cfg = load_run_config(args.config, config_overrides(args))
            ws = Workspace.from_args(args, cfg)
            _setup_logging(ws.out_dir)
            log.info("command start: %s out_dir=%s seed=%d", args.command, ws.out_dir, cfg.seed)
            code = HANDLERS[args.command](args, cfg, ws, self.services)
            log.info("command done: %s exit=%d", args.command, code)
            return code
        except ConfigError as e:
            print(f"voxpipe: config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except VoxPipeError:
            log.exception("command failed: %s", args.command)
            return EXIT_RUNTIME
        except Exception:
            log.exception("unexpected failure: %s", args.command)
            return EXIT_RUNTIME


def cli_dispatch(argv: Sequence[str]) -> int:
    return VoxPipeApplication().run(argv)
