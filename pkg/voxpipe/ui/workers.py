# -*- coding: utf-8 -*-
"""
ui/workers.py

役割:
    - 長時間処理（manifest の取り込み、症例ごとの前処理）を実行するワーカー群。
    - importer(I/O層) と CLI の橋渡しを行い、進捗・キャンセル・警告レポートを仲介する。

設計ポイント:
    - importer 側は UI 非依存（progress_cb / cancel_cb を受け取るだけ）。
    - 行単位の軽微な問題は importer.warnings に溜まり、ここでまとめて
      <out_dir>/logs/<prefix>_import_<timestamp>.log に書き出してパスを返す。
    - 症例ごとの並列処理は VOXPIPE_THREADS を上限にしたスレッドプールで行う。
"""

from __future__ import annotations

import datetime
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, TypeVar

from voxpipe.domain.errors import IoFailure
from voxpipe.domain.models import ManifestRow
from voxpipe.io_importers.case_importers import ManifestImporter

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "VOXPIPE_THREADS"


# ------------------------------------------------------------
# 共通のヘルパー
# ------------------------------------------------------------
def _now_tag() -> str:
    return datetime.datetime.now().strftime("%Y%m%d_%H%M%S")


def _ensure_log_dir(out_dir) -> Path:
    log_dir = Path(out_dir) / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    return log_dir


def thread_cap() -> int:
    """VOXPIPE_THREADS（未設定・不正なら CPU 数）"""
    raw = os.environ.get(THREADS_ENV, "").strip()
    try:
        n = int(raw) if raw else 0
    except ValueError:
        logging.getLogger("voxpipe.workers").warning("%s is not an integer: %r", THREADS_ENV, raw)
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], progress_cb: Optional[Callable[[int], None]] = None) -> List[R]:
    """fn を症例ごとに並列実行する。結果は items の順。最初の例外はそのまま送出"""
    items = list(items)
    workers = min(thread_cap(), max(len(items), 1))
    out: List[R] = []
    if workers == 1:
        for n, item in enumerate(items, start=1):
            out.append(fn(item))
            if progress_cb:
                progress_cb(n)
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for n, result in enumerate(pool.map(fn, items), start=1):
            out.append(result)
            if progress_cb:
                progress_cb(n)
    return out


# ------------------------------------------------------------
# manifest 取り込み用ワーカー
# ------------------------------------------------------------
class ManifestImportWorker:
    def __init__(self, case_dir, out_dir, check_files: bool = True) -> None:
        self.case_dir = Path(case_dir)
        self.out_dir = Path(out_dir)
        self.check_files = check_files
        self._cancel = False
        self._warnings: List[str] = []
        self._log = logging.getLogger(f"voxpipe.import.{self.__class__.__name__}")
        self.on_progress: Optional[Callable[[int], None]] = None

    # ---- 呼び出し側からのキャンセル ----
    def cancel(self) -> None:
        self._cancel = True

    def _write_warnings_log(self, prefix: str, warnings: Sequence[str]) -> str:
        try:
            path = _ensure_log_dir(self.out_dir) / f"{prefix}_import_{_now_tag()}.log"
            with open(path, "w", encoding="utf-8") as f:
                for w in warnings:
                    f.write(w.rstrip() + "\n")
        except OSError as e:
            raise IoFailure(f"警告ログを書き込めません: {self.out_dir}: {e}")
        return str(path)

    # ---- 進捗/キャンセルコールバック（importer に渡す）----
    def _progress_cb(self, n: int) -> None:
        if self.on_progress:
            self.on_progress(int(n))

    def _cancel_cb(self) -> bool:
        return self._cancel

    # ---- メイン処理 ----
    def run(self) -> Tuple[List[ManifestRow], Optional[str]]:
        """(取り込んだ行, 警告ログのパス or None)。manifest が壊れていれば IoFailure"""
        self._log.info("manifest import start: dir=%s", self.case_dir)
        importer = ManifestImporter(self.case_dir, check_files=self.check_files)
        try:
            rows = importer.import_manifest(progress_cb=self._progress_cb, cancel_cb=self._cancel_cb)
        except IoFailure:
            self._log.exception("manifest import failed")
            raise
        self._warnings.extend(str(w) for w in importer.warnings)
        log_path = None
        if self._warnings:
            self._log.warning("manifest import warnings: count=%d", len(self._warnings))
            log_path = self._write_warnings_log("manifest", self._warnings)
        self._log.info("manifest import done: n=%d warnings=%d", len(rows), len(self._warnings))
        return rows, log_path
