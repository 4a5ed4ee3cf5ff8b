# -*- coding: utf-8 -*-
"""コホートディレクトリの manifest.csv を読む。

- 列: id, group, label, nz, ratio, seed
- 行単位の軽微な問題（ファイル欠落・群とラベルの不一致・値の不正）は
  self.warnings に積んでその行を飛ばす。最後にワーカー層がログファイルにする。
- manifest 自体が無い／ヘッダが違うといった致命的な問題は RuntimeError 系（IoFailure）。
"""

import csv
import logging
from pathlib import Path
from typing import Callable, List, Optional

from voxpipe.domain.errors import IoFailure
from voxpipe.domain.models import Group, ManifestRow

_log = logging.getLogger("voxpipe.io.manifest")

ProgressCB = Optional[Callable[[int], None]]
CancelCB = Optional[Callable[[], bool]]

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("id", "group", "label", "nz", "ratio", "seed")


def write_manifest_csv(rows: List[ManifestRow], path: Path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for r in rows:
                w.writerow([r.case_id, r.group.value, r.label, r.nz, f"{r.ratio:.6f}", r.seed])
    except OSError as e:
        _log.exception("manifest write failed: %s", path)
        raise IoFailure(f"manifest を書き込めません: {path}: {e}")


class ManifestImporter:
    def __init__(self, root, check_files: bool = True):
        self.root = Path(root)
        self.check_files = check_files
        self.warnings: List[str] = []

    def _files_present(self, case_id: str) -> bool:
        return all((self.root / name).exists() for name in (f"{case_id}.nrrd", f"{case_id}.mask.nrrd", f"{case_id}.meta.json"))

    def import_manifest(self, progress_cb: ProgressCB = None, cancel_cb: CancelCB = None) -> List[ManifestRow]:
        path = self.root / MANIFEST_NAME
        try:
            f = open(path, "r", encoding="utf-8", newline="")
        except OSError as e:
            raise IoFailure(f"manifest が読めません: {path}: {e}")
        rows: List[ManifestRow] = []
        seen = set()
        with f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise IoFailure(f"manifest のヘッダが不正: {reader.fieldnames}（期待: {','.join(MANIFEST_COLUMNS)}）")
            for i, rec in enumerate(reader, start=2):
                if cancel_cb and cancel_cb():
                    self.warnings.append(f"{i}行目で中断しました")
                    break
                try:
                    group = Group(rec["group"].strip().upper())
                    row = ManifestRow(
                        case_id=rec["id"].strip(),
                        group=group,
                        label=int(rec["label"]),
                        nz=int(rec["nz"]),
                        ratio=float(rec["ratio"]),
                        seed=int(rec["seed"]),
                    )
                except (ValueError, AttributeError) as e:
                    self.warnings.append(f"{i}行目: 値が不正のためスキップ: {e}")
                    continue
                if not row.case_id or row.case_id in seen:
                    self.warnings.append(f"{i}行目: id が空か重複しているためスキップ: {row.case_id!r}")
                    continue
                if row.label != group.label:
                    self.warnings.append(f"{i}行目: {row.case_id} の label={row.label} が群 {group.value} と一致しないためスキップ")
                    continue
                if self.check_files and not self._files_present(row.case_id):
                    self.warnings.append(f"{i}行目: {row.case_id} のファイルが揃っていないためスキップ")
                    continue
                seen.add(row.case_id)
                rows.append(row)
                if progress_cb:
                    progress_cb(len(rows))
        for w in self.warnings:
            _log.warning("manifest: %s", w)
        _log.info("import_manifest done: n=%d warnings=%d", len(rows), len(self.warnings))
        return rows
