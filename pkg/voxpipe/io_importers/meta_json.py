import json
import logging
from pathlib import Path

from voxpipe.domain.errors import IoFailure, MalformedHeader
from voxpipe.domain.models import Group, ScanMeta

_log = logging.getLogger("voxpipe.io.meta")

_KEYS = ("rescale_slope", "rescale_intercept", "group", "label")


def meta_path_for(case_dir: Path, case_id: str) -> Path:
    return Path(case_dir) / f"{case_id}.meta.json"


def read_meta(path) -> ScanMeta:
    """<case>.meta.json（DICOM の slope / intercept の代わり）を読む"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise IoFailure(f"メタデータが見つかりません: {path}")
    except OSError as e:
        _log.exception("meta read failed: %s", path)
        raise IoFailure(f"メタデータを読み込めません: {path}: {e}")
    except json.JSONDecodeError as e:
        raise MalformedHeader(f"メタデータの JSON が不正: {path}: {e}")
    missing = [k for k in _KEYS if k not in data]
    if missing:
        raise MalformedHeader(f"{path}: キーがありません: {', '.join(missing)}")
    try:
        return ScanMeta(
            rescale_slope=float(data["rescale_slope"]),
            rescale_intercept=float(data["rescale_intercept"]),
            group=Group(str(data["group"]).upper()),
            label=int(data["label"]),
        )
    except ValueError as e:
        raise MalformedHeader(f"{path}: 値が不正: {e}")


def write_meta(meta: ScanMeta, path) -> None:
    payload = {
        "rescale_slope": meta.rescale_slope,
        "rescale_intercept": meta.rescale_intercept,
        "group": meta.group.value,
        "label": meta.label,
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2)
    except OSError as e:
        _log.exception("meta write failed: %s", path)
        raise IoFailure(f"メタデータを書き込めません: {path}: {e}")
