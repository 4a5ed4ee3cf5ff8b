"""パラメータチェックポイントのファイル形式。

    magic  b"VOXCKPT\\0"（8 byte）
    u32    ヘッダ長（little endian）
    JSON   {"format_version": "1.0", "arch": ..., "params": [{"name", "shape"}, ...]}
    float32 little endian のペイロードを params の順に連結
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List

import numpy as np
from packaging.version import InvalidVersion, Version

from voxpipe.domain.errors import CheckpointMismatch, IoFailure
from voxpipe.repositories.base import CheckpointRepository

_log = logging.getLogger("voxpipe.io.checkpoint")

MAGIC = b"VOXCKPT\0"
FORMAT_VERSION = "1.0"
SUFFIX = ".ckpt"


def encode_checkpoint(arch: str, state: Dict[str, np.ndarray]) -> bytes:
    names = sorted(state)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": arch,
        "params": [{"name": n, "shape": list(np.shape(state[n]))} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(state[n], dtype="<f4").tobytes() for n in names]
    return b"".join(parts)


def decode_checkpoint(blob: bytes, arch: str = None) -> Dict[str, np.ndarray]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointMismatch("チェックポイントの magic が一致しません")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise CheckpointMismatch("チェックポイントのヘッダが途中で切れています")
    (hlen,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    try:
        header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
        version = Version(str(header["format_version"]))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, InvalidVersion) as e:
        raise CheckpointMismatch(f"チェックポイントのヘッダが不正: {e}")
    pos += hlen
    if version.major != Version(FORMAT_VERSION).major:
        raise CheckpointMismatch(f"未対応の形式バージョン: {version}（対応: {FORMAT_VERSION}）")
    if arch is not None and header.get("arch") != arch:
        raise CheckpointMismatch(f"アーキテクチャが一致しません: file={header.get('arch')} expected={arch}")
    state: Dict[str, np.ndarray] = {}
    for entry in header.get("params", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if pos + nbytes > len(blob):
            raise CheckpointMismatch(f"{entry['name']}: ペイロードが足りません")
        state[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointMismatch(f"ペイロードの末尾に余分なバイトがあります（{len(blob) - pos} byte）")
    return state


class FileCheckpointRepository(CheckpointRepository):
    def __init__(self, root: str = "checkpoints"):
        self.root = Path(root)

    def _path(self, name: str) -> Path:
        return self.root / f"{name}{SUFFIX}"

    def save(self, name: str, arch: str, state: Dict[str, np.ndarray]) -> None:
        path = self._path(name)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(SUFFIX + ".tmp")
            tmp.write_bytes(encode_checkpoint(arch, state))
            tmp.replace(path)
        except OSError as e:
            _log.exception("checkpoint write failed: %s", path)
            raise IoFailure(f"チェックポイントを書き込めません: {path}: {e}")
        _log.info("checkpoint saved: %s (%d params)", path, len(state))

    def load(self, name: str, arch: str) -> Dict[str, np.ndarray]:
        path = self._path(name) if not str(name).endswith(SUFFIX) else Path(name)
        return load_checkpoint_file(path, arch)

    def exists(self, name: str) -> bool:
        return self._path(name).exists()

    def names(self) -> List[str]:
        if not self.root.exists():
            return []
        return sorted(p.name[: -len(SUFFIX)] for p in self.root.glob(f"*{SUFFIX}"))


def load_checkpoint_file(path, arch: str = None) -> Dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        _log.exception("checkpoint read failed: %s", path)
        raise IoFailure(f"チェックポイントを読めません: {path}: {e}")
    return decode_checkpoint(blob, arch)
