# -*- coding: utf-8 -*-
"""NRRD の読み書き（voxpipe が扱うサブセットのみ）。

受け付けるのは以下だけで、それ以外は読み違えるより先にエラーにする：
  - マジック NRRD0004 / NRRD0005、dimension 3
  - type: int16 / uint8 / float32（NRRD 名 "float"）
  - encoding: raw / gzip、リトルエンディアン
  - 間隔: 対角の space directions もしくは spacings
ヘッダの解析とペイロードの符号化は pynrrd に任せ、ここでは検証と
Volume / MaskVolume への変換に徹する。
"""

import logging
from pathlib import Path
from typing import Union

import nrrd
import numpy as np

from voxpipe.domain.errors import (
    IoFailure,
    MalformedHeader,
    NonBinaryMaskValues,
    PayloadSizeMismatch,
    UnknownOrientationCode,
    UnsupportedHeaderField,
)
from voxpipe.domain.models import MaskVolume, Orientation, Volume, VolumeKind

_log = logging.getLogger("voxpipe.io.nrrd")

_MAGICS = (b"NRRD0004", b"NRRD0005")

# NRRD の型名ゆれ → numpy dtype
_TYPE_ALIASES = {
    "int16": ("short", "short int", "signed short", "signed short int", "int16", "int16_t"),
    "uint8": ("uchar", "unsigned char", "uint8", "uint8_t"),
    "float32": ("float",),
}
_DTYPES = {"int16": np.dtype("<i2"), "uint8": np.dtype("u1"), "float32": np.dtype("<f4")}

# 独自の key:=value フィールド（向きとボリューム種別）
ORIENTATION_KEY = "voxpipe_orientation"
KIND_KEY = "voxpipe_kind"

_ACCEPTED_FIELDS = {
    "type",
    "dimension",
    "sizes",
    "encoding",
    "endian",
    "spacings",
    "space",
    "space directions",
    "kinds",
    ORIENTATION_KEY,
    KIND_KEY,
}

PathLike = Union[str, Path]


def _canonical_type(name: str) -> str:
    t = str(name).strip().lower()
    for canon, aliases in _TYPE_ALIASES.items():
        if t in aliases:
            return canon
    raise UnsupportedHeaderField(f"type '{name}' は未対応（int16 / uint8 / float のみ）")


def _spacing_from_header(header: dict) -> tuple:
    if "space directions" in header:
        sd = np.asarray(header["space directions"], dtype=float)
        if sd.shape != (3, 3) or not np.all(np.isfinite(sd)):
            raise UnsupportedHeaderField("space directions は 3x3 の数値行列のみ対応")
        if np.count_nonzero(sd - np.diag(np.diagonal(sd))):
            raise UnsupportedHeaderField("space directions は対角行列のみ対応（斜めの向きは未対応）")
        spacing = tuple(float(abs(v)) for v in np.diagonal(sd))
    elif "spacings" in header:
        sp = np.asarray(header["spacings"], dtype=float).ravel()
        if sp.shape != (3,):
            raise MalformedHeader(f"spacings は3要素: {header['spacings']}")
        spacing = tuple(float(v) for v in sp)
    else:
        raise MalformedHeader("space directions / spacings のどちらかが必要です")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise MalformedHeader(f"spacing は正の値: {spacing}")
    return spacing


def _validate_header(header: dict) -> tuple:
    unknown = sorted(k for k in header if k not in _ACCEPTED_FIELDS)
    if unknown:
        raise UnsupportedHeaderField(f"未対応のヘッダフィールド: {', '.join(unknown)}")
    for req in ("type", "dimension", "sizes", "encoding"):
        if req not in header:
            raise MalformedHeader(f"必須フィールドがありません: {req}")
    if int(header["dimension"]) != 3:
        raise UnsupportedHeaderField(f"dimension {header['dimension']} は未対応（3 のみ）")
    sizes = [int(s) for s in np.asarray(header["sizes"]).ravel()]
    if len(sizes) != 3 or any(s < 1 for s in sizes):
        raise MalformedHeader(f"sizes が不正: {header['sizes']}")
    canon = _canonical_type(header["type"])
    encoding = str(header["encoding"]).lower()
    if encoding not in ("raw", "gzip", "gz"):
        raise UnsupportedHeaderField(f"encoding '{header['encoding']}' は未対応（raw / gzip のみ）")
    if _DTYPES[canon].itemsize > 1:
        endian = str(header.get("endian", "")).lower()
        if endian != "little":
            raise UnsupportedHeaderField(f"endian '{header.get('endian')}' は未対応（little のみ）")
    spacing = _spacing_from_header(header)
    return canon, spacing


def _orientation_from_header(header: dict) -> Orientation:
    code = str(header.get(ORIENTATION_KEY, "HFS")).strip().upper()
    try:
        return Orientation(code)
    except ValueError:
        raise UnknownOrientationCode(f"未知の向きコード: {code}")


def read_nrrd(path: PathLike) -> Union[Volume, MaskVolume]:
    """NRRD を読み Volume（uint8 の二値なら MaskVolume）を返す"""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic not in _MAGICS:
                raise MalformedHeader(f"NRRD マジックが不正: {magic!r}（NRRD0004 / NRRD0005 のみ）")
            fh.seek(0)
            try:
                header = nrrd.read_header(fh)
            except nrrd.NRRDError as e:
                raise MalformedHeader(f"{path}: ヘッダ解析エラー: {e}")
            canon, spacing = _validate_header(header)
            try:
                data = nrrd.read_data(header, fh, str(path), index_order="C")
            except nrrd.NRRDError as e:
                # byte skip / data file などはヘッダ検証で弾いているので、残るのはサイズ不一致
                raise PayloadSizeMismatch(f"{path}: ペイロードのサイズが sizes と一致しません: {e}")
            except (ValueError, EOFError, OSError) as e:
                # 圧縮ストリームの破損など
                raise PayloadSizeMismatch(f"{path}: ペイロードを復元できません: {e}")
    except FileNotFoundError:
        _log.exception("NRRD file not found: %s", path)
        raise IoFailure(f"NRRD ファイルが見つかりません: {path}")
    except OSError as e:
        _log.exception("NRRD read failed: %s", path)
        raise IoFailure(f"NRRD を読み込めません: {path}: {e}")

    data = np.ascontiguousarray(data).astype(_DTYPES[canon].newbyteorder("="), copy=False)
    orientation = _orientation_from_header(header)

    if canon == "uint8":
        if data.size and int(data.max()) > 1:
            raise NonBinaryMaskValues(f"{path}: uint8 の値が {{0,1}} 以外を含みます（max={int(data.max())}）")
        _log.info("NRRD mask read: %s dims=%s", path, data.shape[::-1])
        return MaskVolume(data=data, spacing=spacing, orientation=orientation)

    default_kind = VolumeKind.RAW if canon == "int16" else VolumeKind.HU
    try:
        kind = VolumeKind(str(header.get(KIND_KEY, default_kind.value)).strip().lower())
    except ValueError:
        raise MalformedHeader(f"{path}: {KIND_KEY} が不正: {header.get(KIND_KEY)}")
    _log.info("NRRD volume read: %s dims=%s type=%s", path, data.shape[::-1], canon)
    return Volume(data=data, spacing=spacing, orientation=orientation, kind=kind)


def _payload(v: Union[Volume, MaskVolume]) -> np.ndarray:
    if isinstance(v, MaskVolume):
        return v.data.astype(np.uint8, copy=False)
    d = v.data
    if d.dtype == np.int16:
        return d.astype("<i2", copy=False)
    if np.issubdtype(d.dtype, np.integer) and d.size and d.min() >= -32768 and d.max() <= 32767:
        return d.astype("<i2")
    return d.astype("<f4", copy=False)


def write_nrrd(v: Union[Volume, MaskVolume], path: PathLike, encoding: str = "gzip") -> Path:
    """Volume / MaskVolume を NRRD で保存する（float は float32 で格納）"""
    if encoding not in ("raw", "gzip"):
        raise UnsupportedHeaderField(f"encoding '{encoding}' は未対応（raw / gzip のみ）")
    path = Path(path)
    header = {
        "encoding": encoding,
        "spacings": [float(s) for s in v.spacing],
        ORIENTATION_KEY: v.orientation.value,
    }
    if isinstance(v, Volume):
        header[KIND_KEY] = v.kind.value
    data = _payload(v)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        nrrd.write(str(path), data, header, index_order="C")
    except OSError as e:
        _log.exception("NRRD write failed: %s", path)
        raise IoFailure(f"NRRD を書き込めません: {path}: {e}")
    return path
