from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

import numpy as np


class Orientation(Enum):
    HFS = "HFS"  # head first-supine（基準）
    FFS = "FFS"
    HFP = "HFP"
    FFP = "FFP"


class VolumeKind(Enum):
    RAW = "raw"
    HU = "hu"
    WINDOWED = "windowed"


class Group(Enum):
    LD = "LD"
    SD = "SD"
    CTA = "CTA"
    AN = "AN"
    ANNC = "ANNC"

    @property
    def label(self) -> int:
        """AN / ANNC は TAA(1)、それ以外はコントロール(0)"""
        return 1 if self in (Group.AN, Group.ANNC) else 0

    @property
    def contrast(self) -> bool:
        return self in (Group.CTA, Group.AN)


# Group の列挙順。最大剰余法の同点処理などで使う
GROUP_ORDER: Tuple[Group, ...] = tuple(Group)


def _freeze(arr: np.ndarray) -> np.ndarray:
    # 構築後は不変。呼び出し側の配列は書き換えない
    if isinstance(arr, np.ndarray) and not arr.flags.writeable and arr.flags.c_contiguous:
        return arr
    a = np.array(arr, order="C", copy=True)
    a.setflags(write=False)
    return a


def _check_geometry(data: np.ndarray, spacing: Tuple[float, float, float]) -> None:
    if data.ndim != 3:
        raise ValueError(f"ボリュームは3次元である必要があります: ndim={data.ndim}")
    if any(n < 1 for n in data.shape):
        raise ValueError(f"各軸のボクセル数は1以上: shape={data.shape}")
    if len(spacing) != 3 or any(not (s > 0) for s in spacing):
        raise ValueError(f"spacing は正の3要素: {spacing}")


@dataclass(frozen=True, eq=False)
class Volume:
    """スカラー3Dボリューム。data の shape は (nz, ny, nx)（x が最速）。"""

    data: np.ndarray
    spacing: Tuple[float, float, float]
    orientation: Orientation = Orientation.HFS
    kind: VolumeKind = VolumeKind.RAW

    def __post_init__(self):
        _check_geometry(self.data, self.spacing)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "data", _freeze(self.data))
        if self.kind is VolumeKind.WINDOWED and self.data.size:
            if float(self.data.min()) < 0.0 or float(self.data.max()) > 1.0:
                raise ValueError("windowed ボリュームの値は [0,1] に収まる必要があります")

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def replace(self, **changes) -> "Volume":
        kw = dict(data=self.data, spacing=self.spacing, orientation=self.orientation, kind=self.kind)
        kw.update(changes)
        return Volume(**kw)


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Volume と幾何を共有する二値マスク（uint8, 値は {0,1} のみ）"""

    data: np.ndarray
    spacing: Tuple[float, float, float]
    orientation: Orientation = Orientation.HFS

    def __post_init__(self):
        _check_geometry(self.data, self.spacing)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if data.size and not np.isin(np.unique(data), (0, 1)).all():
                raise ValueError("マスクの値は 0/1 のみ")
            data = data.astype(np.uint8)
        elif data.size and int(data.max()) > 1:
            raise ValueError("マスクの値は 0/1 のみ")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def foreground(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def replace(self, **changes) -> "MaskVolume":
        kw = dict(data=self.data, spacing=self.spacing, orientation=self.orientation)
        kw.update(changes)
        return MaskVolume(**kw)


def same_geometry(a, b) -> bool:
    """Volume / MaskVolume の dims・spacing・orientation が完全一致するか"""
    return a.dims == b.dims and a.spacing == b.spacing and a.orientation == b.orientation


@dataclass(frozen=True)
class ScanMeta:
    rescale_slope: float
    rescale_intercept: float
    group: Group
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label は 0/1: {self.label}")


@dataclass(frozen=True, eq=False)
class CaseRecord:
    """ファントム1症例: raw ボリューム + GT マスク + ラベル"""

    case_id: str
    volume: Volume
    mask: MaskVolume
    meta: ScanMeta
    max_diameter_ratio: float
    seed: int = 0

    def __post_init__(self):
        if not self.case_id:
            raise ValueError("case_id は必須です")
        if not same_geometry(self.volume, self.mask):
            raise ValueError(f"{self.case_id}: ボリュームとマスクの幾何が一致しません")

    @property
    def label(self) -> int:
        return self.meta.label

    @property
    def group(self) -> Group:
        return self.meta.group


@dataclass(frozen=True)
class ManifestRow:
    case_id: str
    group: Group
    label: int
    nz: int
    ratio: float
    seed: int


@dataclass
class FoldSplit:
    k: int
    assignments: dict = field(default_factory=dict)  # case_id -> fold
    stratum: dict = field(default_factory=dict)  # case_id -> group

    def dev_ids(self, fold: int) -> list[str]:
        return [cid for cid, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [cid for cid, f in self.assignments.items() if f != fold]
