from abc import ABC, abstractmethod
from typing import Dict, List

import numpy as np

from voxpipe.domain.models import CaseRecord, ManifestRow, MaskVolume, ScanMeta, Volume


# 症例（スキャン + マスク + メタ）の保存先はここを通す
class CaseRepository(ABC):
    @abstractmethod
    def add_case(self, rec: CaseRecord) -> None: ...
    @abstractmethod
    def get_case(self, case_id: str) -> CaseRecord: ...
    @abstractmethod
    def read_volume(self, case_id: str) -> Volume: ...
    @abstractmethod
    def read_mask(self, case_id: str) -> MaskVolume: ...
    @abstractmethod
    def read_meta(self, case_id: str) -> ScanMeta: ...
    @abstractmethod
    def case_ids(self) -> List[str]: ...
    @abstractmethod
    def write_manifest(self, rows: List[ManifestRow]) -> None: ...
    @abstractmethod
    def read_manifest(self) -> List[ManifestRow]: ...


# 学習済みパラメータ（名前付き配列）の保存先
class CheckpointRepository(ABC):
    @abstractmethod
    def save(self, name: str, arch: str, state: Dict[str, np.ndarray]) -> None: ...
    @abstractmethod
    def load(self, name: str, arch: str) -> Dict[str, np.ndarray]: ...
    @abstractmethod
    def exists(self, name: str) -> bool: ...
    @abstractmethod
    def names(self) -> List[str]: ...
