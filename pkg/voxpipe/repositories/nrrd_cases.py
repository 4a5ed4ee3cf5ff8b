import logging
from pathlib import Path
from typing import List

from voxpipe.domain.errors import IoFailure, NonBinaryMaskValues, WrongKind
from voxpipe.domain.models import CaseRecord, ManifestRow, MaskVolume, ScanMeta, Volume
from voxpipe.io_importers.case_importers import MANIFEST_NAME, ManifestImporter, write_manifest_csv
from voxpipe.io_importers.meta_json import meta_path_for, read_meta, write_meta
from voxpipe.io_importers.nrrd_io import read_nrrd, write_nrrd
from voxpipe.repositories.base import CaseRepository

_log = logging.getLogger("voxpipe.io.cases")


# 1ディレクトリ = 1コホート。<id>.nrrd / <id>.mask.nrrd / <id>.meta.json / manifest.csv
class NrrdCaseRepository(CaseRepository):
    def __init__(self, root: str = "data", encoding: str = "gzip"):
        self.root = Path(root)
        self.encoding = encoding
        self.warnings: List[str] = []

    def volume_path(self, case_id: str) -> Path:
        return self.root / f"{case_id}.nrrd"

    def mask_path(self, case_id: str) -> Path:
        return self.root / f"{case_id}.mask.nrrd"

    def add_case(self, rec: CaseRecord) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoFailure(f"ディレクトリを作れません: {self.root}: {e}")
        write_nrrd(rec.volume, self.volume_path(rec.case_id), self.encoding)
        write_nrrd(rec.mask, self.mask_path(rec.case_id), self.encoding)
        write_meta(rec.meta, meta_path_for(self.root, rec.case_id))

    def read_volume(self, case_id: str) -> Volume:
        v = read_nrrd(self.volume_path(case_id))
        if not isinstance(v, Volume):
            raise WrongKind(f"{case_id}: スキャンが uint8 マスクとして保存されています")
        return v

    def read_mask(self, case_id: str) -> MaskVolume:
        m = read_nrrd(self.mask_path(case_id))
        if not isinstance(m, MaskVolume):
            raise NonBinaryMaskValues(f"{case_id}: マスクが uint8 ではありません")
        return m

    def read_meta(self, case_id: str) -> ScanMeta:
        return read_meta(meta_path_for(self.root, case_id))

    def get_case(self, case_id: str) -> CaseRecord:
        ratio, seed = 1.0, 0
        for row in self.read_manifest():
            if row.case_id == case_id:
                ratio, seed = row.ratio, row.seed
                break
        return CaseRecord(
            case_id=case_id,
            volume=self.read_volume(case_id),
            mask=self.read_mask(case_id),
            meta=self.read_meta(case_id),
            max_diameter_ratio=ratio,
            seed=seed,
        )

    def case_ids(self) -> List[str]:
        return [r.case_id for r in self.read_manifest()]

    def write_manifest(self, rows: List[ManifestRow]) -> None:
        write_manifest_csv(rows, self.root / MANIFEST_NAME)
        _log.info("manifest written: %s (%d rows)", self.root / MANIFEST_NAME, len(rows))

    def read_manifest(self, progress_cb=None, cancel_cb=None) -> List[ManifestRow]:
        importer = ManifestImporter(self.root)
        rows = importer.import_manifest(progress_cb, cancel_cb)
        self.warnings = importer.warnings
        return rows
