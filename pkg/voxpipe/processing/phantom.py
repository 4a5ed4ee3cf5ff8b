"""合成胸部 CT ファントム（非公開データセットの代わりの学習・検証用データ）。

大動脈は「上行 → 弓部（半円）→ 下行」の candy-cane 形の中心線に沿った管で、
TAA 群では紡錘形の瘤（ガウス型の半径プロファイル）を1か所だけ加える。
背景には脊椎（高 HU の円柱）と肺（低 HU の楕円体）を置き、
強度だけで大動脈を抜き出す手法が誤検出するようにしている。
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from voxpipe.domain.config import PhantomConfig
from voxpipe.domain.errors import InvalidConfig
from voxpipe.domain.models import GROUP_ORDER, CaseRecord, Group, ManifestRow, MaskVolume, ScanMeta, Volume, VolumeKind
from voxpipe.domain.seeding import derive_seed, rng_for

_log = logging.getLogger("voxpipe.phantom")

_STEP_MM = 1.0  # 中心線のサンプリング間隔
_ASCENDING_MM = 45.0
_ARCH_ANGLE = math.radians(60.0)  # 弓部の面の向き（xy 平面内）


@dataclass(frozen=True, eq=False)
class PhantomGeometry:
    signed_distance: np.ndarray  # 管表面までの符号付き距離 [mm]（内側が負）
    tube: np.ndarray  # bool, 内腔 + 壁
    lumen: np.ndarray  # bool
    ratio: float  # 瘤の直径倍率（コントロールは 1.0）
    site: Optional[str]
    bulge_slices: Tuple[int, int]  # 瘤の半値幅に入る中心線点の Z 範囲 [start, stop)
    bulge_center_mm: Optional[Tuple[float, float, float]]
    ascending_xy: Tuple[float, float]
    descending_xy: Tuple[float, float]


def _smooth_profile(rng: np.random.Generator, s: np.ndarray, length: float, n_waves: int = 3) -> np.ndarray:
    """[-1, 1] に収まる滑らかな1次元プロファイル"""
    amps = rng.uniform(0.3, 1.0, n_waves)
    freqs = rng.uniform(0.5, 2.0, n_waves)
    phases = rng.uniform(0.0, 2 * math.pi, n_waves)
    t = s / max(length, 1e-6)
    prof = sum(a * np.sin(2 * math.pi * f * t + p) for a, f, p in zip(amps, freqs, phases))
    return prof / amps.sum()


def group_counts(n_total: int, mix: Sequence[int]) -> Tuple[int, ...]:
    """最大剰余法で n_total を mix の比率に配分する（同点は Group 順）"""
    den = int(sum(mix))
    if den <= 0:
        raise InvalidConfig("group_mix の合計は正である必要があります")
    base = [n_total * int(w) // den for w in mix]
    rem = [n_total * int(w) % den for w in mix]
    left = n_total - sum(base)
    order = sorted(range(len(mix)), key=lambda i: (-rem[i], i))
    for i in order[:left]:
        base[i] += 1
    return tuple(base)


def _centerline(cfg: PhantomConfig, rng: np.random.Generator, nz: int):
    """中心線の点列 (x, y, z)[mm] と弧長、区間境界を返す"""
    sx, sy, sz = cfg.spacing
    ext_x, ext_y, ext_z = cfg.xy * sx, cfg.xy * sy, nz * sz
    cx, cy = ext_x / 2.0, ext_y / 2.0
    r_arch = cfg.arch_radius_mm
    u = np.array([math.cos(_ARCH_ANGLE), math.sin(_ARCH_ANGLE)])
    asc_xy = np.array([cx, cy]) - r_arch * u
    desc_xy = np.array([cx, cy]) + r_arch * u
    z_arch = ext_z - r_arch - 1.2 * cfg.base_radius_mm - 3.0

    pts = []
    # 上行: 基部から弓部の始まりまで
    n_asc = max(int(_ASCENDING_MM / _STEP_MM), 1)
    for z in np.linspace(z_arch - _ASCENDING_MM, z_arch, n_asc, endpoint=False):
        pts.append((asc_xy[0], asc_xy[1], z))
    s_arch0 = len(pts) * _STEP_MM
    # 弓部: 半円
    n_arch = max(int(math.pi * r_arch / _STEP_MM), 2)
    for phi in np.linspace(0.0, math.pi, n_arch, endpoint=False):
        xy = np.array([cx, cy]) - r_arch * math.cos(phi) * u
        pts.append((xy[0], xy[1], z_arch + r_arch * math.sin(phi)))
    s_desc0 = len(pts) * _STEP_MM
    # 下行: グリッドの下端を少し越えるまで
    n_desc = max(int((z_arch + cfg.base_radius_mm) / _STEP_MM), 1)
    for z in np.linspace(z_arch, -cfg.base_radius_mm, n_desc):
        pts.append((desc_xy[0], desc_xy[1], z))
    pts = np.asarray(pts, dtype=np.float64)
    s = np.arange(len(pts), dtype=np.float64) * _STEP_MM

    if cfg.jitter_mm > 0:
        length = float(s[-1])
        pts[:, 0] += cfg.jitter_mm * _smooth_profile(rng, s, length)
        pts[:, 1] += cfg.jitter_mm * _smooth_profile(rng, s, length)
    return pts, s, (s_arch0, s_desc0), z_arch, tuple(asc_xy), tuple(desc_xy)


def _bulge_center(site: str, s: np.ndarray, bounds, z_arch: float, extent: float, rng) -> float:
    s_arch0, s_desc0 = bounds
    if site == "ascending":
        return s_arch0 / 2.0
    if site == "arch":
        return s_arch0 + (s_desc0 - s_arch0) * rng.uniform(0.4, 0.6)
    # 下行: グリッド内に収まる位置（z が大きいほど s は小さい）
    z_hi = z_arch - extent / 2.0
    z_lo = max(z_hi - 40.0, extent / 2.0)
    z0 = rng.uniform(min(z_lo, z_hi), z_hi) if z_hi > z_lo else z_hi
    return s_desc0 + (z_arch - z0)


def render_geometry(cfg: PhantomConfig, group: Group, seed: int, nz: Optional[int] = None) -> PhantomGeometry:
    """乱数で中心線と半径を決め、管を符号付き距離場としてラスタライズする"""
    rng = rng_for(seed, "geometry")
    if nz is None:
        nz = int(rng.integers(cfg.nz_range[0], cfg.nz_range[1] + 1))
    sx, sy, sz = cfg.spacing
    pts, s, bounds, z_arch, asc_xy, desc_xy = _centerline(cfg, rng, nz)
    length = float(s[-1])

    radius = cfg.base_radius_mm * (1.0 + cfg.radius_variation * _smooth_profile(rng, s, length))
    ratio, site, center = 1.0, None, None
    bulge = np.ones_like(s)
    if group.label == 1:
        lo, hi = cfg.aneurysm_ratio_range
        ratio = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        site = cfg.aneurysm_site or str(rng.choice(["ascending", "arch", "descending"]))
        extent = float(rng.uniform(*cfg.bulge_extent_mm))
        s0 = _bulge_center(site, s, bounds, z_arch, extent, rng)
        sigma = extent / 4.0
        bulge = 1.0 + (ratio - 1.0) * np.exp(-((s - s0) ** 2) / (2.0 * sigma**2))
        i0 = int(np.argmin(np.abs(s - s0)))
        center = tuple(float(c) for c in pts[i0])
    r = radius * bulge

    # 各中心線点の球（半径 r）のバウンディングボックス内だけ距離を更新する
    zz = (np.arange(nz) + 0.5) * sz
    yy = (np.arange(cfg.xy) + 0.5) * sy
    xx = (np.arange(cfg.xy) + 0.5) * sx
    sd = np.full((nz, cfg.xy, cfg.xy), np.inf, dtype=np.float64)
    for (px, py, pz), ri in zip(pts, r):
        reach = ri + 1.0
        z0, z1 = np.searchsorted(zz, [pz - reach, pz + reach])
        y0, y1 = np.searchsorted(yy, [py - reach, py + reach])
        x0, x1 = np.searchsorted(xx, [px - reach, px + reach])
        if z0 >= z1 or y0 >= y1 or x0 >= x1:
            continue
        d = np.sqrt(
            (zz[z0:z1, None, None] - pz) ** 2 + (yy[None, y0:y1, None] - py) ** 2 + (xx[None, None, x0:x1] - px) ** 2
        )
        np.minimum(sd[z0:z1, y0:y1, x0:x1], d - ri, out=sd[z0:z1, y0:y1, x0:x1])

    tube = sd <= 0.0
    lumen = sd <= -cfg.wall_mm

    bulge_slices = (0, 0)
    if site is not None:
        hot = bulge - 1.0 >= 0.5 * (ratio - 1.0)
        zs = pts[hot, 2]
        if zs.size:
            k0 = int(np.clip(np.floor(zs.min() / sz), 0, nz - 1))
            k1 = int(np.clip(np.floor(zs.max() / sz) + 1, 1, nz))
            bulge_slices = (k0, k1)
    return PhantomGeometry(
        signed_distance=sd.astype(np.float32),
        tube=tube,
        lumen=lumen,
        ratio=ratio,
        site=site,
        bulge_slices=bulge_slices,
        bulge_center_mm=center,
        ascending_xy=asc_xy,
        descending_xy=desc_xy,
    )


def _distractors(cfg: PhantomConfig, geom: PhantomGeometry, nz: int) -> np.ndarray:
    """背景 HU: 軟部組織 + 肺（楕円体）+ 脊椎（下行大動脈の背側の円柱）"""
    sx, sy, sz = cfg.spacing
    ext_x, ext_y, ext_z = cfg.xy * sx, cfg.xy * sy, nz * sz
    zz = ((np.arange(nz) + 0.5) * sz)[:, None, None]
    yy = ((np.arange(cfg.xy) + 0.5) * sy)[None, :, None]
    xx = ((np.arange(cfg.xy) + 0.5) * sx)[None, None, :]
    hu = np.full((nz, cfg.xy, cfg.xy), cfg.background_hu, dtype=np.float64)

    for side in (-1.0, 1.0):
        cx = ext_x / 2.0 + side * 0.3 * ext_x
        inside = ((xx - cx) / (0.18 * ext_x)) ** 2 + ((yy - ext_y / 2.0) / (0.3 * ext_y)) ** 2 + (
            (zz - ext_z / 2.0) / (0.6 * ext_z)
        ) ** 2 <= 1.0
        hu = np.where(inside, cfg.lung_hu, hu)

    dx, dy = geom.descending_xy
    spine_y = dy + cfg.base_radius_mm + 25.0
    spine = (xx - dx) ** 2 + (yy - spine_y) ** 2 <= 12.0**2
    hu = np.where(np.broadcast_to(spine, hu.shape), cfg.spine_hu, hu)
    return hu


def noise_sigma(cfg: PhantomConfig, group: Group) -> float:
    return cfg.noise_sigma_ld if group is Group.LD else cfg.noise_sigma_std


def lumen_hu(cfg: PhantomConfig, group: Group) -> float:
    return cfg.lumen_hu_contrast if group.contrast else cfg.lumen_hu_plain


def make_phantom(cfg: PhantomConfig, group: Group, seed: int, case_id: Optional[str] = None, nz: Optional[int] = None) -> CaseRecord:
    """同じ (cfg, group, seed) なら常に同じ症例を返す"""
    if not isinstance(group, Group):
        raise InvalidConfig(f"group が不正: {group}")
    geom = render_geometry(cfg, group, seed, nz)
    nz = geom.tube.shape[0]
    hu = _distractors(cfg, geom, nz)
    hu = np.where(geom.tube, cfg.wall_hu, hu)
    hu = np.where(geom.lumen, lumen_hu(cfg, group), hu)

    sigma = noise_sigma(cfg, group)
    if sigma > 0:
        hu = hu + rng_for(seed, "noise").normal(0.0, sigma, size=hu.shape)

    raw = np.rint((hu - cfg.rescale_intercept) / cfg.rescale_slope)
    raw = np.clip(raw, -32768, 32767).astype(np.int16)
    spacing = tuple(float(s) for s in cfg.spacing)
    meta = ScanMeta(cfg.rescale_slope, cfg.rescale_intercept, group, group.label)
    volume = Volume(data=raw, spacing=spacing, kind=VolumeKind.RAW)
    mask = MaskVolume(data=geom.tube.astype(np.uint8), spacing=spacing)
    cid = case_id or f"{group.value.lower()}_{seed}"
    return CaseRecord(case_id=cid, volume=volume, mask=mask, meta=meta, max_diameter_ratio=geom.ratio, seed=seed)


def manifest_row(rec: CaseRecord) -> ManifestRow:
    return ManifestRow(
        case_id=rec.case_id,
        group=rec.group,
        label=rec.label,
        nz=rec.volume.dims[2],
        ratio=round(rec.max_diameter_ratio, 6),
        seed=rec.seed,
    )


def make_cohort(cfg: PhantomConfig, n_total: int, seed: int, repo=None, progress_cb=None) -> Tuple[List[CaseRecord], List[ManifestRow]]:
    """group_mix の比率で n_total 症例を作る。repo があれば NRRD + メタ + manifest を書き出す"""
    if n_total < 5:
        raise InvalidConfig(f"n_total は 5 以上: {n_total}")
    counts = group_counts(n_total, cfg.group_mix)
    _log.info("make_cohort start: n=%d counts=%s", n_total, dict(zip((g.value for g in GROUP_ORDER), counts)))
    records: List[CaseRecord] = []
    idx = 0
    for group, count in zip(GROUP_ORDER, counts):
        for _ in range(count):
            case_seed = derive_seed(seed, "case", idx)
            rec = make_phantom(cfg, group, case_seed, case_id=f"{group.value.lower()}_{idx:04d}")
            records.append(rec)
            if repo is not None:
                repo.add_case(rec)
            idx += 1
            if progress_cb:
                progress_cb(idx)
    rows = [manifest_row(r) for r in records]
    if repo is not None:
        repo.write_manifest(rows)
    _log.info("make_cohort done: n=%d", len(records))
    return records, rows


def simulate_annotators(mask: MaskVolume, n: int = 3, seed: int = 0, n_slabs: int = 3) -> List[MaskVolume]:
    """アノテーター間のばらつきを模した n 枚のマスク。

    各アノテーターは Z 方向のランダムな区間ごとに境界を1ボクセル膨張/収縮させる。
    """
    struct = ndimage.generate_binary_structure(3, 1)
    base = mask.data.astype(bool)
    nz = base.shape[0]
    out = []
    for a in range(n):
        rng = rng_for(seed, "annotator", a)
        data = base.copy()
        grown = ndimage.binary_dilation(base, structure=struct)
        shrunk = ndimage.binary_erosion(base, structure=struct)
        for _ in range(n_slabs):
            width = int(rng.integers(max(1, nz // 10), max(2, nz // 4) + 1))
            z0 = int(rng.integers(0, max(1, nz - width + 1)))
            src = grown if rng.random() < 0.5 else shrunk
            data[z0 : z0 + width] = src[z0 : z0 + width]
        out.append(mask.replace(data=data.astype(np.uint8)))
    return out
