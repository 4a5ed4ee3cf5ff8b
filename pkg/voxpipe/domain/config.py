"""実行設定（RunConfig）とその JSON ローダー。

各セクションは dataclass で、__post_init__ で自分自身を検証する。
未知のキーはどの階層でも InvalidConfig（設定ミスを黙って通さない）。
"""

import dataclasses
import json
import logging
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from voxpipe.domain.errors import InvalidConfig, IoFailure

_log = logging.getLogger("voxpipe.config")

# TAA とみなす直径倍率の下限（label=1 の条件）
TAA_RATIO_MIN = 1.5


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidConfig(msg)


@dataclass(frozen=True)
class PrepConfig:
    window_level: float = 50.0
    window_width: float = 400.0
    target_spacing: Tuple[float, float, float] = (2.0, 2.0, 3.0)
    crop_xy: int = 128
    fixed_z: Optional[int] = None

    def __post_init__(self):
        _require(self.window_width > 0, "prep.window_width は正の値")
        _require(self.crop_xy > 0, "prep.crop_xy は正の値")
        _require(all(s > 0 for s in self.target_spacing), "prep.target_spacing は正の値")
        _require(self.fixed_z is None or self.fixed_z > 0, "prep.fixed_z は正の値")


@dataclass(frozen=True)
class PhantomConfig:
    xy: int = 128
    spacing: Tuple[float, float, float] = (2.0, 2.0, 3.0)
    nz_range: Tuple[int, int] = (40, 96)
    base_radius_mm: float = 15.0
    wall_mm: float = 2.0
    arch_radius_mm: float = 35.0
    aneurysm_ratio_range: Tuple[float, float] = (1.5, 2.2)
    bulge_extent_mm: Tuple[float, float] = (30.0, 60.0)
    aneurysm_site: Optional[str] = None  # None なら ascending / arch / descending から抽選
    lumen_hu_contrast: float = 300.0
    lumen_hu_plain: float = 40.0
    wall_hu: float = 50.0
    background_hu: float = 30.0
    spine_hu: float = 700.0
    lung_hu: float = -800.0
    noise_sigma_ld: float = 40.0
    noise_sigma_std: float = 15.0
    jitter_mm: float = 4.0
    radius_variation: float = 0.10
    rescale_slope: float = 1.0
    rescale_intercept: float = -1024.0
    # LD, SD, CTA, AN, ANNC の順（コホートの群比率）
    group_mix: Tuple[int, int, int, int, int] = (150, 150, 150, 119, 18)
    n_total: int = 120

    def __post_init__(self):
        lo, hi = self.aneurysm_ratio_range
        _require(lo >= TAA_RATIO_MIN and hi >= lo, f"phantom.aneurysm_ratio_range は {TAA_RATIO_MIN} <= low <= high")
        _require(self.noise_sigma_ld >= 0 and self.noise_sigma_std >= 0, "phantom.noise_sigma は 0 以上")
        _require(all(c >= 0 for c in self.group_mix) and sum(self.group_mix) > 0, "phantom.group_mix は 0 以上（合計は正）")
        _require(self.xy > 0 and 1 <= self.nz_range[0] <= self.nz_range[1], "phantom の格子サイズが不正")
        _require(self.base_radius_mm > self.wall_mm > 0, "phantom.base_radius_mm > wall_mm > 0")
        _require(
            self.aneurysm_site in (None, "ascending", "arch", "descending"),
            f"phantom.aneurysm_site が不明: {self.aneurysm_site}",
        )


@dataclass(frozen=True)
class ModelConfig:
    xy: int = 128
    fixed_z: int = 128
    generator_channels: Tuple[int, ...] = (16, 32, 64, 128)
    residual_blocks: int = 2
    discriminator_channels: Tuple[int, ...] = (32, 64, 128, 128, 128)
    discriminator_blocks: Tuple[int, ...] = (1, 1, 2, 2, 2)
    deepaaa_channels: Tuple[int, ...] = (32, 64, 128, 256)
    unet_channels: Tuple[int, ...] = (32, 64, 128, 256)
    leaky_slope: float = 0.2
    norm: str = "instance"

    def __post_init__(self):
        _require(len(self.discriminator_channels) == len(self.discriminator_blocks), "model.discriminator_* の長さが不一致")
        _require(self.norm in ("instance", "none"), "model.norm は instance / none")
        _require(len(self.generator_channels) >= 2, "model.generator_channels は2段以上")
        _require(all(c > 0 for c in self.generator_channels + self.deepaaa_channels + self.unet_channels), "チャネル数は正")


@dataclass(frozen=True)
class HybridFocalParams:
    lam: float = 0.5
    delta: float = 0.6
    gamma: float = 0.5
    smooth: float = 1e-6
    focal_gamma: Optional[float] = None  # focal 項だけ別の gamma を使う場合（None なら gamma）

    def __post_init__(self):
        _require(0.0 <= self.lam <= 1.0, "loss.hybrid.lam は [0,1]")
        _require(0.0 <= self.delta <= 1.0, "loss.hybrid.delta は [0,1]")
        _require(self.gamma > 0, "loss.hybrid.gamma は正")
        _require(self.smooth > 0, "loss.hybrid.smooth は正")
        _require(self.focal_gamma is None or self.focal_gamma >= 0, "loss.hybrid.focal_gamma は 0 以上")

    @property
    def gamma_focal(self) -> float:
        return self.gamma if self.focal_gamma is None else self.focal_gamma


@dataclass(frozen=True)
class LossConfig:
    hybrid: HybridFocalParams = field(default_factory=HybridFocalParams)
    adversarial_weight: float = 5.0
    baseline_kind: str = "hybrid"  # DeepAAA / 3D U-Net の損失: hybrid / dice

    def __post_init__(self):
        _require(self.baseline_kind in ("hybrid", "dice"), "loss.baseline_kind は hybrid / dice")


@dataclass(frozen=True)
class OptimConfig:
    seg_lr: float = 1e-3
    cls_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-7
    t_mul: float = 1.5
    m_mul: float = 1.0
    alpha_min: float = 1e-6
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-5
    min_delta: float = 1e-4
    plateau_mode: str = "min"  # dev loss を監視（小さいほど良い）

    def __post_init__(self):
        _require(self.t_mul >= 1.0, "optim.t_mul は 1 以上")
        _require(self.alpha_min < self.seg_lr, "optim.alpha_min は seg_lr 未満")
        _require(0.0 < self.factor < 1.0, "optim.factor は (0,1)")
        _require(self.plateau_mode in ("min", "max"), "optim.plateau_mode は min / max")


@dataclass(frozen=True)
class AugmentConfig:
    rot_deg_max: float = 10.0
    flip_axes: Tuple[str, ...] = ("x", "y")
    flip_prob: float = 0.5
    gamma_range: Tuple[float, float] = (0.9, 1.1)
    gain_range: Tuple[float, float] = (0.9, 1.1)
    elastic_sigma: float = 2.0
    elastic_alpha: float = 1.0
    rotation: bool = True
    flip: bool = True
    intensity: bool = True
    elastic: bool = True

    def __post_init__(self):
        _require(all(a in ("x", "y", "z") for a in self.flip_axes), "train.augment.flip_axes は x / y / z")
        _require(0 < self.gamma_range[0] <= self.gamma_range[1], "train.augment.gamma_range は (0,∞)")
        _require(0 < self.gain_range[0] <= self.gain_range[1], "train.augment.gain_range は (0,∞)")
        _require(self.elastic_sigma > 0, "train.augment.elastic_sigma は正")
        _require(self.elastic_alpha >= 0, "train.augment.elastic_alpha は 0 以上")


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "deepvox"  # deepvox / deepaaa / unet3d
    seg_folds: int = 4
    cls_folds: int = 10
    seg_epochs: int = 300
    cls_epochs: int = 50
    schedule: str = "cosine"  # cosine（最終学習）/ plateau（探索的な学習）
    holdout_counts: Optional[Tuple[int, int, int, int, int]] = None
    subset: str = "all"  # all / contrast / non_contrast
    cls_mask_source: str = "predicted"  # predicted / ground_truth
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        _require(self.arch in ("deepvox", "deepaaa", "unet3d"), f"train.arch が不明: {self.arch}")
        _require(self.seg_folds >= 2 and self.cls_folds >= 2, "fold 数は 2 以上")
        _require(self.seg_epochs >= 0 and self.cls_epochs >= 0, "epoch 数は 0 以上")
        _require(self.schedule in ("cosine", "plateau"), "train.schedule は cosine / plateau")
        _require(self.subset in ("all", "contrast", "non_contrast"), "train.subset は all / contrast / non_contrast")
        _require(self.cls_mask_source in ("predicted", "ground_truth"), "train.cls_mask_source は predicted / ground_truth")
        _require(self.holdout_counts is None or all(c >= 0 for c in self.holdout_counts), "train.holdout_counts は 0 以上")


@dataclass(frozen=True)
class PostConfig:
    threshold: float = 0.5
    connectivity: int = 26
    removal_frac: float = 0.05

    def __post_init__(self):
        _require(self.connectivity in (6, 18, 26), "post.connectivity は 6 / 18 / 26")
        _require(0.0 <= self.threshold <= 1.0, "post.threshold は [0,1]")
        _require(0.0 <= self.removal_frac < 1.0, "post.removal_frac は [0,1)")


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 0.05
    aggregate: str = "case"  # case / fold
    montage_rows: int = 4
    montage_cols: int = 8

    def __post_init__(self):
        _require(self.aggregate in ("case", "fold"), "eval.aggregate は case / fold")
        _require(self.alpha == 0.05, "eval.alpha は 0.05 のみ（q 表は α=0.05）")
        _require(self.montage_rows > 0 and self.montage_cols > 0, "eval.montage_rows/cols は正")


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    post: PostConfig = field(default_factory=PostConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs"
    deterministic: bool = True


# -----------------------------------------------------------------------------
# JSON → dataclass
# -----------------------------------------------------------------------------
def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise InvalidConfig(f"{path}: オブジェクトが必要です")
        return _build(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise InvalidConfig(f"{path}: 配列が必要です")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise InvalidConfig(f"{path}: 要素数 {len(args)} が必要です（{len(value)} 個）")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise InvalidConfig(f"{path}: true/false が必要です")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfig(f"{path}: 整数が必要です")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"{path}: 数値が必要です")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise InvalidConfig(f"{path}: 文字列が必要です")
        return value
    return value


def _build(cls, data: Dict[str, Any], path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise InvalidConfig(f"未知の設定キー: {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def _parse_override(item: str) -> Tuple[list, Any]:
    if "=" not in item:
        raise InvalidConfig(f"--set は key=value 形式: {item}")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise InvalidConfig(f"--set のキーが空です: {item}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    for item in overrides:
        keys, value = _parse_override(item)
        node = data
        for k in keys[:-1]:
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise InvalidConfig(f"--set {'.'.join(keys)}: {k} はセクションではありません")
            node = child
        node[keys[-1]] = value
    return data


def run_config_from_dict(data: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data)


def load_run_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """JSON 設定を読み、--set の上書きを適用して RunConfig を返す"""
    overrides = list(overrides)
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise InvalidConfig(f"設定ファイルが見つかりません: {path}")
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"設定ファイルの JSON が不正です: {path}: {e}")
        except OSError as e:
            raise IoFailure(f"設定ファイルを読めません: {path}: {e}")
        if not isinstance(data, dict):
            raise InvalidConfig("設定ファイルのトップレベルはオブジェクト")
    data = apply_overrides(data, overrides)
    cfg = run_config_from_dict(data)
    _log.info("config loaded: path=%s overrides=%d", path, len(overrides))
    return cfg


def run_config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)


def save_run_config(cfg: RunConfig, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(run_config_to_dict(cfg), f, ensure_ascii=False, indent=2)
