"""voxpipe 共通の例外クラス。

- 入力・設定の不正は ValueError 系（dataclass の __post_init__ と同じ扱い）
- ファイル入出力や実行時の失敗は RuntimeError 系（importer の致命的エラーと同じ扱い）
CLI はこの区別で終了コード（2 / 1）を決める。
"""


class VoxPipeError(Exception):
    """voxpipe が送出する例外の基底クラス"""


# --- 設定・入力検証（exit 2 系） -------------------------------------------
class ConfigError(VoxPipeError, ValueError):
    """設定ファイル・CLI フラグの不正"""


class InvalidConfig(ConfigError):
    pass


# train モジュールの呼び名に合わせた別名
ConfigInvalid = InvalidConfig


# --- NRRD ---------------------------------------------------------------------
class NrrdFormatError(VoxPipeError, ValueError):
    """受け付ける NRRD サブセットから外れたファイル"""


class UnsupportedHeaderField(NrrdFormatError):
    pass


class MalformedHeader(NrrdFormatError):
    pass


class PayloadSizeMismatch(NrrdFormatError):
    pass


class NonBinaryMaskValues(NrrdFormatError):
    pass


# --- 実行時（exit 1 系） --------------------------------------------------------
class IoFailure(VoxPipeError, RuntimeError):
    pass


class CheckpointMismatch(VoxPipeError, RuntimeError):
    pass


# --- ボリューム・前処理 --------------------------------------------------------
class WrongKind(VoxPipeError, ValueError):
    """Volume.kind が操作の前提と違う"""


class UnknownOrientationCode(VoxPipeError, ValueError):
    pass


class DegenerateOutput(VoxPipeError, ValueError):
    pass


class GeometryMismatch(VoxPipeError, ValueError):
    pass


# --- テンソル・ネットワーク -----------------------------------------------------
class ShapeMismatch(VoxPipeError, ValueError):
    pass


class NonScalarLoss(VoxPipeError, ValueError):
    pass


class WrongInputShape(VoxPipeError, ValueError):
    pass


class LayerNotFound(VoxPipeError, KeyError):
    pass


# --- 学習データ分割 -------------------------------------------------------------
class EmptyStratum(VoxPipeError, ValueError):
    pass


class InsufficientGroup(VoxPipeError, ValueError):
    pass


class MissingClass(VoxPipeError, ValueError):
    pass


# --- 評価 -----------------------------------------------------------------------
class KOutOfTableRange(VoxPipeError, ValueError):
    pass


class DegenerateInput(VoxPipeError, ValueError):
    pass


class SliceIndexError(VoxPipeError, IndexError):
    pass
