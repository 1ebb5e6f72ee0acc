"""
例外定義
ダウンスケーリングエンジン全体で使う例外クラス
"""
from typing import Optional, Sequence


class DimensionError(ValueError):
    """テンソル・グリッドの形状不一致"""

    def __init__(self, message: str, axes: Optional[Sequence[str]] = None):
        self.axes = tuple(axes or ())
        if self.axes:
            message = f"{message}（軸: {', '.join(self.axes)}）"
        super().__init__(message)


class ConfigurationError(ValueError):
    """設定値・前提条件の違反"""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key is not None and key not in message:
            message = f"[{key}] {message}"
        super().__init__(message)


class DomainError(ValueError):
    """定義域外の入力（負の降水量など）"""


class FieldFormatError(ValueError):
    """フィールドファイルのマジック・バージョン不正"""


class TruncatedFieldError(FieldFormatError):
    """フィールドファイルのペイロード不足"""


class DimensionOverflowError(FieldFormatError):
    """フィールドファイルの次元が不正（0・上限超過）"""


class CheckpointError(ValueError):
    """チェックポイントの書式不正・必須キー欠落"""


class NonFiniteError(RuntimeError):
    """NaN/Infの検出"""

    def __init__(self, message: str, **context):
        self.context = context
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message}（{detail}）"
        super().__init__(message)


class TrainingDivergedError(RuntimeError):
    """学習の発散"""


class UsageError(Exception):
    """CLIの使い方の誤り"""
