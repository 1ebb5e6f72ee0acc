"""
テンソル
(batch, channel, height, width) の4階テンソルと学習パラメータの入れ物
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from utils.errors import DimensionError, NonFiniteError

FLOAT_DTYPES = (np.float32, np.float64)


def _as_float_array(values, dtype=None) -> np.ndarray:
    array = np.asarray(values)
    if dtype is not None:
        return np.ascontiguousarray(array, dtype=dtype)
    if array.dtype not in FLOAT_DTYPES:
        array = array.astype(np.float32)
    return np.ascontiguousarray(array)


@dataclass
class Tensor:
    """
    4階テンソル（値 + 同形状の勾配バッファ）

    values は行優先 (b, c, h, w)。学習・推論は32bit、勾配チェックは64bitで扱う。
    """

    values: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = _as_float_array(self.values)
        if self.values.ndim != 4:
            raise DimensionError(
                f"Tensorは4階である必要があります（現在: {self.values.ndim}階）",
                axes=("batch", "channel", "height", "width"),
            )
        if any(d <= 0 for d in self.values.shape):
            raise DimensionError(f"Tensorの各次元は正である必要があります: {self.values.shape}")
        if self.grad is not None and self.grad.shape != self.values.shape:
            raise DimensionError(
                f"勾配の形状が値と一致しません（値: {self.values.shape}、勾配: {self.grad.shape}）"
            )

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.values.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

@dataclass
class Parameter:
    """名前付きパラメータ（任意階数）。grad は backward で加算される。"""

    values: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = _as_float_array(self.values)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def astype(self, dtype) -> None:
        self.values = self.values.astype(dtype)
        self.grad = self.grad.astype(dtype)


def check_finite(values: np.ndarray, what: str = "array", **context) -> None:
    """
    NaN/Infを検出したら例外

    Raises:
        NonFiniteError: 非有限値を含む場合
    """
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NonFiniteError(f"{what} に非有限値が {bad} 個含まれています", **context)
