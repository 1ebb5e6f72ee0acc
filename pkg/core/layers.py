"""
ニューラルネットワーク層
順伝播と逆伝播を対にした手書き実装（自動微分グラフは持たない）

関数API（conv2d / bilinear_resize / group_norm / silu / relu / linear）は
ndarray を受け取り、*_forward が (出力, キャッシュ)、*_backward が入力・パラメータ勾配を返す。
Module クラスはこれらをパラメータ付きで束ね、denoiser側で逆順に backward を呼ぶ。
"""
import math
from typing import Dict, Optional, Tuple

import numpy as np

from config import Config
from core.tensor import Parameter
from utils.errors import ConfigurationError, DimensionError


# ==================== conv2d ====================

def _check_conv_args(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise DimensionError(f"conv2dの入力は4階である必要があります: {x.shape}", axes=("input",))
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(
            f"conv2dの重みは (out_c, in_c, k, k) である必要があります: {weight.shape}",
            axes=("weight.kernel_h", "weight.kernel_w"),
        )
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"入力チャネル数 {x.shape[1]} と重みの in_c {weight.shape[1]} が一致しません",
            axes=("input.channel", "weight.in_channel"),
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"バイアス形状 {bias.shape} が out_c {weight.shape[0]} と一致しません",
            axes=("bias", "weight.out_channel"),
        )
    if stride < 1:
        raise ConfigurationError(f"strideは1以上である必要があります: {stride}", key="stride")
    if padding < 0:
        raise ConfigurationError(f"paddingは0以上である必要があります: {padding}", key="padding")
    k = weight.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise DimensionError(
            f"カーネル {k} がパディング後の入力 {x.shape[2:]} より大きいです",
            axes=("input.height", "input.width"),
        )


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> Tuple[np.ndarray, int, int]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * k * k)
    return cols, oh, ow


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0
) -> Tuple[np.ndarray, tuple]:
    """
    2次元畳み込み（ゼロパディング）

    Args:
        x: 入力 (b, in_c, H, W)
        weight: 重み (out_c, in_c, k, k)
        bias: バイアス (out_c,)
        stride: ストライド（1以上）
        padding: ゼロパディング幅（0以上）

    Returns:
        (出力 (b, out_c, floor((H+2p-k)/s)+1, ...), 逆伝播用キャッシュ)

    Raises:
        DimensionError: 形状不一致
        ConfigurationError: stride / padding 不正
    """
    _check_conv_args(x, weight, bias, stride, padding)
    out_c, _, k, _ = weight.shape
    cols, oh, ow = _im2col(x, k, stride, padding)
    w_mat = weight.reshape(out_c, -1)
    out = cols @ w_mat.T + bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, out_c).transpose(0, 3, 1, 2))
    cache = (cols, x.shape, weight, stride, padding, oh, ow)
    return out, cache


def conv2d_backward(grad_out: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    conv2dの逆伝播

    Returns:
        (入力勾配, 重み勾配, バイアス勾配)
    """
    cols, x_shape, weight, stride, padding, oh, ow = cache
    b, c, h, w = x_shape
    out_c, _, k, _ = weight.shape

    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, out_c)
    d_weight = (g.T @ cols).reshape(weight.shape)
    d_bias = grad_out.sum(axis=(0, 2, 3))

    d_cols = (g @ weight.reshape(out_c, -1)).reshape(b, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    d_padded = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    # col2im: カーネル位置ごとに固定順で加算
    for i in range(k):
        for j in range(k):
            d_padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d_cols[:, :, i, j]
    d_x = np.ascontiguousarray(d_padded[:, :, padding:padding + h, padding:padding + w])
    return d_x, d_weight, d_bias


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """conv2d_forward の出力のみを返す版"""
    return conv2d_forward(x, weight, bias, stride, padding)[0]


# ==================== bilinear_resize ====================

def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """
    1軸分の双線形補間行列 (n_out, n_in)

    align_corners=False: s = (d + 0.5)·(n_in/n_out) − 0.5 を [0, n_in−1] にクランプ。
    """
    scale = n_in / n_out
    d = np.arange(n_out)
    s = np.clip((d + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = s - i0
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(matrix, (d, i0), 1.0 - frac)
    np.add.at(matrix, (d, i1), frac)
    return matrix


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """
    双線形リサンプリング（4階 (b, c, H, W) または2次元グリッド）

    計算は64bitで行い、入力のdtypeに戻す（定数場は定数場のまま）。

    Raises:
        ConfigurationError: 出力サイズが1未満
    """
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"出力サイズは1以上である必要があります: {out_h}x{out_w}", key="out_size")
    x = np.asarray(x)
    if x.ndim not in (2, 4):
        raise DimensionError(f"bilinear_resizeの入力は2階か4階です: {x.shape}", axes=("height", "width"))
    rows = resize_matrix(x.shape[-2], out_h)
    cols = resize_matrix(x.shape[-1], out_w)
    out = rows @ x.astype(np.float64) @ cols.T
    return out.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float32)


def bilinear_resize_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """bilinear_resizeの逆伝播（補間行列の転置を掛ける）"""
    rows = resize_matrix(in_h, grad_out.shape[-2])
    cols = resize_matrix(in_w, grad_out.shape[-1])
    return (rows.T @ grad_out.astype(np.float64) @ cols).astype(grad_out.dtype)


# ==================== group_norm ====================

def group_norm_forward(
    x: np.ndarray,
    groups: int,
    gain: np.ndarray,
    shift: np.ndarray,
    eps: float = Config.NORM_EPS
) -> Tuple[np.ndarray, tuple]:
    """
    グループ正規化

    (batch, group) ごとに平均0・分散1へ正規化した後、チャネルごとに gain / shift を適用。

    Raises:
        ConfigurationError: チャネル数がgroupsで割り切れない
    """
    b, c, h, w = x.shape
    if groups < 1 or c % groups != 0:
        raise ConfigurationError(f"チャネル数 {c} が groups={groups} で割り切れません", key="groups")
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"gain/shiftの形状がチャネル数 {c} と一致しません", axes=("gain", "shift"))
    xg = x.reshape(b, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((xg - mean) * inv_std).reshape(b, c, h, w)
    out = x_hat * gain[None, :, None, None] + shift[None, :, None, None]
    return out, (x_hat, inv_std, groups, gain)


def group_norm_backward(grad_out: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    group_normの逆伝播

    Returns:
        (入力勾配, gain勾配, shift勾配)
    """
    x_hat, inv_std, groups, gain = cache
    b, c, h, w = grad_out.shape
    d_gain = (grad_out * x_hat).sum(axis=(0, 2, 3))
    d_shift = grad_out.sum(axis=(0, 2, 3))
    d_xhat = (grad_out * gain[None, :, None, None]).reshape(b, groups, -1)
    xh = x_hat.reshape(b, groups, -1)
    d_x = inv_std * (
        d_xhat
        - d_xhat.mean(axis=2, keepdims=True)
        - xh * (d_xhat * xh).mean(axis=2, keepdims=True)
    )
    return d_x.reshape(b, c, h, w), d_gain, d_shift


def group_norm(x: np.ndarray, groups: int, gain: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return group_norm_forward(x, groups, gain, shift)[0]


# ==================== 活性化関数 ====================

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh表現はオーバーフローしない
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: np.ndarray) -> np.ndarray:
    """x·sigmoid(x)"""
    return x * _sigmoid(x)


def silu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return grad_out * s * (1.0 + x * (1.0 - s))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


# ==================== linear ====================

def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    アフィン変換 y = x·Wᵀ + b

    Args:
        x: 入力行列 (n, in)
        weight: 重み (out, in)
        bias: バイアス (out,)

    Raises:
        DimensionError: 内側の次元が一致しない
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linearの形状が一致しません（入力: {x.shape}、重み: {weight.shape}）",
            axes=("input.features", "weight.in_features"),
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"バイアス形状 {bias.shape} が不正です", axes=("bias",))
    return x @ weight.T + bias


def linear_backward(
    grad_out: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(入力勾配, 重み勾配, バイアス勾配)"""
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


# ==================== 最近傍2倍アップサンプル ====================

def upsample_nearest2x(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_nearest2x_backward(grad_out: np.ndarray) -> np.ndarray:
    b, c, h, w = grad_out.shape
    return grad_out.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ==================== Module ====================

def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """He初期化（正規分布、std = sqrt(2 / fan_in)）"""
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


class Module:
    """パラメータと子モジュールを名前付きで保持する基底クラス"""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}
        self._children: Dict[str, "Module"] = {}

    def register_parameter(self, name: str, values: np.ndarray) -> Parameter:
        param = Parameter(values)
        self._params[name] = param
        return param

    def register_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        """安定な名前（例: ``down.0.block.1.conv1.weight``）→ Parameter"""
        named = {f"{prefix}{name}": p for name, p in self._params.items()}
        for name, child in self._children.items():
            named.update(child.named_parameters(f"{prefix}{name}."))
        return named

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """全パラメータのdtypeを変更（勾配チェックの64bitシャドーモード用）"""
        for p in self.named_parameters().values():
            p.astype(dtype)
        return self

    @property
    def dtype(self) -> np.dtype:
        for p in self.named_parameters().values():
            return p.values.dtype
        return np.dtype(np.float32)


class Conv2d(Module):
    """畳み込み層（He初期化、zero_init=Trueで重み・バイアスとも0）"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
        zero_init: bool = False
    ):
        super().__init__()
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            weight = np.zeros(shape, dtype=np.float32)
        else:
            weight = he_normal(rng, shape, in_channels * kernel_size * kernel_size)
        self.weight = self.register_parameter("weight", weight)
        self.bias = self.register_parameter("bias", np.zeros(out_channels, dtype=np.float32))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = conv2d_forward(x, self.weight.values, self.bias.values, self.stride, self.padding)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        d_x, d_w, d_b = conv2d_backward(grad_out, self._cache)
        self.weight.grad += d_w
        self.bias.grad += d_b
        return d_x


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        if groups < 1 or channels % groups != 0:
            raise ConfigurationError(f"チャネル数 {channels} が groups={groups} で割り切れません", key="groups")
        self.groups = groups
        self.gain = self.register_parameter("gain", np.ones(channels, dtype=np.float32))
        self.shift = self.register_parameter("shift", np.zeros(channels, dtype=np.float32))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = group_norm_forward(x, self.groups, self.gain.values, self.shift.values)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        d_x, d_gain, d_shift = group_norm_backward(grad_out, self._cache)
        self.gain.grad += d_gain
        self.shift.grad += d_shift
        return d_x


class SiLU(Module):
    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return silu(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return silu_backward(grad_out, self._x)


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return relu(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return relu_backward(grad_out, self._x)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = self.register_parameter("weight", he_normal(rng, (out_features, in_features), in_features))
        self.bias = self.register_parameter("bias", np.zeros(out_features, dtype=np.float32))
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return linear(x, self.weight.values, self.bias.values)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        d_x, d_w, d_b = linear_backward(grad_out, self._x, self.weight.values)
        self.weight.grad += d_w
        self.bias.grad += d_b
        return d_x


class Downsample(Module):
    """3x3・stride 2 の畳み込みで解像度を1/2にする"""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = self.register_module("conv", Conv2d(channels, channels, 3, rng, stride=2, padding=1))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.conv.forward(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return self.conv.backward(grad_out)


class Upsample(Module):
    """最近傍2倍拡大 + 3x3畳み込み"""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = self.register_module("conv", Conv2d(channels, channels, 3, rng))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.conv.forward(upsample_nearest2x(x))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return upsample_nearest2x_backward(self.conv.backward(grad_out))
