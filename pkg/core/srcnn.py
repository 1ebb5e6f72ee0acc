"""
SRCNNベースライン
双線形で事前拡大したLRに 9×9/64 → 5×5/32 → 5×5/1 の3層畳み込みを適用する
"""
import numpy as np

from core.layers import Conv2d, Module, ReLU
from utils.errors import DimensionError, NonFiniteError
from utils.logger import logger


class SRCNN(Module):
    """3層の超解像CNN（サイズを保つパディング、1・2層目の後にReLU）"""

    def __init__(self, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv1 = self.register_module("conv1", Conv2d(1, 64, 9, rng))
        self.act1 = ReLU()
        self.conv2 = self.register_module("conv2", Conv2d(64, 32, 5, rng))
        self.act2 = ReLU()
        self.conv3 = self.register_module("conv3", Conv2d(32, 1, 5, rng))

    def forward(self, lr_up: np.ndarray) -> np.ndarray:
        """
        HR推定値（モデル値域）

        Args:
            lr_up: 双線形で拡大したLR (b, 1, H, W)

        Raises:
            DimensionError: 1チャネル4階でない入力
        """
        if lr_up.ndim != 4 or lr_up.shape[1] != 1:
            raise DimensionError(f"SRCNNの入力は (b, 1, H, W) である必要があります: {lr_up.shape}",
                                 axes=("input.channel",))
        x = lr_up.astype(self.dtype, copy=False)
        h = self.act1.forward(self.conv1.forward(x))
        h = self.act2.forward(self.conv2.forward(h))
        return self.conv3.forward(h).astype(lr_up.dtype, copy=False)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = self.conv3.backward(grad_out.astype(self.dtype))
        g = self.conv2.backward(self.act2.backward(g))
        return self.conv1.backward(self.act1.backward(g))


def srcnn_loss(model: SRCNN, lr_up: np.ndarray, hr: np.ndarray) -> float:
    """モデル値域でのMSE（逆伝播まで行う）"""
    pred = model.forward(lr_up)
    diff = pred - hr
    loss = float(np.mean(diff * diff, dtype=np.float64))
    if not np.isfinite(loss):
        raise NonFiniteError("SRCNNの損失が非有限です")
    model.backward((2.0 / diff.size) * diff)
    return loss


def build_srcnn(seed: int = 0) -> SRCNN:
    model = SRCNN(seed)
    logger.info(f"SRCNNを構築しました（パラメータ数: {model.num_parameters()}）")
    return model
