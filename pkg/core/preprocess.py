"""
前処理
ガンマ補正と、物理単位（mm/day）⇔ モデル値域 [−1, 1] の可逆変換
"""
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from config import Config
from utils.errors import ConfigurationError, DomainError
from utils.logger import logger


@dataclass(frozen=True)
class NormStats:
    """
    正規化統計量

    vmax_gamma は学習splitの a^γ の最大値（HRで推定し、LR・HRで共有する）。
    """

    gamma: float = Config.GAMMA
    vmax_gamma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gammaは (0, 1] である必要があります: {self.gamma}", key="preprocess.gamma")
        if not self.vmax_gamma > 0.0:
            raise ConfigurationError(f"vmax_gammaは正である必要があります: {self.vmax_gamma}")

    @property
    def vmax(self) -> float:
        """物理単位での上限 (vmax_gamma)^(1/γ)"""
        return float(self.vmax_gamma ** (1.0 / self.gamma))


@dataclass(frozen=True)
class TopoStats:
    """地形の正規化統計量（学習splitの平均・標準偏差）"""

    mean: float = 0.0
    std: float = 1.0

    def normalize(self, topo: np.ndarray) -> np.ndarray:
        return (np.asarray(topo, dtype=np.float64) - self.mean) / self.std


def gamma_correct(values: np.ndarray, gamma: float = Config.GAMMA) -> np.ndarray:
    """
    ガンマ補正 â = a^γ（単調増加）

    Raises:
        DomainError: 負の入力
        ConfigurationError: gamma <= 0
    """
    if not gamma > 0:
        raise ConfigurationError(f"gammaは正である必要があります: {gamma}", key="preprocess.gamma")
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise DomainError(f"ガンマ補正の入力に負値があります（最小値: {float(values.min())}）")
    return np.power(values, gamma)


def to_model_range(corrected: np.ndarray, stats: NormStats) -> np.ndarray:
    """u = 2·(â / vmax_gamma) − 1 を [−1, 1] にクランプ"""
    u = 2.0 * (np.asarray(corrected, dtype=np.float64) / stats.vmax_gamma) - 1.0
    return np.clip(u, -1.0, 1.0)


def from_model_range(u: np.ndarray, stats: NormStats) -> np.ndarray:
    """
    モデル値域から mm/day へ戻す

    u を [−1, 1] にクランプ → â = (u+1)/2·vmax_gamma → a = â^(1/γ)
    """
    u = np.asarray(u, dtype=np.float64)
    overshoot = int(np.count_nonzero(np.abs(u) > 1.0))
    if overshoot:
        logger.debug(f"値域外のサンプル値 {overshoot} 個をクランプしました")
    corrected = (np.clip(u, -1.0, 1.0) + 1.0) / 2.0 * stats.vmax_gamma
    return np.power(corrected, 1.0 / stats.gamma)


def encode(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """mm/day → モデル値域（gamma_correct と to_model_range の合成）"""
    return to_model_range(gamma_correct(values, stats.gamma), stats)


def fit_stats(train_fields: Iterable[np.ndarray], gamma: float = Config.GAMMA) -> NormStats:
    """
    学習splitから NormStats を推定（vmax_gamma = max a^γ）

    Raises:
        ConfigurationError: 全画素が0（正規化が退化する）
    """
    vmax = 0.0
    for values in train_fields:
        values = np.asarray(getattr(values, "values", values), dtype=np.float64)
        if values.size:
            vmax = max(vmax, float(values.max()))
    if not vmax > 0.0:
        raise ConfigurationError("学習splitが全て0のため正規化できません", key="preprocess")
    stats = NormStats(gamma=gamma, vmax_gamma=float(vmax ** gamma))
    logger.info(f"正規化統計量を推定しました（gamma: {gamma}、vmax_gamma: {stats.vmax_gamma:.6f}）")
    return stats


def fit_topo_stats(topo_fields: Iterable[np.ndarray]) -> TopoStats:
    """地形の平均・標準偏差（定数地形の場合は std=1）"""
    stacked = np.stack([np.asarray(getattr(t, "values", t), dtype=np.float64) for t in topo_fields])
    std = float(stacked.std())
    return TopoStats(mean=float(stacked.mean()), std=std if std > 0 else 1.0)
