"""
評価指標
RMSE・相関・バイアス（物理単位 mm/day、評価セット全画素をプールして計算）
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import DimensionError


@dataclass
class MetricsReport:
    """
    評価結果

    corr は一方が定数場のとき None（未定義）。
    per_sample は (rmse, corr, bias) の画像ごとの値。
    """

    rmse: float
    corr: Optional[float]
    bias: float
    n_samples: int
    per_sample: List[Tuple[float, Optional[float], float]] = field(default_factory=list)

    @property
    def corr_defined(self) -> bool:
        return self.corr is not None

    @property
    def mean_sample_corr(self) -> Optional[float]:
        """画像ごとの相関の平均（定義されるものだけ）"""
        values = [c for _, c, _ in self.per_sample if c is not None]
        return float(np.mean(values)) if values else None


def _pool(pred: Sequence[np.ndarray], obs: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    pred = [np.asarray(getattr(p, "values", p), dtype=np.float64) for p in pred]
    obs = [np.asarray(getattr(o, "values", o), dtype=np.float64) for o in obs]
    if len(pred) != len(obs):
        raise DimensionError(f"予測 {len(pred)} 件と観測 {len(obs)} 件の数が一致しません", axes=("count",))
    if not pred:
        raise DimensionError("評価対象が空です", axes=("count",))
    for i, (p, o) in enumerate(zip(pred, obs)):
        if p.shape != o.shape:
            raise DimensionError(f"[{i}] 予測 {p.shape} と観測 {o.shape} の形状が一致しません",
                                 axes=("height", "width"))
    return np.concatenate([p.ravel() for p in pred]), np.concatenate([o.ravel() for o in obs])


def rmse(pred: Sequence[np.ndarray], obs: Sequence[np.ndarray]) -> float:
    """sqrt(mean((pred − obs)²))"""
    p, o = _pool(pred, obs)
    return float(np.sqrt(np.mean((p - o) ** 2)))


def pearson_corr(pred: Sequence[np.ndarray], obs: Sequence[np.ndarray]) -> Optional[float]:
    """プールした全画素のピアソン相関（どちらかが定数なら None）"""
    p, o = _pool(pred, obs)
    dp = p - p.mean()
    do = o - o.mean()
    sp = float(np.sqrt(np.sum(dp * dp)))
    so = float(np.sqrt(np.sum(do * do)))
    if sp == 0.0 or so == 0.0:
        return None
    return float(np.clip(np.sum(dp * do) / (sp * so), -1.0, 1.0))


def bias(pred: Sequence[np.ndarray], obs: Sequence[np.ndarray]) -> float:
    """mean(pred − obs)"""
    p, o = _pool(pred, obs)
    return float(np.mean(p - o))


def compute_report(pred: Sequence[np.ndarray], obs: Sequence[np.ndarray]) -> MetricsReport:
    """3指標のプール値と画像ごとの値をまとめる"""
    per_sample = [
        (rmse([p], [o]), pearson_corr([p], [o]), bias([p], [o])) for p, o in zip(pred, obs)
    ]
    return MetricsReport(
        rmse=rmse(pred, obs),
        corr=pearson_corr(pred, obs),
        bias=bias(pred, obs),
        n_samples=len(pred),
        per_sample=per_sample,
    )
