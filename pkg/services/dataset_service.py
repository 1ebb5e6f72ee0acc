"""
データセットサービス
合成データの生成と、目録からモデル値域の配列を組み立てる処理を管理
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from config import RunConfig
from core.diffusion import ConditionInput
from core.grids import DatasetManifest, gen_synthetic_dataset, load_manifest, pairs_by_id
from core.layers import bilinear_resize
from core.preprocess import NormStats, TopoStats, encode, fit_stats, fit_topo_stats
from utils.logger import logger
from utils.validators import require_split


@dataclass
class PreparedSplit:
    """
    1つのsplitを配列化したもの（id順）

    hr / lr / lr_up はモデル値域の (n, 1, ·, ·) float32、
    hr_phys / lr_phys は評価用の物理単位（mm/day）。
    """

    ids: List[str]
    hr: np.ndarray
    lr: np.ndarray
    lr_up: np.ndarray
    topo_norm: np.ndarray
    hr_phys: List[np.ndarray] = field(default_factory=list)
    lr_phys: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def hr_size(self) -> Tuple[int, int]:
        return self.hr.shape[2], self.hr.shape[3]

    def condition(self, index=slice(None), use_topo: bool = True) -> ConditionInput:
        """index のサンプルの条件入力"""
        return ConditionInput(
            lr_up=self.lr_up[index],
            topo_norm=self.topo_norm[index] if use_topo else None,
            use_topo=use_topo,
            lr=self.lr[index],
        )

    def head(self, limit: Optional[int]) -> "PreparedSplit":
        """先頭 limit 件（Noneならそのまま）"""
        if limit is None or limit >= len(self.ids):
            return self
        return PreparedSplit(
            ids=self.ids[:limit],
            hr=self.hr[:limit],
            lr=self.lr[:limit],
            lr_up=self.lr_up[:limit],
            topo_norm=self.topo_norm[:limit],
            hr_phys=self.hr_phys[:limit],
            lr_phys=self.lr_phys[:limit],
        )


class DatasetService:
    """データセットサービスクラス"""

    def __init__(self, config: RunConfig):
        """
        初期化

        Args:
            config: 実行設定
        """
        self.config = config

    @property
    def manifest_path(self) -> Path:
        if self.config.manifest:
            return Path(self.config.manifest)
        return Path(self.config.data_dir) / "manifest.tsv"

    def generate(self, out_dir: Optional[Path] = None) -> DatasetManifest:
        """
        合成データセットを生成

        Args:
            out_dir: 出力先（Noneの場合は data.dir）

        Returns:
            生成した目録
        """
        out_dir = Path(out_dir) if out_dir is not None else Path(self.config.data_dir)
        return gen_synthetic_dataset(
            seed=self.config.seed,
            count=self.config.count,
            size=self.config.size,
            out_dir=out_dir,
            eval_count=self.config.eval_count,
        )

    def load_manifest(self) -> DatasetManifest:
        try:
            return load_manifest(self.manifest_path)
        except OSError as e:
            logger.error(f"目録を読み込めません: {self.manifest_path}: {str(e)}")
            raise

    def fit_statistics(self, manifest: DatasetManifest, split: str = "train") -> Tuple[NormStats, TopoStats]:
        """
        正規化統計量（降水・地形）を split から推定

        Raises:
            ConfigurationError: splitが空・全て0
        """
        require_split(manifest, split)
        pairs = pairs_by_id(manifest, split)
        norm = fit_stats((p.hr.values for p in pairs.values()), gamma=self.config.gamma)
        topo = fit_topo_stats(p.topo.values for p in pairs.values())
        logger.info(f"地形の正規化統計量（平均: {topo.mean:.3f}、標準偏差: {topo.std:.3f}）")
        return norm, topo

    def prepare_split(
        self,
        manifest: DatasetManifest,
        split: str,
        norm: NormStats,
        topo_stats: TopoStats
    ) -> PreparedSplit:
        """
        split の全ペアをモデル値域の配列へ変換

        lr_up はモデル値域のLRを双線形でHR次元へ拡大したもの。

        Raises:
            ConfigurationError: splitが空
            DimensionError: ペアの次元が揃っていない
        """
        require_split(manifest, split)
        pairs = pairs_by_id(manifest, split)
        ids = list(pairs.keys())
        hr_phys = [p.hr.values for p in pairs.values()]
        lr_phys = [p.lr.values for p in pairs.values()]

        hr = np.stack([encode(v, norm) for v in hr_phys])[:, None]
        lr = np.stack([encode(v, norm) for v in lr_phys])[:, None]
        lr_up = bilinear_resize(lr, hr.shape[2], hr.shape[3])
        topo = np.stack([topo_stats.normalize(p.topo.values) for p in pairs.values()])[:, None]

        logger.info(f"{split} splitを配列化しました（{len(ids)}件、HR: {hr.shape[2]}x{hr.shape[3]}）")
        return PreparedSplit(
            ids=ids,
            hr=hr.astype(np.float32),
            lr=lr.astype(np.float32),
            lr_up=lr_up.astype(np.float32),
            topo_norm=topo.astype(np.float32),
            hr_phys=hr_phys,
            lr_phys=lr_phys,
        )


def lr_consistency_residual(pred_phys: List[np.ndarray], lr_model: np.ndarray, norm: NormStats) -> float:
    """
    LR整合残差: サンプルごとの ‖bilinear(encode(pred), LR次元) − x‖₂ の平均（モデル値域）

    Args:
        pred_phys: 予測（mm/day、id順）
        lr_model: モデル値域のLR (n, 1, h, w)
        norm: 正規化統計量
    """
    pred = np.stack([encode(p, norm) for p in pred_phys])[:, None]
    down = bilinear_resize(pred, lr_model.shape[2], lr_model.shape[3])
    residual = (down - lr_model.astype(np.float64)).reshape(len(pred_phys), -1)
    return float(np.mean(np.sqrt(np.sum(residual * residual, axis=1))))
