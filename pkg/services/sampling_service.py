"""
サンプリングサービス
チェックポイントのU-Netで目録のエントリをバッチ生成し、フィールド・PGMを書き出す
"""
import zlib
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import RunConfig
from core.checkpoint import Checkpoint
from core.diffusion import GuidanceConfig, NoiseSchedule, sample
from core.grids import export_pgm, save_field
from core.layers import Module
from core.preprocess import from_model_range
from services.dataset_service import PreparedSplit
from utils.errors import CheckpointError
from utils.logger import logger


def entry_seed(seed: int, entry_id: str) -> int:
    """エントリごとのサンプリングシード（seed と id から決まる）"""
    return zlib.crc32(f"{seed}:{entry_id}".encode("utf-8"))


class SamplingService:
    """サンプリングサービスクラス"""

    def __init__(self, checkpoint: Checkpoint, config: RunConfig):
        """
        初期化

        Args:
            checkpoint: U-Netのチェックポイント
            config: 実行設定（ガイダンス・シード・評価バッチサイズ）

        Raises:
            CheckpointError: U-Net以外のチェックポイント
        """
        if checkpoint.model_kind != "unet":
            raise CheckpointError(f"サンプリングにはU-Netのチェックポイントが必要です: {checkpoint.model_kind}")
        self.checkpoint = checkpoint
        self.config = config
        self.model: Module = checkpoint.build_model()
        self.schedule: NoiseSchedule = checkpoint.build_schedule()

    @property
    def use_topo(self) -> bool:
        return self.checkpoint.unet_config.use_topo

    def guidance(self, w: Optional[float] = None, enabled: Optional[bool] = None) -> GuidanceConfig:
        """設定値から GuidanceConfig を作る（w / enabled は上書き可）"""
        return GuidanceConfig(
            w=self.config.guidance_w if w is None else w,
            eps_num=self.config.guidance_eps,
            enabled=self.config.guidance_enabled if enabled is None else enabled,
            bias_space=self.config.bias_space,
        )

    def predict_model_range(self, data: PreparedSplit, g: GuidanceConfig) -> np.ndarray:
        """
        全エントリを生成（モデル値域、id順）

        エントリごとのシードを使うため、結果はバッチ分割や並び順に依存しない。
        """
        batch = self.config.eval_batch_size
        outputs = []
        for start in range(0, len(data), batch):
            index = slice(start, start + batch)
            seeds = [entry_seed(self.config.seed, i) for i in data.ids[index]]
            outputs.append(sample(
                self.model,
                data.condition(index, use_topo=self.use_topo),
                self.schedule,
                g,
                seed=seeds,
                deterministic_reverse=self.config.deterministic_reverse,
                progress=self.config.progress,
            ))
        return np.concatenate(outputs, axis=0)

    def predict(self, data: PreparedSplit, g: GuidanceConfig) -> List[np.ndarray]:
        """全エントリを生成して mm/day に戻す"""
        logger.info(f"{len(data)}件をサンプリングします（BGS: {g.enabled}、w: {g.w}、bias_space: {g.bias_space}）")
        y0 = self.predict_model_range(data, g)
        overshoot = int(np.count_nonzero(np.abs(y0) > 1.0))
        if overshoot:
            logger.warning(f"値域 [−1, 1] の外に出たサンプル値 {overshoot} 個をクランプします（全 {y0.size} 個）")
        return [from_model_range(y0[i, 0], self.checkpoint.norm_stats).astype(np.float32) for i in range(len(data))]

    def write_outputs(self, ids: Sequence[str], predictions: Sequence[np.ndarray], out_dir: Path,
                      write_pgm: bool = False) -> Dict[str, Path]:
        """
        予測をフィールドファイル（と任意でPGM）として書き出す

        Returns:
            id → フィールドファイルのパス
        """
        out_dir = Path(out_dir)
        written = {}
        for entry_id, pred in zip(ids, predictions):
            path = out_dir / "fields" / f"{entry_id}.pfld"
            save_field(pred, path)
            written[entry_id] = path
            if write_pgm:
                export_pgm(pred, out_dir / "pgm" / f"{entry_id}.pgm", self.checkpoint.norm_stats.vmax)
        logger.info(f"{len(written)}件の予測を書き出しました: {out_dir}")
        return written
