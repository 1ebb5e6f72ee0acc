"""
学習サービス
U-Net（ε予測）とSRCNNの学習ループ、損失ログ、定期チェックポイントを管理
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from config import Config, RunConfig
from core.checkpoint import Checkpoint, load_checkpoint, model_state, save_checkpoint, load_parameters
from core.diffusion import build_schedule, training_loss
from core.layers import Module
from core.optimizer import AdamW
from core.preprocess import NormStats, TopoStats
from core.srcnn import build_srcnn, srcnn_loss
from core.unet import UNetConfig, build_unet
from services.dataset_service import DatasetService, PreparedSplit
from utils.errors import CheckpointError, TrainingDivergedError
from utils.formatters import read_loss_log, write_loss_log
from utils.history_logger import HistoryLogger
from utils.logger import logger

CHECKPOINT_FILE = "checkpoint.rsck"
LOSS_LOG_FILE = "loss_log.csv"


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    losses: List[float]
    checkpoint_path: Path
    loss_log_path: Path
    periodic_checkpoints: List[Path] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


class DivergenceMonitor:
    """損失が初期値の factor 倍を patience ステップ連続で超えたら発散とみなす"""

    def __init__(self, factor: float = Config.DIVERGENCE_FACTOR, patience: int = Config.DIVERGENCE_PATIENCE):
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.streak = 0

    def update(self, step: int, loss: float) -> None:
        """
        Raises:
            TrainingDivergedError: 発散を検知
        """
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * self.initial:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience:
            raise TrainingDivergedError(
                f"学習が発散しました（step: {step}、損失: {loss:.4g}、初期損失: {self.initial:.4g}、"
                f"{self.patience}ステップ連続で{self.factor:g}倍超）"
            )


class TrainingService:
    """学習サービスクラス"""

    def __init__(self, config: RunConfig, dataset_service: Optional[DatasetService] = None,
                 history: Optional[HistoryLogger] = None):
        """
        初期化

        Args:
            config: 検証済みの実行設定
            dataset_service: データセットサービス（Noneの場合は config から作成）
            history: 履歴ログ（Noneの場合は記録しない）
        """
        self.config = config
        self.dataset = dataset_service or DatasetService(config)
        self.history = history

    # ---------- モデル ----------

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            base_channels=self.config.base_channels,
            depth=self.config.depth,
            time_embed_dim=self.config.time_embed_dim,
            in_channels=3 if self.config.use_topo else 2,
            groups=self.config.groups,
        )

    def build_model(self) -> Module:
        if self.config.model_kind == "srcnn":
            return build_srcnn(self.config.seed)
        return build_unet(self.unet_config(), self.config.seed)

    # ---------- 1ステップ ----------

    def _step_rng(self, step: int) -> np.random.Generator:
        # ステップごとに独立したストリーム（再開しても同じ乱数列）
        return np.random.default_rng([self.config.seed, step])

    def _batch_index(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(n, size=self.config.batch_size, replace=n < self.config.batch_size)

    def _unet_step(self, model, data: PreparedSplit, schedule, step: int) -> float:
        rng = self._step_rng(step)
        idx = self._batch_index(rng, len(data))
        t = rng.integers(1, schedule.T + 1, size=idx.size)
        eps = rng.standard_normal(data.hr[idx].shape).astype(np.float32)
        cond = data.condition(idx, use_topo=self.config.use_topo)
        return training_loss(model, data.hr[idx], cond, t, eps, schedule, batch_id=step)

    def _srcnn_step(self, model, data: PreparedSplit, step: int) -> float:
        idx = self._batch_index(self._step_rng(step), len(data))
        return srcnn_loss(model, data.lr_up[idx], data.hr[idx])

    # ---------- 学習 ----------

    def _checkpoint(self, model: Module, optimizer: AdamW, norm: NormStats, topo: TopoStats,
                    step: int, data_seed: int) -> Checkpoint:
        moments = {name: (s.m.astype(np.float32), s.v.astype(np.float32)) for name, s in optimizer.states.items()}
        return Checkpoint(
            model_kind=self.config.model_kind,
            params=model_state(model),
            norm_stats=norm,
            topo_stats=topo,
            schedule={"kind": self.config.schedule, "T": self.config.steps},
            unet_config=self.unet_config() if self.config.model_kind == "unet" else None,
            optimizer=moments,
            step=step,
            seed_lineage={"seed": self.config.seed, "data_seed": data_seed},
            run_config=self.config.to_dict(),
        )

    def train(self, resume: Optional[Path] = None) -> TrainingResult:
        """
        学習を実行

        Args:
            resume: 再開するチェックポイント（Noneなら初期化から）

        Returns:
            学習結果（最終チェックポイント、損失列）

        Raises:
            TrainingDivergedError: 発散
            NonFiniteError: 損失・勾配が非有限
        """
        cfg = self.config
        out_dir = cfg.output_path
        out_dir.mkdir(parents=True, exist_ok=True)
        logger.info(
            f"学習を開始します（model: {cfg.model_kind}、steps: {cfg.train_steps}、batch: {cfg.batch_size}、"
            f"lr: {cfg.lr}、T: {cfg.steps}、topo: {cfg.use_topo}、seed: {cfg.seed}）"
        )

        manifest = self.dataset.load_manifest()
        norm, topo = self.dataset.fit_statistics(manifest, "train")
        data = self.dataset.prepare_split(manifest, "train", norm, topo)
        schedule = build_schedule(cfg.steps, cfg.schedule)

        model = self.build_model()
        optimizer = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
        params = model.named_parameters()
        start = 0
        if resume is not None:
            start = self._restore(Path(resume), model, optimizer)

        records: List[Dict[str, float]] = []
        log_path = out_dir / LOSS_LOG_FILE
        if start and log_path.exists():
            # 再開前の行を引き継ぐ
            previous = read_loss_log(log_path)
            records = previous[previous["step"] <= start].to_dict("records")
        losses: List[float] = []
        periodic: List[Path] = []
        monitor = DivergenceMonitor()
        bar = tqdm(range(start + 1, cfg.train_steps + 1), desc="train", disable=not cfg.progress)
        try:
            for step in bar:
                model.zero_grad()
                if cfg.model_kind == "srcnn":
                    loss = self._srcnn_step(model, data, step)
                else:
                    loss = self._unet_step(model, data, schedule, step)
                optimizer.step(params)
                losses.append(loss)
                records.append({"step": step, "loss": loss, "lr": cfg.lr})
                monitor.update(step, loss)
                if cfg.progress:
                    bar.set_postfix(loss=f"{loss:.4f}")
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.train_steps:
                    path = out_dir / f"checkpoint_step{step:06d}.rsck"
                    save_checkpoint(self._checkpoint(model, optimizer, norm, topo, step, manifest.seed), path)
                    periodic.append(path)
                    write_loss_log(records, log_path)
        except Exception as e:
            logger.error(f"学習に失敗しました: {str(e)}")
            if records:
                write_loss_log(records, log_path)
            raise

        ckpt = self._checkpoint(model, optimizer, norm, topo, cfg.train_steps, manifest.seed)
        ckpt_path = out_dir / CHECKPOINT_FILE
        save_checkpoint(ckpt, ckpt_path)
        write_loss_log(records, log_path)

        result = TrainingResult(ckpt, losses, ckpt_path, log_path, periodic)
        logger.info(f"学習が完了しました（最終損失: {result.final_loss:.4f}）")
        if self.history is not None:
            self.history.log_training(cfg.model_kind, cfg.train_steps, result.final_loss, cfg.seed, str(out_dir))
        return result

    def _restore(self, path: Path, model: Module, optimizer: AdamW) -> int:
        ckpt = load_checkpoint(path)
        if ckpt.model_kind != self.config.model_kind:
            raise CheckpointError(f"モデル種別が一致しません（チェックポイント: {ckpt.model_kind}、設定: {self.config.model_kind}）")
        load_parameters(model, ckpt.params)
        if ckpt.optimizer:
            optimizer.restore(ckpt.optimizer, ckpt.step)
        logger.info(f"step {ckpt.step} から学習を再開します: {path}")
        return ckpt.step
