"""
評価サービス
双線形補間・SRCNN・拡散モデル（ablation・ガイダンス重みスイープ）を評価し、結果表とPGMパネルを出力
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import RunConfig
from core.checkpoint import Checkpoint, load_checkpoint
from core.grids import export_pgm
from core.layers import bilinear_resize
from core.metrics import MetricsReport, compute_report
from core.preprocess import NormStats, TopoStats, from_model_range
from services.dataset_service import DatasetService, PreparedSplit, lr_consistency_residual
from services.sampling_service import SamplingService
from utils.errors import CheckpointError, ConfigurationError, UsageError
from utils.formatters import results_to_markdown, write_results
from utils.history_logger import HistoryLogger
from utils.logger import logger
from utils.validators import validate_checkpoint_compat

RESULTS_FILE = "results.csv"
REPORT_FILE = "results.md"


@dataclass
class MethodResult:
    """1手法の評価結果"""

    method: str
    report: MetricsReport
    predictions: List[np.ndarray]
    lr_residual: Optional[float] = None
    w: Optional[float] = None

    def row(self) -> Dict[str, object]:
        row: Dict[str, object] = {
            "method": self.method,
            "rmse": self.report.rmse,
            "corr": self.report.corr,
            "bias": self.report.bias,
            "n": self.report.n_samples,
            "mean_sample_corr": self.report.mean_sample_corr,
        }
        if self.lr_residual is not None:
            row["lr_residual"] = self.lr_residual
        if self.w is not None:
            row["w"] = self.w
        return row


@dataclass
class EvaluationRequest:
    """
    evaluate の入力

    checkpoint: U-NetまたはSRCNNのチェックポイント（Noneならモデルなし）
    no_topo_checkpoint: 地形なしU-Net（ablationの地形なし行に使用）
    """

    checkpoint: Optional[Path] = None
    baseline: Optional[str] = "bilinear"
    srcnn_checkpoint: Optional[Path] = None
    no_topo_checkpoint: Optional[Path] = None
    ablation: bool = False
    sweep_w: Sequence[float] = field(default_factory=list)
    limit: Optional[int] = None


class EvaluationService:
    """評価サービスクラス"""

    def __init__(self, config: RunConfig, dataset_service: Optional[DatasetService] = None,
                 history: Optional[HistoryLogger] = None):
        """
        初期化

        Args:
            config: 実行設定
            dataset_service: データセットサービス（Noneの場合は config から作成）
            history: 履歴ログ（Noneの場合は記録しない）
        """
        self.config = config
        self.dataset = dataset_service or DatasetService(config)
        self.history = history

    # ---------- 手法ごとの評価 ----------

    def _result(self, method: str, predictions: List[np.ndarray], data: PreparedSplit, norm: NormStats,
                w: Optional[float] = None) -> MethodResult:
        report = compute_report(predictions, data.hr_phys)
        residual = lr_consistency_residual(predictions, data.lr, norm)
        logger.info(
            f"[{method}] RMSE: {report.rmse:.4f}、相関: "
            f"{'N/A' if report.corr is None else f'{report.corr:.4f}'}、バイアス: {report.bias:.4f}、"
            f"LR整合残差: {residual:.4f}"
        )
        return MethodResult(method, report, predictions, residual, w)

    def evaluate_bilinear(self, data: PreparedSplit, norm: NormStats) -> MethodResult:
        """LRを双線形でHR次元へ拡大するだけのベースライン"""
        h, w = data.hr_size
        preds = [np.maximum(bilinear_resize(lr, h, w), 0.0).astype(np.float32) for lr in data.lr_phys]
        return self._result("bilinear", preds, data, norm)

    def evaluate_srcnn(self, ckpt: Checkpoint, data: PreparedSplit) -> MethodResult:
        """SRCNN（モデル値域で推論し mm/day に戻す）"""
        if ckpt.model_kind != "srcnn":
            raise CheckpointError(f"SRCNNのチェックポイントではありません: {ckpt.model_kind}")
        model = ckpt.build_model()
        batch = self.config.eval_batch_size
        outputs = [model.forward(data.lr_up[i:i + batch]) for i in range(0, len(data), batch)]
        u = np.concatenate(outputs, axis=0)
        preds = [from_model_range(u[i, 0], ckpt.norm_stats).astype(np.float32) for i in range(len(data))]
        return self._result("srcnn", preds, data, ckpt.norm_stats)

    def evaluate_diffusion(self, ckpt: Checkpoint, data: PreparedSplit, method: str,
                           enabled: Optional[bool] = None, w: Optional[float] = None) -> MethodResult:
        """拡散モデルでサンプリングして評価"""
        sampler = SamplingService(ckpt, self.config)
        g = sampler.guidance(w=w, enabled=enabled)
        preds = sampler.predict(data, g)
        return self._result(method, preds, data, ckpt.norm_stats, w=w)

    # ---------- 全体 ----------

    def _statistics(self, manifest, ckpt: Optional[Checkpoint]) -> Tuple[NormStats, TopoStats]:
        if ckpt is not None:
            return ckpt.norm_stats, ckpt.topo_stats
        if manifest.split("train"):
            return self.dataset.fit_statistics(manifest, "train")
        logger.warning("学習splitがないため評価splitから正規化統計量を推定します")
        return self.dataset.fit_statistics(manifest, "eval")

    def run(self, request: EvaluationRequest) -> List[MethodResult]:
        """
        評価を実行して結果表（CSV・Markdown）と任意のPGMパネルを書き出す

        Returns:
            手法ごとの結果（行の順序は結果表と同じ）

        Raises:
            UsageError: 評価する手法がない
            ConfigurationError: 評価splitが空
            CheckpointError / DimensionError: チェックポイントとデータの不整合
        """
        ckpt = load_checkpoint(request.checkpoint) if request.checkpoint else None
        srcnn_ckpt = load_checkpoint(request.srcnn_checkpoint) if request.srcnn_checkpoint else None
        no_topo_ckpt = load_checkpoint(request.no_topo_checkpoint) if request.no_topo_checkpoint else None
        if ckpt is not None and ckpt.model_kind == "srcnn":
            srcnn_ckpt, ckpt = ckpt, None
        if ckpt is None and srcnn_ckpt is None and request.baseline != "bilinear":
            raise UsageError("評価する手法がありません（--checkpoint か --baseline bilinear を指定してください）")
        if (request.ablation or request.sweep_w) and ckpt is None:
            raise UsageError("--ablation / --sweep-w にはU-Netのチェックポイントが必要です")

        manifest = self.dataset.load_manifest()
        norm, topo = self._statistics(manifest, ckpt or srcnn_ckpt)
        data = self.dataset.prepare_split(manifest, "eval", norm, topo).head(request.limit)
        for c in (ckpt, no_topo_ckpt):
            if c is not None:
                validate_checkpoint_compat(c, data.hr_size[0])
        logger.info(f"評価を開始します（評価: {len(data)}件、seed: {self.config.seed}）")

        results: List[MethodResult] = []
        if request.baseline == "bilinear" or request.ablation:
            results.append(self.evaluate_bilinear(data, norm))
        if srcnn_ckpt is not None:
            results.append(self.evaluate_srcnn(srcnn_ckpt, data))

        if ckpt is not None:
            if request.ablation:
                results.extend(self._ablation(ckpt, no_topo_ckpt, data))
            elif not request.sweep_w:
                results.append(self.evaluate_diffusion(ckpt, data, "diffusion"))
            for w in request.sweep_w:
                results.append(self.evaluate_diffusion(ckpt, data, f"diffusion-w{w:g}", enabled=True, w=float(w)))

        self._write(results, data, norm)
        return results

    def _ablation(self, ckpt: Checkpoint, no_topo_ckpt: Optional[Checkpoint],
                  data: PreparedSplit) -> List[MethodResult]:
        """{BGS on/off} × {地形 on/off} の4行"""
        if not ckpt.unet_config.use_topo:
            raise ConfigurationError("--ablation の --checkpoint は地形ありのU-Netである必要があります",
                                     key="model.use_topo")
        rows = []
        if no_topo_ckpt is not None:
            if no_topo_ckpt.unet_config is None or no_topo_ckpt.unet_config.use_topo:
                raise ConfigurationError("--no-topo-checkpoint は地形なしのU-Netである必要があります",
                                         key="model.use_topo")
            rows.append(self.evaluate_diffusion(no_topo_ckpt, data, "diffusion-no-bgs-no-topo", enabled=False))
        else:
            logger.warning("--no-topo-checkpoint がないため地形なしの行を省略します")
        rows.append(self.evaluate_diffusion(ckpt, data, "diffusion-no-bgs", enabled=False))
        if no_topo_ckpt is not None:
            rows.append(self.evaluate_diffusion(no_topo_ckpt, data, "diffusion-no-topo", enabled=True))
        rows.append(self.evaluate_diffusion(ckpt, data, "diffusion", enabled=True))
        return rows

    def _write(self, results: List[MethodResult], data: PreparedSplit, norm: NormStats) -> None:
        out_dir = self.config.output_path
        rows = [r.row() for r in results]
        write_results(rows, out_dir / RESULTS_FILE)
        with open(out_dir / REPORT_FILE, 'w', encoding='utf-8') as f:
            f.write(results_to_markdown(rows, title=f"評価結果（{len(data)}件）"))

        if self.config.write_pgm:
            panels = out_dir / "panels"
            for i, entry_id in enumerate(data.ids):
                export_pgm(data.lr_phys[i], panels / f"{entry_id}_lr.pgm", norm.vmax)
                export_pgm(data.hr_phys[i], panels / f"{entry_id}_hr.pgm", norm.vmax)
                for r in results:
                    export_pgm(r.predictions[i], panels / f"{entry_id}_{r.method}.pgm", norm.vmax)
            logger.info(f"PGMパネルを書き出しました: {panels}")

        if self.history is not None:
            for r in results:
                self.history.log_evaluation(r.method, r.report.rmse, r.report.corr, r.report.bias,
                                            r.report.n_samples)
