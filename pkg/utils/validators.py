"""
バリデーション関数
実行設定・目録・チェックポイント互換性の検証
"""
from collections import Counter
from typing import TYPE_CHECKING

from config import Config
from utils.errors import ConfigurationError, DimensionError
from utils.logger import logger

if TYPE_CHECKING:
    from config import RunConfig
    from core.checkpoint import Checkpoint
    from core.grids import DatasetManifest


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigurationError(message, key=key)


def validate_run_config(config: "RunConfig") -> bool:
    """
    実行設定のバリデーション

    Args:
        config: 実行設定

    Returns:
        バリデーション成功時はTrue

    Raises:
        ConfigurationError: 不正な設定（該当キーを含む）
    """
    factor = Config.DOWNSCALE_FACTOR

    # データ
    _require(config.size >= factor and config.size % factor == 0, "data.size",
             f"sizeは{factor}の倍数である必要があります: {config.size}")
    _require(config.count >= 1, "data.count", f"countは1以上である必要があります: {config.count}")
    _require(config.eval_count >= 0, "data.eval_count",
             f"eval_countは0以上である必要があります: {config.eval_count}")

    # 拡散過程
    _require(config.steps >= 2, "diffusion.steps", f"Tは2以上である必要があります: {config.steps}")
    _require(config.schedule in Config.SCHEDULE_KINDS, "diffusion.schedule",
             f"未知のスケジュールです: {config.schedule}（{Config.SCHEDULE_KINDS}）")

    # 学習
    _require(config.model_kind in Config.MODEL_KINDS, "model.kind",
             f"未知のモデル種別です: {config.model_kind}（{Config.MODEL_KINDS}）")
    _require(config.lr > 0, "train.lr", f"学習率は正である必要があります: {config.lr}")
    _require(config.weight_decay >= 0, "train.weight_decay",
             f"weight_decayは0以上である必要があります: {config.weight_decay}")
    _require(config.batch_size >= 1, "train.batch_size",
             f"バッチサイズは1以上である必要があります: {config.batch_size}")
    _require(config.train_steps >= 1, "train.steps",
             f"学習ステップ数は1以上である必要があります: {config.train_steps}")
    _require(config.checkpoint_every >= 0, "train.checkpoint_every",
             f"checkpoint_everyは0以上である必要があります: {config.checkpoint_every}")

    # 前処理・ガイダンス
    _require(0.0 < config.gamma <= 1.0, "preprocess.gamma",
             f"gammaは (0, 1] である必要があります: {config.gamma}")
    _require(config.guidance_w >= 0, "guidance.w", f"wは0以上である必要があります: {config.guidance_w}")
    _require(config.guidance_eps > 0, "guidance.eps",
             f"guidance.epsは正である必要があります: {config.guidance_eps}")
    _require(config.bias_space in Config.BIAS_SPACES, "guidance.bias_space",
             f"未知のbias_spaceです: {config.bias_space}（{Config.BIAS_SPACES}）")

    # モデル
    _require(config.depth >= 1, "model.depth", f"depthは1以上である必要があります: {config.depth}")
    _require(config.size % (2 ** config.depth) == 0, "model.depth",
             f"size {config.size} が 2^depth={2 ** config.depth} で割り切れません")
    _require(config.base_channels >= 2 and config.base_channels % 2 == 0, "model.base_channels",
             f"base_channelsは正の偶数である必要があります: {config.base_channels}")
    _require(config.groups >= 1 and config.base_channels % config.groups == 0, "model.groups",
             f"base_channels {config.base_channels} が groups {config.groups} で割り切れません")
    _require(config.time_embed_dim >= 1, "model.time_embed_dim",
             f"time_embed_dimは正である必要があります: {config.time_embed_dim}")

    # 評価・共通
    _require(config.eval_batch_size >= 1, "eval.batch_size",
             f"評価バッチサイズは1以上である必要があります: {config.eval_batch_size}")
    _require(config.seed >= 0, "seed", f"seedは0以上である必要があります: {config.seed}")

    logger.debug("実行設定のバリデーション成功")
    return True


def validate_manifest(manifest: "DatasetManifest") -> bool:
    """
    目録のバリデーション

    idの重複がない（=splitは互いに素）、全エントリがtrain/evalのどちらか、参照ファイルが存在する。

    Raises:
        ConfigurationError: バリデーション失敗時
    """
    from core.grids import SPLITS

    if not manifest.entries:
        raise ConfigurationError("目録にエントリがありません", key="data.manifest")

    duplicated = [i for i, n in Counter(e.id for e in manifest.entries).items() if n > 1]
    if duplicated:
        raise ConfigurationError(f"目録のidが重複しています: {duplicated[:5]}", key="data.manifest")

    for entry in manifest.entries:
        if entry.split not in SPLITS:
            raise ConfigurationError(f"エントリ '{entry.id}' のsplitが不正です: {entry.split}", key="data.manifest")
        for relative in (entry.hr_path, entry.topo_path):
            if not manifest.resolve(relative).exists():
                raise ConfigurationError(
                    f"エントリ '{entry.id}' のファイルが存在しません: {relative}", key="data.manifest"
                )

    logger.info(
        f"目録のバリデーション成功（train: {len(manifest.split('train'))}件、eval: {len(manifest.split('eval'))}件）"
    )
    return True


def require_split(manifest: "DatasetManifest", split: str) -> bool:
    """
    splitが空でないことを確認

    Raises:
        ConfigurationError: splitが空
    """
    if not manifest.split(split):
        raise ConfigurationError(f"目録の {split} splitが空です", key="data.manifest")
    return True


def validate_checkpoint_compat(ckpt: "Checkpoint", size: int) -> bool:
    """
    チェックポイントの構成が評価データの次元で使えるか確認

    Raises:
        DimensionError: HRの次元が 2^depth で割り切れない
    """
    if ckpt.unet_config is not None:
        factor = 2 ** ckpt.unet_config.depth
        if size % factor:
            raise DimensionError(
                f"データのsize {size} がチェックポイントの 2^depth={factor} で割り切れません",
                axes=("height", "width"),
            )
    return True
