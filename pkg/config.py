"""
設定ファイル
プロジェクト定数（Config）と実行設定（RunConfig）
"""
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from utils.errors import ConfigurationError

# config.envファイルの読み込み（明示的にファイル名指定）
BASE_DIR = Path(__file__).parent
load_dotenv(BASE_DIR / 'config.env')


class Config:
    """システム設定"""

    # ==================== プロジェクト設定 ====================
    BASE_DIR = Path(__file__).parent
    LOG_DIR = Path(os.getenv("DOWNSCALE_LOG_DIR", str(BASE_DIR / "logs")))
    CONFIGS_DIR = BASE_DIR / "configs"
    DEFAULT_RUN_CONFIG = CONFIGS_DIR / "desk_scale.cfg"

    # ==================== ログ設定 ====================
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE = "system.log"
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # ==================== 固定値 ====================
    GAMMA = 0.15                 # ガンマ補正の指数
    LEARNING_RATE = 3e-4         # AdamW学習率
    GUIDANCE_W = 100.0           # BGSのガイダンス重み
    DOWNSCALE_FACTOR = 8         # HR/LRの解像度比

    # ==================== デスクスケール既定値 ====================
    DEFAULT_SIZE = 32
    DEFAULT_T = 200
    DEFAULT_BATCH_SIZE = 16
    DEFAULT_TRAIN_STEPS = 3000

    # ==================== AdamW既定値 ====================
    ADAM_BETA1 = 0.9
    ADAM_BETA2 = 0.999
    ADAM_EPS = 1e-8
    WEIGHT_DECAY = 0.0

    # ==================== 数値設定 ====================
    NORM_EPS = 1e-5              # group_normの分散安定化項
    GUIDANCE_EPS = 1e-8          # ‖y_t − x‖₂の下限
    MAX_BETA = 0.999

    # ==================== 発散検知 ====================
    DIVERGENCE_FACTOR = 10.0     # 初期損失の何倍で発散とみなすか
    DIVERGENCE_PATIENCE = 100    # 連続ステップ数

    # ==================== 選択肢 ====================
    SCHEDULE_KINDS = ["linear", "cosine"]
    BIAS_SPACES = ["hr", "lr"]
    MODEL_KINDS = ["unet", "srcnn"]

    @classmethod
    def get_summary(cls) -> dict:
        """設定のサマリーを取得"""
        return {
            "gamma": cls.GAMMA,
            "learning_rate": cls.LEARNING_RATE,
            "guidance_w": cls.GUIDANCE_W,
            "downscale_factor": cls.DOWNSCALE_FACTOR,
            "default_size": cls.DEFAULT_SIZE,
            "default_T": cls.DEFAULT_T,
            "log_level": cls.LOG_LEVEL
        }


def _parse_bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise ConfigurationError(f"真偽値として解釈できません: {raw!r}", key=key)


@dataclass
class RunConfig:
    """
    1回の実行（データ生成・学習・サンプリング・評価）に関わる全設定

    各フィールドはドット区切りのキー（例: ``guidance.w``）に対応する。
    """

    # データ
    data_dir: str = "data"
    manifest: str = ""
    size: int = Config.DEFAULT_SIZE
    count: int = 512
    eval_count: int = 64
    # 拡散過程
    steps: int = Config.DEFAULT_T
    schedule: str = "linear"
    deterministic_reverse: bool = False
    # 学習
    model_kind: str = "unet"
    lr: float = Config.LEARNING_RATE
    weight_decay: float = Config.WEIGHT_DECAY
    batch_size: int = Config.DEFAULT_BATCH_SIZE
    train_steps: int = Config.DEFAULT_TRAIN_STEPS
    checkpoint_every: int = 500
    # 前処理
    gamma: float = Config.GAMMA
    # ガイダンス
    guidance_w: float = Config.GUIDANCE_W
    guidance_enabled: bool = True
    guidance_eps: float = Config.GUIDANCE_EPS
    bias_space: str = "hr"
    # モデル
    use_topo: bool = True
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 128
    groups: int = 8
    # 評価
    eval_batch_size: int = 16
    write_pgm: bool = False
    # 共通
    seed: int = 0
    output_dir: str = "runs/default"
    progress: bool = True

    # ドット区切りキー → フィールド名
    KEY_MAP = {
        "data.dir": "data_dir",
        "data.manifest": "manifest",
        "data.size": "size",
        "data.count": "count",
        "data.eval_count": "eval_count",
        "diffusion.steps": "steps",
        "diffusion.schedule": "schedule",
        "diffusion.deterministic_reverse": "deterministic_reverse",
        "model.kind": "model_kind",
        "model.use_topo": "use_topo",
        "model.base_channels": "base_channels",
        "model.depth": "depth",
        "model.time_embed_dim": "time_embed_dim",
        "model.groups": "groups",
        "train.lr": "lr",
        "train.weight_decay": "weight_decay",
        "train.batch_size": "batch_size",
        "train.steps": "train_steps",
        "train.checkpoint_every": "checkpoint_every",
        "preprocess.gamma": "gamma",
        "guidance.w": "guidance_w",
        "guidance.enabled": "guidance_enabled",
        "guidance.eps": "guidance_eps",
        "guidance.bias_space": "bias_space",
        "eval.batch_size": "eval_batch_size",
        "eval.write_pgm": "write_pgm",
        "seed": "seed",
        "output_dir": "output_dir",
        "progress": "progress",
    }

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        """
        ``key = value`` 形式の設定ファイルを読み込む

        Args:
            path: 設定ファイルのパス

        Returns:
            読み込んだRunConfig

        Raises:
            ConfigurationError: 書式不正・未知のキー
        """
        config = cls()
        with open(path, 'r', encoding='utf-8') as f:
            for lineno, line in enumerate(f, start=1):
                stripped = line.split('#', 1)[0].strip()
                if not stripped:
                    continue
                if '=' not in stripped:
                    raise ConfigurationError(
                        f"{path}:{lineno} に '=' がありません: {line.strip()!r}"
                    )
                key, value = stripped.split('=', 1)
                config.set(key.strip(), value.strip())
        return config

    def set(self, key: str, raw: str) -> None:
        """
        ドット区切りキーで1項目を設定する（文字列から型変換）

        Raises:
            ConfigurationError: 未知のキー・型変換失敗
        """
        attr = self.KEY_MAP.get(key)
        if attr is None:
            raise ConfigurationError(f"未知の設定キーです: {key}", key=key)
        current = getattr(self, attr)
        try:
            if isinstance(current, bool):
                value: Any = _parse_bool(key, raw)
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
        except ValueError as e:
            raise ConfigurationError(f"値を解釈できません: {key}={raw!r} ({e})", key=key) from e
        setattr(self, attr, value)

    def apply_overrides(self, overrides: Optional[List[str]]) -> "RunConfig":
        """``--set key=value`` の上書きを適用する"""
        for item in overrides or []:
            if '=' not in item:
                raise ConfigurationError(f"--set は key=value 形式で指定してください: {item!r}")
            key, value = item.split('=', 1)
            self.set(key.strip(), value.strip())
        return self

    def validate(self) -> "RunConfig":
        """全設定を検証する（不正時は該当キーを含むConfigurationError）"""
        from utils.validators import validate_run_config
        validate_run_config(self)
        return self

    def to_dict(self) -> Dict[str, Any]:
        """ドット区切りキーの辞書に変換"""
        return {key: getattr(self, attr) for key, attr in self.KEY_MAP.items()}

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)
