"""
ログ設定ユーティリティ
システムログ（logs/system.log）とコンソールに加え、実行ごとのログを出力ディレクトリに残す
"""
import logging
from pathlib import Path
from typing import Optional

from config import Config

LOGGER_NAME = "downscale"
RUN_LOG_FILE = "run.log"


def setup_logger(name: str = LOGGER_NAME) -> logging.Logger:
    """
    ログ設定を初期化

    Args:
        name: ロガー名

    Returns:
        設定済みロガー
    """
    Config.LOG_DIR.mkdir(parents=True, exist_ok=True)

    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO))
    logger.propagate = False

    # ハンドラーが既に設定されている場合はスキップ
    if logger.handlers:
        return logger

    file_handler = logging.FileHandler(Config.LOG_DIR / Config.LOG_FILE, encoding='utf-8')
    file_handler.setFormatter(logging.Formatter(Config.LOG_FORMAT))

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter(Config.LOG_FORMAT))

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)
    return logger


def set_console_level(level: str) -> None:
    """コンソール出力のレベルのみ変更（--quiet 用、ファイルには全て残る）"""
    for handler in logger.handlers:
        if isinstance(handler, logging.StreamHandler) and not isinstance(handler, logging.FileHandler):
            handler.setLevel(getattr(logging, level.upper(), logging.INFO))


def attach_run_log(output_dir: Path) -> Optional[logging.FileHandler]:
    """
    出力ディレクトリに run.log を追加する（学習・評価の成果物と同じ場所にログを残す）

    同じファイルへのハンドラーが既にあれば何もしない。

    Returns:
        追加したハンドラー（detach_run_log に渡す）
    """
    path = (Path(output_dir) / RUN_LOG_FILE).resolve()
    for handler in logger.handlers:
        if isinstance(handler, logging.FileHandler) and Path(handler.baseFilename) == path:
            return None
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding='utf-8')
    handler.setFormatter(logging.Formatter(Config.LOG_FORMAT))
    logger.addHandler(handler)
    return handler


def detach_run_log(handler: Optional[logging.FileHandler]) -> None:
    if handler is None:
        return
    logger.removeHandler(handler)
    handler.close()


# デフォルトロガー
logger = setup_logger()
