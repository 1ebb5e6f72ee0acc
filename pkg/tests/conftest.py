"""
共通フィクスチャ
16x16・T=10 程度の小さな設定でCPU上ですぐ終わるようにする
"""
import logging

import numpy as np
import pytest

from config import RunConfig
from services.dataset_service import DatasetService
from utils.logger import LOGGER_NAME, logger


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """小さな実行設定（データ・出力は tmp_path 配下）"""
    config = RunConfig(
        data_dir=str(tmp_path / "data"),
        size=16,
        count=8,
        eval_count=4,
        steps=10,
        batch_size=4,
        train_steps=6,
        checkpoint_every=0,
        base_channels=8,
        depth=1,
        time_embed_dim=16,
        groups=4,
        eval_batch_size=3,
        seed=3,
        output_dir=str(tmp_path / "run"),
        progress=False,
    )
    return config.validate()


@pytest.fixture
def tiny_dataset(tiny_config):
    """tiny_config の合成データセットを生成して目録を返す"""
    return DatasetService(tiny_config).generate()


class ScaledPredictor:
    """ε_θ(y_t) = scale·y_t のおもちゃの予測器（サンプラーのテスト用）"""

    def __init__(self, scale: float = 0.1):
        self.scale = scale

    def forward(self, y_t, cond, t):
        return (self.scale * y_t).astype(y_t.dtype)

    def backward(self, grad_out):
        return self.scale * grad_out


@pytest.fixture
def toy_predictor():
    return ScaledPredictor()


@pytest.fixture
def downscale_log(caplog, monkeypatch):
    """downscale ロガーの出力を caplog で捕まえる（通常はルートへ伝播しない）"""
    monkeypatch.setattr(logger, "propagate", True)
    caplog.set_level(logging.DEBUG, logger=LOGGER_NAME)
    return caplog
