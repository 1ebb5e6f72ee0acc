"""
デスクスケールの通し実験（gen-data → train → evaluate）

数十分かかるため slow マーカー付き。``pytest -m slow`` で実行する。
"""
from dataclasses import replace

import numpy as np
import pytest

from config import Config, RunConfig
from services.dataset_service import DatasetService
from services.evaluation_service import EvaluationService
from services.training_service import TrainingService

pytestmark = pytest.mark.slow

EVAL_SUBSET = 20
SWEEP_W = (0.0, 1.0, 10.0, 100.0)


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    config = RunConfig.from_file(Config.DEFAULT_RUN_CONFIG)
    config = replace(config, seed=7, count=512, eval_count=64, data_dir=str(root / "data"),
                     output_dir=str(root / "run"), progress=False).validate()
    DatasetService(config).generate()
    topo = TrainingService(config).train()
    no_topo = TrainingService(replace(config, use_topo=False, output_dir=str(root / "no_topo"))).train()
    return config, topo, no_topo


def _tail_mean(losses, n=100):
    return float(np.mean(losses[-n:]))


def test_training_converges(desk_run):
    _, topo, _ = desk_run
    assert topo.final_loss < 0.25


def test_topography_does_not_hurt(desk_run):
    _, topo, no_topo = desk_run
    assert _tail_mean(topo.losses) <= 1.1 * _tail_mean(no_topo.losses)


def test_diffusion_close_to_bilinear(desk_run):
    config, topo, _ = desk_run
    service = EvaluationService(config)
    dataset = DatasetService(config)
    ckpt = topo.checkpoint
    data = dataset.prepare_split(dataset.load_manifest(), "eval", ckpt.norm_stats, ckpt.topo_stats)
    bilinear = service.evaluate_bilinear(data, ckpt.norm_stats)
    diffusion = service.evaluate_diffusion(ckpt, data, "diffusion")
    assert diffusion.report.rmse <= 1.5 * bilinear.report.rmse


def test_guidance_sweep(desk_run):
    """
    w = 0, 1, 10, 100 のLR整合残差

    ガイダンスは1ステップあたり長さ w の固定移動なので、HR残差ノルムを超える w は行き過ぎる。
    32x32では w=100 がこの領域に入り、残差は w=0 より大きくなる。
    """
    config, topo, _ = desk_run
    service = EvaluationService(config)
    dataset = DatasetService(config)
    ckpt = topo.checkpoint
    data = dataset.prepare_split(dataset.load_manifest(), "eval", ckpt.norm_stats, ckpt.topo_stats).head(EVAL_SUBSET)
    residuals = {
        w: service.evaluate_diffusion(ckpt, data, f"diffusion-w{w:g}", enabled=True, w=w).lr_residual
        for w in SWEEP_W
    }
    assert all(np.isfinite(r) for r in residuals.values())
    assert residuals[100.0] > residuals[0.0]
