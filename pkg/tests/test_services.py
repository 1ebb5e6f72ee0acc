"""
サービス層（データセット・学習・サンプリング・評価）の結合テスト
"""
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from core.checkpoint import load_checkpoint
from core.grids import load_field
from services.dataset_service import DatasetService, lr_consistency_residual
from services.evaluation_service import EvaluationRequest, EvaluationService
from services.sampling_service import SamplingService, entry_seed
from services.training_service import DivergenceMonitor, TrainingService
from utils.errors import CheckpointError, TrainingDivergedError, UsageError
from utils.history_logger import HistoryLogger


@pytest.fixture
def trained_unet(tiny_config, tiny_dataset):
    return TrainingService(tiny_config).train()


@pytest.fixture
def trained_srcnn(tiny_config, tiny_dataset, tmp_path):
    config = replace(tiny_config, model_kind="srcnn", output_dir=str(tmp_path / "srcnn"))
    return TrainingService(config).train()


class TestDatasetService:
    def test_prepared_shapes(self, tiny_config, tiny_dataset):
        service = DatasetService(tiny_config)
        manifest = service.load_manifest()
        norm, topo = service.fit_statistics(manifest)
        data = service.prepare_split(manifest, "train", norm, topo)
        assert len(data) == 8
        assert data.hr.shape == (8, 1, 16, 16)
        assert data.lr.shape == (8, 1, 2, 2)
        assert data.lr_up.shape == (8, 1, 16, 16)
        assert data.topo_norm.shape == (8, 1, 16, 16)
        assert data.hr.dtype == np.float32
        assert data.hr.min() >= -1.0 and data.hr.max() <= 1.0
        assert data.ids == sorted(data.ids)

    def test_head(self, tiny_config, tiny_dataset):
        service = DatasetService(tiny_config)
        manifest = service.load_manifest()
        norm, topo = service.fit_statistics(manifest)
        data = service.prepare_split(manifest, "eval", norm, topo)
        assert len(data.head(2)) == 2
        assert data.head(None) is data
        assert data.head(2).ids == data.ids[:2]

    def test_missing_manifest(self, tiny_config):
        with pytest.raises(OSError):
            DatasetService(tiny_config).load_manifest()

    def test_lr_residual_is_zero_for_consistent_prediction(self, tiny_config, tiny_dataset):
        service = DatasetService(tiny_config)
        manifest = service.load_manifest()
        norm, topo = service.fit_statistics(manifest)
        data = service.prepare_split(manifest, "train", norm, topo)
        constant = np.full((16, 16), 3.0)
        lr = np.full((1, 1, 2, 2), float(np.clip(2.0 * (3.0 ** norm.gamma) / norm.vmax_gamma - 1.0, -1, 1)))
        assert lr_consistency_residual([constant], lr, norm) == pytest.approx(0.0, abs=1e-6)
        assert lr_consistency_residual(data.hr_phys, data.lr, norm) >= 0.0


class TestDivergenceMonitor:
    def test_raises_after_patience(self):
        monitor = DivergenceMonitor(factor=10.0, patience=3)
        monitor.update(1, 1.0)
        monitor.update(2, 11.0)
        monitor.update(3, 11.0)
        with pytest.raises(TrainingDivergedError):
            monitor.update(4, 11.0)

    def test_streak_resets(self):
        monitor = DivergenceMonitor(factor=10.0, patience=2)
        monitor.update(1, 1.0)
        monitor.update(2, 20.0)
        monitor.update(3, 1.0)
        monitor.update(4, 20.0)
        assert monitor.streak == 1


class TestTrainingService:
    def test_loss_log_and_checkpoint(self, tiny_config, trained_unet):
        log = pd.read_csv(trained_unet.loss_log_path)
        assert list(log.columns) == ["step", "loss", "lr"]
        assert log["step"].tolist() == list(range(1, 7))
        assert trained_unet.checkpoint_path.exists()
        ckpt = load_checkpoint(trained_unet.checkpoint_path)
        assert ckpt.step == 6
        assert ckpt.model_kind == "unet"
        assert ckpt.seed_lineage == {"seed": 3, "data_seed": 3}
        assert ckpt.schedule == {"kind": "linear", "T": 10}

    def test_initial_loss_near_one(self, trained_unet):
        # 出力層が0初期化なので最初の損失はノイズのエネルギー
        assert trained_unet.losses[0] == pytest.approx(1.0, abs=0.2)

    def test_same_seed_same_bytes(self, tiny_config, tiny_dataset):
        first = TrainingService(tiny_config).train()
        ckpt_bytes = first.checkpoint_path.read_bytes()
        log_bytes = first.loss_log_path.read_bytes()
        second = TrainingService(tiny_config).train()
        assert second.checkpoint_path.read_bytes() == ckpt_bytes
        assert second.loss_log_path.read_bytes() == log_bytes

    def test_resume_matches_uninterrupted_run(self, tiny_config, tiny_dataset, tmp_path):
        full = TrainingService(replace(tiny_config, checkpoint_every=3)).train()
        assert [p.name for p in full.periodic_checkpoints] == ["checkpoint_step000003.rsck"]

        resumed_config = replace(tiny_config, output_dir=str(tmp_path / "resumed"))
        resumed = TrainingService(resumed_config).train(resume=full.periodic_checkpoints[0])
        assert len(resumed.losses) == 3
        np.testing.assert_allclose(resumed.losses, full.losses[3:], rtol=1e-6)
        for name, values in full.checkpoint.params.items():
            np.testing.assert_allclose(resumed.checkpoint.params[name], values, rtol=1e-5, atol=1e-7)

    def test_resume_keeps_earlier_log_rows(self, tiny_config, tiny_dataset):
        full = TrainingService(replace(tiny_config, checkpoint_every=3)).train()
        TrainingService(tiny_config).train(resume=full.periodic_checkpoints[0])
        assert pd.read_csv(full.loss_log_path)["step"].tolist() == list(range(1, 7))

    def test_resume_rejects_other_model_kind(self, trained_unet, tiny_config):
        with pytest.raises(CheckpointError):
            TrainingService(replace(tiny_config, model_kind="srcnn")).train(resume=trained_unet.checkpoint_path)

    def test_srcnn(self, trained_srcnn):
        assert trained_srcnn.checkpoint.model_kind == "srcnn"
        assert trained_srcnn.checkpoint.unet_config is None
        assert np.all(np.isfinite(trained_srcnn.losses))

    def test_without_topography(self, tiny_config, tiny_dataset, tmp_path):
        config = replace(tiny_config, use_topo=False, output_dir=str(tmp_path / "no_topo"))
        result = TrainingService(config).train()
        assert result.checkpoint.unet_config.in_channels == 2

    def test_history(self, tiny_config, tiny_dataset, tmp_path):
        history = HistoryLogger(tmp_path / "logs")
        TrainingService(tiny_config, history=history).train()
        rows = pd.read_csv(history.train_history_file)
        assert rows["model_kind"].tolist() == ["unet"]
        assert rows["steps"].tolist() == [6]


class TestSamplingService:
    def test_entry_seed(self):
        assert entry_seed(0, "s00001") == entry_seed(0, "s00001")
        assert entry_seed(0, "s00001") != entry_seed(1, "s00001")
        assert entry_seed(0, "s00001") != entry_seed(0, "s00002")

    def _eval_data(self, config, ckpt):
        service = DatasetService(config)
        return service.prepare_split(service.load_manifest(), "eval", ckpt.norm_stats, ckpt.topo_stats)

    def test_predictions(self, tiny_config, trained_unet):
        sampler = SamplingService(trained_unet.checkpoint, tiny_config)
        data = self._eval_data(tiny_config, trained_unet.checkpoint)
        preds = sampler.predict(data, sampler.guidance())
        assert len(preds) == 4
        for pred in preds:
            assert pred.shape == (16, 16)
            assert np.all(pred >= 0.0)

    def test_overshoot_is_clamped_with_warning(self, tiny_config, trained_unet, monkeypatch, downscale_log):
        sampler = SamplingService(trained_unet.checkpoint, tiny_config)
        data = self._eval_data(tiny_config, trained_unet.checkpoint).head(2)
        monkeypatch.setattr(sampler, "predict_model_range",
                            lambda d, g: np.full((2, 1, 16, 16), 1.5, dtype=np.float32))
        preds = sampler.predict(data, sampler.guidance())
        np.testing.assert_allclose(preds[0], trained_unet.checkpoint.norm_stats.vmax, rtol=1e-5)
        assert any(r.levelname == "WARNING" and "クランプ" in r.getMessage() for r in downscale_log.records)

    def test_independent_of_batching(self, tiny_config, trained_unet):
        data = self._eval_data(tiny_config, trained_unet.checkpoint)
        wide = SamplingService(trained_unet.checkpoint, tiny_config)
        narrow = SamplingService(trained_unet.checkpoint, replace(tiny_config, eval_batch_size=1))
        a = wide.predict_model_range(data, wide.guidance())
        b = narrow.predict_model_range(data.head(2), narrow.guidance())
        np.testing.assert_allclose(a[:2], b, atol=1e-5)

    def test_write_outputs(self, tiny_config, trained_unet, tmp_path):
        sampler = SamplingService(trained_unet.checkpoint, tiny_config)
        data = self._eval_data(tiny_config, trained_unet.checkpoint).head(2)
        preds = sampler.predict(data, sampler.guidance())
        written = sampler.write_outputs(data.ids, preds, tmp_path / "samples", write_pgm=True)
        assert list(written) == data.ids
        for entry_id, path in written.items():
            np.testing.assert_array_equal(load_field(path), preds[data.ids.index(entry_id)])
            assert (tmp_path / "samples" / "pgm" / f"{entry_id}.pgm").exists()

    def test_rejects_srcnn(self, tiny_config, trained_srcnn):
        with pytest.raises(CheckpointError):
            SamplingService(trained_srcnn.checkpoint, tiny_config)


class TestEvaluationService:
    def _results(self, config):
        return pd.read_csv(config.output_path / "results.csv")

    def test_bilinear_only(self, tiny_config, tiny_dataset):
        results = EvaluationService(tiny_config).run(EvaluationRequest())
        assert [r.method for r in results] == ["bilinear"]
        header = (tiny_config.output_path / "results.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("method,rmse,corr,bias,n")
        table = self._results(tiny_config)
        assert table["n"].tolist() == [4]
        assert table["rmse"][0] >= 0.0
        sample_corr = table["mean_sample_corr"][0]
        assert pd.isna(sample_corr) or -1.0 <= sample_corr <= 1.0
        assert (tiny_config.output_path / "results.md").exists()

    def test_nothing_to_evaluate(self, tiny_config, tiny_dataset):
        with pytest.raises(UsageError):
            EvaluationService(tiny_config).run(EvaluationRequest(baseline=None))

    def test_ablation_requires_unet(self, tiny_config, tiny_dataset):
        with pytest.raises(UsageError):
            EvaluationService(tiny_config).run(EvaluationRequest(ablation=True))

    def test_diffusion_is_deterministic(self, tiny_config, trained_unet):
        request = EvaluationRequest(checkpoint=trained_unet.checkpoint_path)
        first = EvaluationService(tiny_config).run(request)
        csv_bytes = (tiny_config.output_path / "results.csv").read_bytes()
        second = EvaluationService(tiny_config).run(request)
        assert [r.method for r in first] == ["bilinear", "diffusion"]
        assert first[1].report.rmse == second[1].report.rmse
        assert (tiny_config.output_path / "results.csv").read_bytes() == csv_bytes

    def test_saved_checkpoint_gives_same_report(self, tiny_config, trained_unet, tiny_dataset):
        service = EvaluationService(tiny_config)
        ckpt = trained_unet.checkpoint
        dataset = DatasetService(tiny_config)
        data = dataset.prepare_split(dataset.load_manifest(), "eval", ckpt.norm_stats, ckpt.topo_stats)
        in_memory = service.evaluate_diffusion(ckpt, data, "diffusion")
        from_disk = service.evaluate_diffusion(load_checkpoint(trained_unet.checkpoint_path), data, "diffusion")
        assert in_memory.report.rmse == from_disk.report.rmse
        assert in_memory.lr_residual == from_disk.lr_residual

    def test_ablation_rows(self, tiny_config, trained_unet, tmp_path):
        no_topo = TrainingService(
            replace(tiny_config, use_topo=False, output_dir=str(tmp_path / "no_topo"))
        ).train()
        config = replace(tiny_config, output_dir=str(tmp_path / "ablation"))
        results = EvaluationService(config).run(EvaluationRequest(
            checkpoint=trained_unet.checkpoint_path,
            no_topo_checkpoint=no_topo.checkpoint_path,
            ablation=True,
        ))
        assert [r.method for r in results] == [
            "bilinear", "diffusion-no-bgs-no-topo", "diffusion-no-bgs", "diffusion-no-topo", "diffusion",
        ]

    def test_ablation_without_no_topo_checkpoint(self, tiny_config, trained_unet):
        results = EvaluationService(tiny_config).run(
            EvaluationRequest(checkpoint=trained_unet.checkpoint_path, ablation=True)
        )
        assert [r.method for r in results] == ["bilinear", "diffusion-no-bgs", "diffusion"]

    def test_guidance_sweep(self, tiny_config, trained_unet):
        EvaluationService(tiny_config).run(
            EvaluationRequest(checkpoint=trained_unet.checkpoint_path, sweep_w=[0.0, 10.0], limit=2)
        )
        table = self._results(tiny_config)
        assert table["method"].tolist() == ["bilinear", "diffusion-w0", "diffusion-w10"]
        assert "w" in table.columns
        assert table["n"].tolist() == [2, 2, 2]

    def test_srcnn_checkpoint(self, tiny_config, trained_srcnn):
        results = EvaluationService(tiny_config).run(
            EvaluationRequest(checkpoint=trained_srcnn.checkpoint_path, baseline=None)
        )
        assert [r.method for r in results] == ["srcnn"]

    def test_panels_and_history(self, tiny_config, tiny_dataset, tmp_path):
        config = replace(tiny_config, write_pgm=True)
        history = HistoryLogger(tmp_path / "logs")
        EvaluationService(config, history=history).run(EvaluationRequest(limit=1))
        entry_id = sorted(e.id for e in tiny_dataset.split("eval"))[0]
        for suffix in ("lr", "hr", "bilinear"):
            assert (config.output_path / "panels" / f"{entry_id}_{suffix}.pgm").exists()
        assert pd.read_csv(history.evaluate_history_file)["method"].tolist() == ["bilinear"]
