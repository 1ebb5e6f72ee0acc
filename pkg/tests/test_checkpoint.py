"""
チェックポイント入出力のテスト
"""
import numpy as np
import pytest

from core.checkpoint import CHECKPOINT_PREFIX, Checkpoint, load_checkpoint, load_parameters, model_state, save_checkpoint
from core.diffusion import ConditionInput
from core.preprocess import NormStats, TopoStats
from core.srcnn import SRCNN
from core.unet import ConditionalUNet, UNetConfig
from utils.errors import CheckpointError, DimensionError

TINY = UNetConfig(base_channels=8, depth=1, time_embed_dim=16, in_channels=3, groups=4)


def _unet_checkpoint(with_optimizer=False):
    model = ConditionalUNet(TINY, seed=2)
    rng = np.random.default_rng(0)
    for param in model.named_parameters().values():
        param.values = rng.standard_normal(param.shape).astype(np.float32)
    params = model_state(model)
    optimizer = None
    if with_optimizer:
        optimizer = {n: (np.full_like(a, 0.5), np.full_like(a, 0.25)) for n, a in params.items()}
    return Checkpoint(
        model_kind="unet",
        params=params,
        norm_stats=NormStats(gamma=0.15, vmax_gamma=1.8),
        schedule={"kind": "cosine", "T": 10},
        topo_stats=TopoStats(mean=120.0, std=40.0),
        unet_config=TINY,
        optimizer=optimizer,
        step=42,
        seed_lineage={"seed": 3, "data_seed": 3},
        run_config={"data.size": 16},
    )


class TestRoundTrip:
    def test_parameters_are_bit_identical(self, tmp_path):
        ckpt = _unet_checkpoint(with_optimizer=True)
        save_checkpoint(ckpt, tmp_path / "a.rsck")
        loaded = load_checkpoint(tmp_path / "a.rsck")
        assert list(loaded.params) == list(ckpt.params)
        for name, values in ckpt.params.items():
            np.testing.assert_array_equal(loaded.params[name], values)
            np.testing.assert_array_equal(loaded.optimizer[name][0], ckpt.optimizer[name][0])
            np.testing.assert_array_equal(loaded.optimizer[name][1], ckpt.optimizer[name][1])
        assert loaded.step == 42
        assert loaded.schedule == {"kind": "cosine", "T": 10}
        assert loaded.norm_stats == ckpt.norm_stats
        assert loaded.topo_stats == ckpt.topo_stats
        assert loaded.unet_config == TINY
        assert loaded.seed_lineage == {"seed": 3, "data_seed": 3}

    def test_same_content_same_bytes(self, tmp_path):
        save_checkpoint(_unet_checkpoint(), tmp_path / "a.rsck")
        save_checkpoint(_unet_checkpoint(), tmp_path / "b.rsck")
        assert (tmp_path / "a.rsck").read_bytes() == (tmp_path / "b.rsck").read_bytes()

    def test_without_optimizer(self, tmp_path):
        save_checkpoint(_unet_checkpoint(), tmp_path / "a.rsck")
        assert load_checkpoint(tmp_path / "a.rsck").optimizer is None

    def test_rebuilt_model_gives_same_output(self, tmp_path, rng):
        ckpt = _unet_checkpoint()
        original = ckpt.build_model()
        save_checkpoint(ckpt, tmp_path / "a.rsck")
        restored = load_checkpoint(tmp_path / "a.rsck").build_model()
        y = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        cond = ConditionInput(lr_up=rng.standard_normal(y.shape).astype(np.float32),
                              topo_norm=np.zeros((1, 1, 16, 16), dtype=np.float32))
        np.testing.assert_array_equal(original.forward(y, cond, 5), restored.forward(y, cond, 5))

    def test_schedule_rebuilt(self, tmp_path):
        save_checkpoint(_unet_checkpoint(), tmp_path / "a.rsck")
        schedule = load_checkpoint(tmp_path / "a.rsck").build_schedule()
        assert schedule.T == 10
        assert schedule.kind == "cosine"

    def test_srcnn(self, tmp_path):
        model = SRCNN(seed=4)
        ckpt = Checkpoint(model_kind="srcnn", params=model_state(model),
                          norm_stats=NormStats(vmax_gamma=2.0), schedule={"kind": "linear", "T": 2})
        save_checkpoint(ckpt, tmp_path / "s.rsck")
        rebuilt = load_checkpoint(tmp_path / "s.rsck").build_model()
        assert isinstance(rebuilt, SRCNN)
        np.testing.assert_array_equal(rebuilt.conv1.weight.values, model.conv1.weight.values)


class TestMalformed:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.rsck"
        save_checkpoint(_unet_checkpoint(), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "a.rsck"
        save_checkpoint(_unet_checkpoint(), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_too_short(self, tmp_path):
        path = tmp_path / "a.rsck"
        path.write_bytes(b"RS")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_key(self, tmp_path):
        header = b'{"format_version": 1, "model_kind": "unet"}'
        path = tmp_path / "a.rsck"
        path.write_bytes(CHECKPOINT_PREFIX.pack(b"RSCK", 1, len(header)) + header)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        header = b"{}"
        path = tmp_path / "a.rsck"
        path.write_bytes(CHECKPOINT_PREFIX.pack(b"RSCK", 9, len(header)) + header)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestLoadParameters:
    def test_shape_mismatch(self):
        model = SRCNN()
        params = model_state(model)
        params["conv1.weight"] = np.zeros((64, 1, 3, 3), dtype=np.float32)
        with pytest.raises(DimensionError):
            load_parameters(model, params)

    def test_name_mismatch(self):
        model = SRCNN()
        params = model_state(model)
        params.pop("conv3.bias")
        with pytest.raises(CheckpointError):
            load_parameters(model, params)
