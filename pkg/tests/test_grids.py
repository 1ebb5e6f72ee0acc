"""
グリッド・ファイル形式・合成データのテスト
"""
import struct

import numpy as np
import pytest

from core import grids
from core.grids import (
    DatasetManifest,
    ManifestEntry,
    PrecipField,
    TopoField,
    export_pgm,
    gen_synthetic_dataset,
    load_field,
    load_manifest,
    make_pair,
    save_field,
    save_manifest,
)
from utils.errors import (
    ConfigurationError,
    DimensionError,
    DimensionOverflowError,
    DomainError,
    FieldFormatError,
    TruncatedFieldError,
)


def _scalar_bilinear(src, i, j, out_h, out_w):
    """1画素ずつ計算する双線形補間（align_corners=False）"""
    def coord(d, n_in, n_out):
        s = min(max((d + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(s)
        return lo, min(lo + 1, n_in - 1), s - lo

    y0, y1, fy = coord(i, src.shape[0], out_h)
    x0, x1, fx = coord(j, src.shape[1], out_w)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


class TestFieldFile:
    def test_roundtrip(self, tmp_path, rng):
        values = rng.random((5, 7)).astype(np.float32)
        save_field(values, tmp_path / "a.pfld")
        np.testing.assert_array_equal(load_field(tmp_path / "a.pfld"), values)

    def test_single_pixel_file_size(self, tmp_path):
        save_field(np.array([[1.5]]), tmp_path / "one.pfld")
        data = (tmp_path / "one.pfld").read_bytes()
        assert len(data) == 20
        assert data[:4] == b"PFLD"
        assert struct.unpack("<f", data[16:])[0] == 1.5

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.pfld").write_bytes(struct.pack("<4sIII", b"XXXX", 1, 1, 1) + b"\0" * 4)
        with pytest.raises(FieldFormatError):
            load_field(tmp_path / "bad.pfld")

    def test_bad_version(self, tmp_path):
        (tmp_path / "bad.pfld").write_bytes(struct.pack("<4sIII", b"PFLD", 2, 1, 1) + b"\0" * 4)
        with pytest.raises(FieldFormatError):
            load_field(tmp_path / "bad.pfld")

    def test_truncated_payload(self, tmp_path):
        (tmp_path / "short.pfld").write_bytes(struct.pack("<4sIII", b"PFLD", 1, 2, 2) + b"\0" * 12)
        with pytest.raises(TruncatedFieldError):
            load_field(tmp_path / "short.pfld")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "short.pfld").write_bytes(b"PFLD")
        with pytest.raises(TruncatedFieldError):
            load_field(tmp_path / "short.pfld")

    @pytest.mark.parametrize("height,width", [(0, 4), (1 << 15, 1 << 14)])
    def test_dimension_overflow(self, tmp_path, height, width):
        (tmp_path / "big.pfld").write_bytes(struct.pack("<4sIII", b"PFLD", 1, height, width))
        with pytest.raises(DimensionOverflowError):
            load_field(tmp_path / "big.pfld")


class TestFields:
    def test_negative_precipitation_rejected(self):
        with pytest.raises(DomainError):
            PrecipField(np.array([[1.0, -0.1]]))

    def test_non_finite_rejected(self):
        with pytest.raises(DomainError):
            TopoField(np.array([[np.inf]]))

    def test_pair_requires_factor_eight(self):
        hr = PrecipField(np.ones((16, 16)))
        with pytest.raises(DimensionError):
            grids.SamplePair(hr=hr, lr=PrecipField(np.ones((4, 4))), topo=TopoField(np.zeros((16, 16))), id="x")


class TestMakePair:
    def test_shapes(self, rng):
        pair = make_pair(PrecipField(rng.random((32, 32))), TopoField(np.zeros((32, 32))), "p")
        assert pair.lr.values.shape == (4, 4)
        assert pair.id == "p"

    def test_not_divisible_by_eight(self):
        with pytest.raises(ConfigurationError) as info:
            make_pair(PrecipField(np.ones((12, 12))), TopoField(np.zeros((12, 12))))
        assert info.value.key == "data.size"

    def test_topography_must_match(self):
        with pytest.raises(DimensionError):
            make_pair(PrecipField(np.ones((16, 16))), TopoField(np.zeros((8, 8))))

    def test_constant_field(self):
        pair = make_pair(PrecipField(np.full((16, 16), 2.5)), TopoField(np.zeros((16, 16))))
        np.testing.assert_allclose(pair.lr.values, 2.5, rtol=1e-6)

    def test_smooth_bump_mean_preserved(self):
        yy, xx = np.mgrid[0:64, 0:64]
        bump = 10.0 * np.exp(-((yy - 31.5) ** 2 + (xx - 31.5) ** 2) / (2 * 8.0 ** 2))
        pair = make_pair(PrecipField(bump), TopoField(np.zeros((64, 64))))
        assert pair.lr.values.mean() == pytest.approx(pair.hr.values.mean(), rel=1e-2)

    def test_lr_nonnegative(self, rng):
        hr = np.zeros((16, 16))
        hr[3, 5] = 100.0
        pair = make_pair(PrecipField(hr), TopoField(np.zeros((16, 16))))
        assert np.all(pair.lr.values >= 0)

    def test_matches_scalar_bilinear(self, rng):
        hr = rng.random((32, 40)) * 20.0
        pair = make_pair(PrecipField(hr), TopoField(np.zeros((32, 40))))
        src = pair.hr.values.astype(np.float64)
        for _ in range(16):
            i = int(rng.integers(0, 4))
            j = int(rng.integers(0, 5))
            assert pair.lr.values[i, j] == pytest.approx(_scalar_bilinear(src, i, j, 4, 5), rel=1e-5)


class TestManifest:
    def _manifest(self, tmp_path, entries):
        save_field(np.ones((8, 8)), tmp_path / "f.pfld")
        return DatasetManifest(entries=entries, seed=5, root=tmp_path)

    def test_roundtrip(self, tmp_path):
        manifest = self._manifest(tmp_path, [
            ManifestEntry("a", "train", "f.pfld", "f.pfld"),
            ManifestEntry("b", "eval", "f.pfld", "f.pfld"),
        ])
        save_manifest(manifest, tmp_path / "manifest.tsv")
        loaded = load_manifest(tmp_path / "manifest.tsv")
        assert loaded.seed == 5
        assert [e.id for e in loaded.split("train")] == ["a"]
        assert [e.id for e in loaded.split("eval")] == ["b"]

    def test_duplicate_ids(self, tmp_path):
        manifest = self._manifest(tmp_path, [
            ManifestEntry("a", "train", "f.pfld", "f.pfld"),
            ManifestEntry("a", "eval", "f.pfld", "f.pfld"),
        ])
        save_manifest(manifest, tmp_path / "manifest.tsv")
        with pytest.raises(ConfigurationError):
            load_manifest(tmp_path / "manifest.tsv")

    def test_missing_file(self, tmp_path):
        manifest = self._manifest(tmp_path, [ManifestEntry("a", "train", "missing.pfld", "f.pfld")])
        save_manifest(manifest, tmp_path / "manifest.tsv")
        with pytest.raises(ConfigurationError):
            load_manifest(tmp_path / "manifest.tsv")

    def test_unknown_split(self, tmp_path):
        (tmp_path / "manifest.tsv").write_text("a\ttest\tf.pfld\tf.pfld\n", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            load_manifest(tmp_path / "manifest.tsv")


class TestSyntheticDataset:
    def test_counts_and_files(self, tmp_path):
        manifest = gen_synthetic_dataset(seed=7, count=8, size=16, out_dir=tmp_path)
        assert len(manifest.split("train")) == 8
        assert len(manifest.split("eval")) == 1
        assert (tmp_path / "manifest.tsv").exists()
        for entry in manifest.entries:
            values = load_field(tmp_path / entry.hr_path)
            assert values.shape == (16, 16)
            assert np.all(values >= 0)

    def test_deterministic(self, tmp_path):
        gen_synthetic_dataset(seed=7, count=4, size=16, out_dir=tmp_path / "a", eval_count=2)
        gen_synthetic_dataset(seed=7, count=4, size=16, out_dir=tmp_path / "b", eval_count=2)
        for name in ("manifest.tsv", "topo.pfld", "fields/s00000.pfld", "fields/s00005.pfld"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_output(self, tmp_path):
        gen_synthetic_dataset(seed=1, count=2, size=16, out_dir=tmp_path / "a", eval_count=0)
        gen_synthetic_dataset(seed=2, count=2, size=16, out_dir=tmp_path / "b", eval_count=0)
        assert (tmp_path / "a/fields/s00000.pfld").read_bytes() != (tmp_path / "b/fields/s00000.pfld").read_bytes()

    def test_precipitation_follows_topography(self):
        rng = np.random.default_rng(7)
        topo = grids.synthetic_topography(rng, 32)
        topo_norm = (topo - topo.mean()) / topo.std()
        mean_precip = np.mean([grids.synthetic_precipitation(rng, topo_norm) for _ in range(512)], axis=0)
        assert np.corrcoef(topo.ravel(), mean_precip.ravel())[0, 1] > 0.3

    def test_pooled_precipitation_is_right_skewed(self):
        rng = np.random.default_rng(11)
        topo = grids.synthetic_topography(rng, 32)
        topo_norm = (topo - topo.mean()) / topo.std()
        pooled = np.concatenate([grids.synthetic_precipitation(rng, topo_norm).ravel() for _ in range(512)])
        centred = pooled - pooled.mean()
        skewness = np.mean(centred ** 3) / np.mean(centred ** 2) ** 1.5
        assert skewness > 1.0

    @pytest.mark.parametrize("seed", range(100))
    def test_precipitation_nonnegative_and_finite(self, seed):
        rng = np.random.default_rng(seed)
        topo = grids.synthetic_topography(rng, 32)
        topo_norm = (topo - topo.mean()) / topo.std()
        precip = grids.synthetic_precipitation(rng, topo_norm)
        assert np.all(np.isfinite(precip))
        assert np.all(precip >= 0)

    def test_invalid_size(self, tmp_path):
        with pytest.raises(ConfigurationError):
            gen_synthetic_dataset(seed=0, count=2, size=20, out_dir=tmp_path)


class TestPgm:
    def test_pixels(self, tmp_path):
        export_pgm(np.array([[0.0, 1.0, 2.0, 4.0]]), tmp_path / "a.pgm", vmax=2.0)
        data = (tmp_path / "a.pgm").read_bytes()
        header = b"P5\n4 1\n255\n"
        assert data.startswith(header)
        assert list(data[len(header):]) == [0, 128, 255, 255]

    def test_invalid_vmax(self, tmp_path):
        with pytest.raises(ConfigurationError):
            export_pgm(np.ones((2, 2)), tmp_path / "a.pgm", vmax=0.0)
