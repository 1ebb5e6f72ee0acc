"""
評価指標のテスト（スカラー実装の総当たりと比較）
"""
import math

import numpy as np
import pytest

from core.metrics import bias, compute_report, pearson_corr, rmse
from utils.errors import DimensionError


def _brute_force(pred, obs):
    p = [float(v) for field in pred for v in np.asarray(field).ravel()]
    o = [float(v) for field in obs for v in np.asarray(field).ravel()]
    n = len(p)
    sq = 0.0
    diff = 0.0
    for a, b in zip(p, o):
        sq += (a - b) ** 2
        diff += a - b
    mp = sum(p) / n
    mo = sum(o) / n
    cov = sum((a - mp) * (b - mo) for a, b in zip(p, o))
    vp = sum((a - mp) ** 2 for a in p)
    vo = sum((b - mo) ** 2 for b in o)
    return math.sqrt(sq / n), cov / math.sqrt(vp * vo), diff / n


class TestExamples:
    def test_identical(self, rng):
        obs = [rng.random((4, 4))]
        assert rmse(obs, obs) == 0.0
        assert bias(obs, obs) == 0.0
        assert pearson_corr(obs, obs) == pytest.approx(1.0)

    def test_constant_offset(self, rng):
        obs = [rng.random((4, 4))]
        assert rmse([obs[0] + 2.0], obs) == pytest.approx(2.0)
        assert bias([obs[0] + 0.5], obs) == pytest.approx(0.5)

    def test_two_pixel_field(self):
        assert rmse([np.array([[3.0, 4.0]])], [np.array([[0.0, 0.0]])]) == pytest.approx(math.sqrt(12.5))

    def test_correlation_sign_and_affine_invariance(self, rng):
        obs = [rng.random((5, 5))]
        assert pearson_corr([-obs[0]], obs) == pytest.approx(-1.0)
        assert pearson_corr([3.0 * obs[0] + 7.0], obs) == pytest.approx(1.0, abs=1e-9)

    def test_constant_field_correlation_undefined(self, rng):
        report = compute_report([np.full((4, 4), 2.0)], [rng.random((4, 4))])
        assert report.corr is None
        assert not report.corr_defined

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            rmse([np.zeros((2, 2))], [np.zeros((2, 3))])
        with pytest.raises(DimensionError):
            bias([np.zeros((2, 2))], [])


class TestOracle:
    def test_random_pairs(self, rng):
        for _ in range(100):
            count = int(rng.integers(1, 4))
            pred = [rng.random((8, 8)) * 10 for _ in range(count)]
            obs = [rng.random((8, 8)) * 10 for _ in range(count)]
            expected = _brute_force(pred, obs)
            assert rmse(pred, obs) == pytest.approx(expected[0], rel=1e-9)
            assert pearson_corr(pred, obs) == pytest.approx(expected[1], rel=1e-9)
            assert bias(pred, obs) == pytest.approx(expected[2], rel=1e-9, abs=1e-12)

    def test_order_invariant(self, rng):
        pred = [rng.random((4, 4)) for _ in range(6)]
        obs = [rng.random((4, 4)) for _ in range(6)]
        order = rng.permutation(6)
        a = compute_report(pred, obs)
        b = compute_report([pred[i] for i in order], [obs[i] for i in order])
        assert a.rmse == pytest.approx(b.rmse, rel=1e-12)
        assert a.corr == pytest.approx(b.corr, rel=1e-12)
        assert a.bias == pytest.approx(b.bias, rel=1e-9, abs=1e-15)

    def test_gamma_on_both_sides_changes_rmse(self, rng):
        pred = [rng.random((4, 4)) * 20]
        obs = [rng.random((4, 4)) * 20]
        assert rmse(pred, obs) != pytest.approx(rmse([pred[0] ** 0.15], [obs[0] ** 0.15]))

    def test_per_sample_values(self, rng):
        pred = [rng.random((4, 4)) for _ in range(3)]
        obs = [rng.random((4, 4)) for _ in range(3)]
        report = compute_report(pred, obs)
        assert report.n_samples == 3
        assert len(report.per_sample) == 3
        assert report.per_sample[1][0] == pytest.approx(rmse([pred[1]], [obs[1]]))
        assert report.mean_sample_corr is not None
