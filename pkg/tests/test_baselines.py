import numpy as np
import pytest

from lrimpute import baselines as B
from lrimpute import data as D
from lrimpute.errors import ContractError, NumericError
from lrimpute.spectral import svd_values


class TestMean:
    def test_sensor_mean_fills_gap(self):
        values = np.array([[2.0, 0.0, 4.0]])
        mask = np.array([[True, False, True]])
        out = B.impute_mean(values, mask)
        assert out[0, 1] == 3.0

    def test_fully_observed_is_identity(self):
        values = np.random.default_rng(0).normal(size=(3, 5))
        out = B.impute_mean(values, np.ones_like(values, dtype=bool))
        assert np.array_equal(out, values)

    def test_empty_sensor_uses_global_mean(self):
        values = np.array([[0.0, 0.0], [1.0, 3.0]])
        mask = np.array([[False, False], [True, True]])
        out = B.impute_mean(values, mask)
        assert np.allclose(out[0], 2.0)

    def test_fully_empty_rejected(self):
        with pytest.raises(ContractError):
            B.impute_mean(np.ones((2, 2)), np.zeros((2, 2), dtype=bool))


class TestLinear:
    def test_interpolates_between_neighbors(self):
        values = np.array([[0.0, 0.0, 0.0, 0.0, 4.0]])
        mask = np.array([[True, False, False, False, True]])
        out = B.impute_linear(values, mask)
        assert np.allclose(out[0], [0.0, 1.0, 2.0, 3.0, 4.0])

    def test_leading_gap_takes_first_observation(self):
        values = np.array([[0.0, 0.0, 5.0, 6.0]])
        mask = np.array([[False, False, True, True]])
        out = B.impute_linear(values, mask)
        assert np.allclose(out[0], [5.0, 5.0, 5.0, 6.0])

    def test_fully_observed_is_identity(self):
        values = np.random.default_rng(1).normal(size=(4, 6))
        out = B.impute_linear(values, np.ones_like(values, dtype=bool))
        assert np.array_equal(out, values)

    def test_empty_sensor_falls_back_to_mean(self):
        values = np.array([[0.0, 0.0], [2.0, 4.0]])
        mask = np.array([[False, False], [True, True]])
        out = B.impute_linear(values, mask)
        assert np.allclose(out[0], 3.0)


class TestAls:
    def _rank_one(self, seed=2, shape=(10, 16), observed=0.3):
        rng = np.random.default_rng(seed)
        matrix = np.outer(rng.normal(size=shape[0]), rng.normal(size=shape[1]))
        mask = rng.random(shape) < observed
        return matrix, mask

    def test_recovers_noiseless_rank_one(self):
        matrix, mask = self._rank_one()
        out = B.impute_als(matrix, mask, rank=1, reg=1e-6, iters=50)
        assert np.max(np.abs(out - matrix)) < 1e-4

    def test_objective_monotone_nonincreasing(self):
        rng = np.random.default_rng(3)
        matrix = rng.normal(size=(8, 12))
        mask = rng.random((8, 12)) < 0.6
        for seed in range(3):
            _, _, objectives = B.als_lowrank_fit(matrix, mask, rank=3, reg=1e-3,
                                                 iters=15, seed=seed)
            diffs = np.diff(objectives)
            assert np.all(diffs <= 1e-9 * max(objectives[0], 1.0))

    def test_completion_rank_bounded(self):
        matrix, mask = self._rank_one(seed=4, shape=(9, 11))
        u, v, _ = B.als_lowrank_fit(matrix, mask, rank=2, reg=1e-3, iters=10)
        sv = svd_values(u @ v.T).values
        assert sv[2] < 1e-8 * max(sv[0], 1e-30)

    def test_observed_cells_preserved(self):
        rng = np.random.default_rng(5)
        matrix = rng.normal(size=(6, 8))
        mask = rng.random((6, 8)) < 0.5
        out = B.impute_als(matrix, mask, rank=2, reg=1e-2, iters=5)
        assert np.array_equal(out[mask], matrix[mask])

    def test_singular_system_advises_regularization(self):
        matrix = np.ones((4, 6))
        mask = np.ones((4, 6), dtype=bool)
        mask[2] = False  # empty row makes the reg=0 system singular
        with pytest.raises(NumericError, match="reg > 0"):
            B.als_lowrank_fit(matrix, mask, rank=2, reg=0.0, iters=2)

    def test_rank_cap(self):
        with pytest.raises(ContractError):
            B.als_lowrank_fit(np.ones((3, 3)), np.ones((3, 3), dtype=bool),
                              rank=4, reg=1e-3, iters=1)


class TestBaselineKind:
    def test_dispatch(self):
        values = np.array([[1.0, 0.0, 3.0]])
        mask = np.array([[True, False, True]])
        out = B.impute_baseline(B.BaselineKind("mean"), values, mask)
        assert out[0, 1] == 2.0
        out = B.impute_baseline(B.BaselineKind("linear_interp"), values, mask)
        assert out[0, 1] == 2.0

    def test_validation(self):
        with pytest.raises(ContractError):
            B.BaselineKind("knn")
        with pytest.raises(ContractError):
            B.BaselineKind("als_mf", rank=0)


def test_als_oversmooths_relative_to_raw_data():
    """Low-rank completion concentrates spectral energy in the leading
    values; its cumulative-energy curve sits above the noisy data's."""
    ds = D.synth_lowrank(16, 240, 4, 0.3, 24, seed=6)
    spec = D.MissingPatternSpec(kind="point", point_rate=0.3, seed=6)
    obs = D.apply_missing(ds, spec)
    completed = B.impute_als(ds.values, obs, rank=4, reg=1e-2, iters=20)
    raw_energy = svd_values(ds.values).cumulative_energy()
    als_energy = svd_values(completed).cumulative_energy()
    lead = slice(0, 6)
    assert np.all(als_energy[lead] >= raw_energy[lead] - 1e-9)
    assert als_energy[:4].sum() > raw_energy[:4].sum()
