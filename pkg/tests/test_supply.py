import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dissipnet.errors import DimensionMismatch, InvalidPreset
from dissipnet.supply import (
    StorageFunction,
    SupplyRate,
    preset,
    quadratic_storage,
    storage_eval,
    storage_grad,
    supply_eval,
    supply_eval_series,
)


class TestSupplyEval:
    def test_zero_parameters(self):
        w = preset("stable", 2, 1)
        assert supply_eval(w, [3.0], [1.0, -2.0]) == 0.0

    def test_io_stability_form(self):
        gamma2 = 2.0
        w = preset("io_stable", 2, 2, gamma2=gamma2)
        u = np.array([1.0, -0.5])
        y = np.array([0.3, 2.0])
        expected = gamma2 * u @ u - y @ y
        assert abs(supply_eval(w, u, y) - expected) < 1e-12

    def test_passivity_inner_product(self):
        w = preset("passive", 1, 1)
        assert supply_eval(w, [1.0], [1.0]) == 1.0
        u = np.array([0.7])
        y = np.array([-2.0])
        assert abs(supply_eval(w, u, y) - u @ y) < 1e-15

    def test_dimension_mismatch(self):
        w = preset("stable", 2, 1)
        with pytest.raises(DimensionMismatch):
            supply_eval(w, [1.0, 2.0], [1.0, 2.0])

    def test_series_matches_scalar(self):
        rng = np.random.default_rng(0)
        w = SupplyRate(rng.normal(size=(2, 2)) * 0 - np.eye(2),
                       rng.normal(size=(2, 3)), np.eye(3) * 0.5)
        u = rng.normal(size=(7, 3))
        y = rng.normal(size=(7, 2))
        series = supply_eval_series(w, u, y)
        for k in range(7):
            assert abs(series[k] - supply_eval(w, u[k], y[k])) < 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.floats(min_value=-3, max_value=3,
                     allow_nan=False, allow_infinity=False),
           st.integers(min_value=0, max_value=10**6))
    def test_quadratic_scaling(self, alpha, seed):
        rng = np.random.default_rng(seed)
        g = rng.normal(size=(2, 2))
        w = SupplyRate(-(g @ g.T), rng.normal(size=(2, 1)),
                       np.eye(1) * rng.uniform(0, 2))
        u = rng.normal(size=1)
        y = rng.normal(size=2)
        scaled = supply_eval(w, alpha * u, alpha * y)
        assert abs(scaled - alpha**2 * supply_eval(w, u, y)) <= 1e-10 * max(
            1, abs(scaled))


class TestStorage:
    def test_origin(self):
        v = quadratic_storage(2)
        assert storage_eval(v, np.zeros(2)) == 0.0
        assert np.all(storage_grad(v, np.zeros(2)) == 0.0)

    def test_identity_metric(self):
        v = quadratic_storage(2)
        x = np.array([3.0, 4.0])
        assert storage_eval(v, x) == 12.5
        assert np.allclose(storage_grad(v, x), x)

    def test_diagonal_metric(self):
        v = quadratic_storage(2, P=np.diag([2.0, 1.0]))
        x = np.array([1.0, 1.0])
        assert storage_eval(v, x) == 1.5
        assert np.allclose(storage_grad(v, x), [2.0, 1.0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        g = rng.normal(size=(4, 4))
        v = StorageFunction(g @ g.T + np.eye(4))
        x = rng.normal(size=4)
        grad = storage_grad(v, x)
        eps = 1e-6
        for i in range(4):
            hi = x.copy(); hi[i] += eps
            lo = x.copy(); lo[i] -= eps
            numeric = (storage_eval(v, hi) - storage_eval(v, lo)) / (2 * eps)
            assert abs(grad[i] - numeric) <= 1e-8

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=(3, 3))
        v = StorageFunction(g @ g.T + 0.5 * np.eye(3))
        for _ in range(50):
            assert storage_eval(v, rng.normal(size=3)) >= 0.0

    def test_requires_positive_definite(self):
        with pytest.raises(InvalidPreset):
            StorageFunction(np.diag([1.0, 0.0]))


class TestPresets:
    def test_stable(self):
        w = preset("stable", 2, 1)
        assert np.all(w.Q == 0) and np.all(w.S == 0) and np.all(w.R == 0)

    def test_io_stable_matrices(self):
        w = preset("io_stable", 16, 16, gamma2=2.0)
        assert np.allclose(w.Q, -np.eye(16))
        assert np.all(w.S == 0)
        assert np.allclose(w.R, 2.0 * np.eye(16))

    def test_msd_certificate(self):
        w = preset("msd", 2, 1, damping=1.0)
        assert np.allclose(w.Q, [[0.0, 0.0], [0.0, -1.0]])
        assert np.allclose(w.S, [[0.0], [0.5]])
        assert np.all(w.R == 0)

    def test_conservative_rejects_nonzero_r(self):
        with pytest.raises(InvalidPreset):
            preset("conservative", 2, 1, R=np.eye(1))

    def test_io_requires_positive_gamma(self):
        with pytest.raises(InvalidPreset):
            preset("io_stable", 2, 1, gamma2=0.0)

    def test_passive_requires_square(self):
        with pytest.raises(InvalidPreset):
            preset("passive", 2, 1)

    def test_sqrt_r_rejects_negative_eigenvalue(self):
        w = SupplyRate(np.zeros((1, 1)), np.zeros((1, 1)), np.array([[-0.1]]))
        with pytest.raises(InvalidPreset):
            w.sqrt_r()

    def test_unknown_preset(self):
        with pytest.raises(InvalidPreset):
            preset("bouncy", 2, 1)
