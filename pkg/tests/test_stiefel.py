import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bessel_ratio as oracle_ratio
from oracles import vmf_vector_log_normalizer
from pbtd.stiefel import (
    DiagGaussian,
    GammaDist,
    bessel_ratio,
    diag_gaussian_second_moment,
    gamma_stats,
    log_hyp0f1_scalar,
    vmf_expectation,
    vmf_log_normalizer,
    vmf_mode,
    vmf_moments,
    vmf_resultant_lengths,
)


def random_orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


class TestMode:
    def test_orthonormal_input_is_its_own_mode(self):
        q = random_orthonormal(np.random.default_rng(0), 5, 3)
        np.testing.assert_allclose(vmf_mode(q), q, atol=1e-12)

    def test_scaled_identity(self):
        np.testing.assert_allclose(vmf_mode(3 * np.eye(2)), np.eye(2), atol=1e-14)

    def test_mode_maximizes_trace(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((6, 2))
        m = vmf_mode(f)
        np.testing.assert_allclose(m.T @ m, np.eye(2), atol=1e-10)
        best = np.trace(f.T @ m)
        for _ in range(1000):
            assert np.trace(f.T @ random_orthonormal(rng, 6, 2)) <= best + 1e-12

    def test_zero_concentration_has_no_mode(self):
        with pytest.raises(ValueError):
            vmf_mode(np.zeros((4, 2)))

    def test_wide_matrix_rejected(self):
        with pytest.raises(ValueError):
            vmf_expectation(np.ones((2, 3)))


class TestVectorCase:
    def test_three_dimensional_closed_form(self):
        f = np.array([[2.0], [0.0], [0.0]])
        expected = 1 / math.tanh(2.0) - 0.5
        np.testing.assert_allclose(vmf_expectation(f)[:, 0], [expected, 0, 0], atol=1e-12)
        assert abs(expected - 0.537314) < 1e-6
        assert abs(vmf_log_normalizer(f) - math.log(math.sinh(2.0) / 2.0)) < 1e-12
        assert abs(vmf_log_normalizer(f) - 0.5952202) < 1e-6

    @pytest.mark.parametrize("dim", [2, 3, 5, 10])
    @pytest.mark.parametrize("kappa", [0.1, 1.0, 10.0, 100.0])
    def test_resultant_length_matches_series(self, dim, kappa):
        f = np.zeros((dim, 1))
        f[0, 0] = kappa
        assert abs(vmf_resultant_lengths(f)[0] - oracle_ratio(dim, kappa)) < 5e-3
        assert abs(vmf_log_normalizer(f) - vmf_vector_log_normalizer(dim, kappa)) < 5e-3

    def test_extreme_orders_stay_finite(self):
        # Large dimension and tiny or huge concentration exercise the fallbacks.
        k = np.array([1e-9, 1e-3, 1.0, 50.0, 1e4, 1e6])
        for b in (0.5, 1.0, 7.5, 200.0):
            r = bessel_ratio(b, k)
            assert np.all(np.isfinite(r)) and np.all((r >= 0) & (r <= 1))
            # Below saturation of float64 the ratio is strictly inside [0, 1).
            assert np.all(r[k <= 10] < 1)
            assert np.all(np.diff(r) >= 0)
            assert np.all(np.isfinite(log_hyp0f1_scalar(b, k)))

    def test_tiny_order_ratio_against_series(self):
        for dim, kappa in [(400, 3.0), (200, 0.5), (60, 20.0)]:
            assert abs(bessel_ratio(dim / 2, np.array([kappa]))[0] - oracle_ratio(dim, kappa)) < 1e-10


class TestMatrixCase:
    def test_zero_concentration(self):
        np.testing.assert_array_equal(vmf_expectation(np.zeros((5, 3))), np.zeros((5, 3)))
        assert vmf_log_normalizer(np.zeros((5, 3))) == 0.0

    @settings(max_examples=40, deadline=None)
    @given(
        rows=st.integers(2, 8),
        cols=st.integers(1, 4),
        scale=st.floats(0.01, 200.0),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_resultant_lengths_in_unit_interval(self, rows, cols, scale, seed):
        cols = min(cols, rows)
        f = scale * np.random.default_rng(seed).standard_normal((rows, cols))
        rho = vmf_resultant_lengths(f)
        assert np.all(rho >= 0) and np.all(rho < 1)
        sv = np.linalg.svd(vmf_expectation(f), compute_uv=False)
        assert np.all(sv < 1)

    def test_resultant_lengths_grow_with_concentration(self):
        rng = np.random.default_rng(2)
        f = rng.standard_normal((7, 3))
        scales = np.geomspace(1e-2, 1e4, 40)
        rho = np.array([vmf_resultant_lengths(s * f) for s in scales])
        assert np.all(np.diff(rho, axis=0) >= -1e-12)
        assert np.all(rho[-1] > 0.999)
        np.testing.assert_allclose(vmf_expectation(1e5 * f), vmf_mode(f), atol=1e-3)

    def test_resultant_length_monotone_in_own_singular_value(self):
        left = random_orthonormal(np.random.default_rng(3), 6, 3)
        base = np.array([4.0, 2.0, 1.0])
        for i in range(3):
            values = []
            for s in np.linspace(0.0, 10.0, 50):
                sig = base.copy()
                sig[i] = s
                values.append(vmf_resultant_lengths(left * sig)[i] if s > 0 else 0.0)
            assert np.all(np.diff(values) >= -1e-12)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(4)
        f = 3 * rng.standard_normal((6, 3))
        q1, q2 = random_orthonormal(rng, 6, 6), random_orthonormal(rng, 3, 3)
        np.testing.assert_allclose(vmf_expectation(q1 @ f @ q2.T), q1 @ vmf_expectation(f) @ q2.T, atol=1e-8)
        assert abs(vmf_log_normalizer(q1 @ f @ q2.T) - vmf_log_normalizer(f)) < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_expectation_is_gradient_of_log_normalizer(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.uniform(0.5, 5.0) * rng.standard_normal((6, 3))
        direction = rng.standard_normal(f.shape)
        h = 1e-5
        numeric = (vmf_log_normalizer(f + h * direction) - vmf_log_normalizer(f - h * direction)) / (2 * h)
        analytic = np.sum(vmf_expectation(f) * direction)
        assert abs(numeric - analytic) < 1e-3 * abs(analytic)

    def test_log_normalizer_is_convex_along_lines(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a, b = rng.standard_normal((2, 5, 2)) * rng.uniform(0.1, 20)
            fa, fb, fm = vmf_log_normalizer(a), vmf_log_normalizer(b), vmf_log_normalizer(0.5 * (a + b))
            assert fm <= 0.5 * (fa + fb) + 1e-9

    def test_moments_agree_with_separate_calls(self):
        f = np.random.default_rng(6).standard_normal((5, 2))
        u, logc = vmf_moments(f)
        np.testing.assert_array_equal(u, vmf_expectation(f))
        assert logc == vmf_log_normalizer(f)


class TestGamma:
    def test_unit_gamma(self):
        mean, mean_log, entropy = gamma_stats(GammaDist(1.0, 1.0))
        assert mean == 1.0
        assert abs(mean_log + 0.5772156649015329) < 1e-12
        assert abs(entropy - 1.0) < 1e-12

    def test_rate_scaling_halves_mean(self):
        a, b = 2.7, 1.3
        assert gamma_stats(GammaDist(a, 2 * b))[0] == gamma_stats(GammaDist(a, b))[0] / 2

    def test_mean_log_against_sampling(self):
        rng = np.random.default_rng(7)
        a, b = 2.5, 4.0
        draws = np.log(rng.gamma(a, 1 / b, size=10**6))
        stderr = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - float(GammaDist(a, b).mean_log)) < 3 * stderr

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(1.0, 1e3), b=st.floats(1e-3, 1e3))
    def test_entropy_nonnegative_for_shape_above_one(self, a, b):
        # Entropy of Gamma(a, b) shifts by -log(b); check the unit-rate part.
        assert float(GammaDist(a, 1.0).entropy) >= 0

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            GammaDist(0.0, 1.0)
        with pytest.raises(ValueError):
            GammaDist(1.0, -1.0)


class TestGaussian:
    def test_second_moment_definition(self):
        d = DiagGaussian(np.array([0.0, 2.0]), np.array([1.0, 0.25]))
        np.testing.assert_array_equal(diag_gaussian_second_moment(d), [1.0, 4.25])

    def test_second_moment_against_sampling(self):
        rng = np.random.default_rng(8)
        mean, var = rng.standard_normal(4), rng.uniform(0.1, 2, 4)
        draws = (mean + np.sqrt(var) * rng.standard_normal((10**6, 4))) ** 2
        stderr = draws.std(axis=0) / math.sqrt(draws.shape[0])
        err = np.abs(draws.mean(axis=0) - diag_gaussian_second_moment(DiagGaussian(mean, var)))
        assert np.all(err < 3 * stderr)

    def test_invalid_variance(self):
        with pytest.raises(ValueError):
            DiagGaussian(np.zeros(2), np.array([1.0, 0.0]))
