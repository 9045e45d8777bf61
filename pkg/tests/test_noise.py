import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from mixed_euler.noise import (
    CHOLESKY_MAX_N,
    CholeskyFGN,
    CirculantFGN,
    GridSpec,
    NoiseError,
    NoisePath,
    check_hurst,
    fbm_covariance,
    fgn_covariance,
    fgn_sampler,
    path_streams,
    sample_brownian,
    sample_noise_batch,
    sample_noise_path,
    singular_kernel,
    write_noise_csv,
)


def toeplitz(n, h, delta):
    g = np.atleast_1d(fgn_covariance(np.arange(n), h, delta))
    idx = np.arange(n)
    return g[np.abs(idx[:, None] - idx[None, :])]


def implied_covariance(sampler):
    """Covariance of the linear map z -> increments, read off the identity basis."""
    A = sampler.transform(np.eye(sampler.normals_needed))
    return A.T @ A


class TestGridSpec:
    def test_delta_and_nodes(self):
        g = GridSpec(2.0, 8)
        assert g.delta == 0.25
        assert g.node(8) == 2.0
        np.testing.assert_allclose(g.nodes(), np.linspace(0, 2, 9), rtol=0, atol=1e-15)

    def test_last_node_is_pinned(self):
        g = GridSpec(0.3, 7)
        assert g.nodes()[-1] == 0.3 and g.node(7) == 0.3

    @pytest.mark.parametrize("horizon,steps", [(0.0, 4), (-1.0, 4), (math.inf, 4), (1.0, 0), (1.0, 2.5)])
    def test_rejects_bad_grids(self, horizon, steps):
        with pytest.raises(NoiseError):
            GridSpec(horizon, steps)

    def test_node_out_of_range(self):
        with pytest.raises(NoiseError):
            GridSpec(1.0, 4).node(5)

    def test_coarsen(self):
        assert GridSpec(1.0, 64).coarsen(8) == GridSpec(1.0, 8)
        with pytest.raises(NoiseError, match="does not divide"):
            GridSpec(1.0, 64).coarsen(3)


class TestHurst:
    @pytest.mark.parametrize("h", [0.51, 0.75, 0.99])
    def test_accepts_interior(self, h):
        assert check_hurst(h) == h

    @pytest.mark.parametrize("h", [0.5, 1.0, 0.3, 1.2])
    def test_rejects_outside(self, h):
        with pytest.raises(NoiseError):
            check_hurst(h)

    def test_half_needs_degenerate_flag(self):
        assert check_hurst(0.5, degenerate=True) == 0.5
        with pytest.raises(NoiseError):
            check_hurst(0.4, degenerate=True)


class TestCovariances:
    def test_fbm_known_value(self):
        assert fbm_covariance(2.0, 1.0, 0.75) == pytest.approx(math.sqrt(2.0), abs=1e-14)

    def test_fbm_variance(self):
        assert fbm_covariance(0.7, 0.7, 0.6) == pytest.approx(0.7**1.2, rel=1e-14)

    def test_fbm_negative_time(self):
        with pytest.raises(NoiseError):
            fbm_covariance(-0.1, 1.0, 0.75)

    def test_fgn_known_value(self):
        assert fgn_covariance(1, 0.75, 1.0) == pytest.approx((2**1.5 - 2) / 2, abs=1e-14)

    @pytest.mark.parametrize("h", [0.55, 0.75, 0.9])
    @pytest.mark.parametrize("k", [0, 1, 2, 7])
    def test_fgn_matches_fbm_differencing(self, h, k):
        # E[(B_{k+1} - B_k)(B_1 - B_0)] from the fBm covariance
        d = 0.125
        C = lambda t, s: fbm_covariance(t, s, h)
        brute = C((k + 1) * d, d) - C((k + 1) * d, 0.0) - C(k * d, d) + C(k * d, 0.0)
        assert fgn_covariance(k, h, d) == pytest.approx(brute, rel=1e-12, abs=1e-15)

    def test_fgn_array_shape(self):
        g = fgn_covariance(np.arange(5), 0.7, 0.1)
        assert g.shape == (5,)
        assert g[0] == pytest.approx(0.1**1.4)

    def test_fgn_symmetric_in_lag(self):
        np.testing.assert_array_equal(fgn_covariance(np.arange(-4, 0), 0.8, 0.3),
                                      fgn_covariance(np.arange(4, 0, -1), 0.8, 0.3))

    def test_fgn_rejects_nonpositive_delta(self):
        with pytest.raises(NoiseError):
            fgn_covariance(1, 0.75, 0.0)

    def test_degenerate_half_is_white(self):
        g = fgn_covariance(np.arange(6), 0.5, 0.25)
        np.testing.assert_allclose(g, [0.25, 0, 0, 0, 0, 0], atol=1e-16)

    def test_singular_kernel_value(self):
        assert singular_kernel(2.0, 1.0, 0.75) == pytest.approx(0.375, abs=1e-15)

    def test_singular_kernel_diagonal(self):
        with pytest.raises(NoiseError):
            singular_kernel(0.4, 0.4, 0.75)

    @pytest.mark.parametrize("h", [0.55, 0.7, 0.9])
    def test_kernel_double_integral_is_one(self, h):
        # the algebraic weight absorbs |t-s|^{2H-2}; quad then integrates a smooth remainder
        alpha = 2 * h - 2

        def smooth(s, t):
            # quadpack samples the endpoints; use the continuous extension there
            if s == t:
                return h * (2 * h - 1)
            return singular_kernel(t, s, h) * abs(t - s) ** (-alpha)

        def inner(t):
            left = integrate.quad(smooth, 0.0, t, args=(t,), weight="alg", wvar=(0.0, alpha))[0] if t > 0 else 0.0
            right = integrate.quad(smooth, t, 1.0, args=(t,), weight="alg", wvar=(alpha, 0.0))[0] if t < 1 else 0.0
            return left + right

        total, err = integrate.quad(inner, 0.0, 1.0, epsabs=1e-12, epsrel=1e-12)
        assert total == pytest.approx(1.0, abs=1e-9)

    @given(h=st.floats(0.51, 0.99), n=st.integers(1, 200), T=st.floats(0.1, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_sum_of_increments_has_variance_T_2H(self, h, n, T):
        assert toeplitz(n, h, T / n).sum() == pytest.approx(T ** (2 * h), rel=1e-12)


class TestSamplers:
    @pytest.mark.parametrize("h", [0.6, 0.75, 0.9])
    @pytest.mark.parametrize("n", [1, 5, 64, 100])
    def test_cholesky_factor_reproduces_covariance(self, h, n):
        s = CholeskyFGN(n, h, 1.0 / n)
        np.testing.assert_allclose(s.factor @ s.factor.T, toeplitz(n, h, 1.0 / n), rtol=0, atol=1e-14)
        np.testing.assert_allclose(implied_covariance(s), toeplitz(n, h, 1.0 / n), rtol=0, atol=1e-14)

    @pytest.mark.parametrize("h", [0.6, 0.75, 0.9])
    @pytest.mark.parametrize("n", [1, 5, 64, 100])
    def test_circulant_map_reproduces_covariance(self, h, n):
        s = CirculantFGN(n, h, 1.0 / n)
        assert s.size >= 2 * n and s.size & (s.size - 1) == 0
        assert np.all(s.eigenvalues >= 0)
        np.testing.assert_allclose(implied_covariance(s), toeplitz(n, h, 1.0 / n), rtol=0, atol=1e-13)

    def test_cholesky_size_guard(self):
        with pytest.raises(NoiseError, match="limited"):
            CholeskyFGN(CHOLESKY_MAX_N + 1, 0.75, 1e-3)

    def test_factor_is_read_only(self):
        s = CholeskyFGN(8, 0.7, 0.125)
        with pytest.raises(ValueError):
            s.factor[0, 0] = 1.0

    def test_auto_choice(self):
        assert fgn_sampler(64, 0.7, 1 / 64).method == "cholesky"
        assert fgn_sampler(CHOLESKY_MAX_N + 4, 0.7, 1e-4).method == "circulant"

    def test_unknown_method(self):
        with pytest.raises(NoiseError):
            fgn_sampler(8, 0.7, 0.125, "spectral")

    def test_brownian_moments(self):
        grid = GridSpec(1.0, 100)
        dW = np.concatenate([sample_brownian(grid, np.random.default_rng(i)) for i in range(1000)])
        sd = math.sqrt(grid.delta)
        assert abs(dW.mean()) < 3 * sd / math.sqrt(dW.size)
        # variance of a sample variance is 2 sigma^4 / n for Gaussians
        assert abs(dW.var() - grid.delta) < 3 * grid.delta * math.sqrt(2 / dW.size)

    @pytest.mark.parametrize("method", ["cholesky", "circulant"])
    def test_empirical_covariance_small(self, method):
        n, h, paths = 16, 0.75, 20000
        grid = GridSpec(1.0, n)
        _, dBH = sample_noise_batch(grid, h, 11, range(paths), method)
        prods = dBH[:, :, None] * dBH[:, None, :]
        emp = prods.mean(axis=0)
        se = prods.std(axis=0, ddof=1) / math.sqrt(paths)
        z = (emp - toeplitz(n, h, grid.delta)) / se
        assert np.abs(z).max() < 4.5

    def test_ks_against_cholesky_marginals(self):
        grid, h, paths = GridSpec(1.0, 64), 0.75, 100_000
        _, a = sample_noise_batch(grid, h, 1, range(paths), "cholesky")
        _, b = sample_noise_batch(grid, h, 2, range(paths), "circulant")
        for k in (0, 31, 63):
            assert stats.ks_2samp(a[:, k], b[:, k]).pvalue > 0.01
        assert stats.ks_2samp(a.sum(axis=1), b.sum(axis=1)).pvalue > 0.01


class TestNoisePaths:
    def test_streams_depend_only_on_seed_and_index(self):
        w1, b1 = path_streams(5, 3)
        path_streams(5, 2)
        w2, b2 = path_streams(5, 3)
        assert w1.standard_normal() == w2.standard_normal()
        assert b1.standard_normal() == b2.standard_normal()

    def test_brownian_and_fractional_streams_differ(self):
        w, b = path_streams(0, 0)
        assert not np.array_equal(w.standard_normal(8), b.standard_normal(8))

    def test_path_is_reproducible(self):
        grid = GridSpec(1.0, 32)
        p = sample_noise_path(grid, 0.7, 9, 4)
        q = sample_noise_path(grid, 0.7, 9, 4)
        np.testing.assert_array_equal(p.dW, q.dW)
        np.testing.assert_array_equal(p.dBH, q.dBH)
        assert p.seed == (9, 4)

    @pytest.mark.parametrize("method", ["cholesky", "circulant"])
    def test_batch_rows_match_single_paths(self, method):
        grid = GridSpec(1.0, 48)
        dW, dBH = sample_noise_batch(grid, 0.8, 3, [7, 2, 11], method)
        for row, i in enumerate([7, 2, 11]):
            p = sample_noise_path(grid, 0.8, 3, i, method)
            np.testing.assert_array_equal(dW[row], p.dW)
            np.testing.assert_allclose(dBH[row], p.dBH, rtol=0, atol=1e-13)

    def test_batch_is_bit_reproducible(self):
        grid = GridSpec(1.0, 64)
        a = sample_noise_batch(grid, 0.7, 1, range(10))
        b = sample_noise_batch(grid, 0.7, 1, range(10))
        np.testing.assert_array_equal(a[1], b[1])

    def test_rejects_bad_hurst(self):
        with pytest.raises(NoiseError):
            sample_noise_path(GridSpec(1.0, 8), 0.5, 0)

    def test_degenerate_mode_gives_white_noise(self):
        grid = GridSpec(1.0, 8)
        p = sample_noise_path(grid, 0.5, 0, degenerate=True)
        s = fgn_sampler(8, 0.5, grid.delta)
        np.testing.assert_allclose(s.factor, math.sqrt(grid.delta) * np.eye(8), atol=1e-15)
        assert p.dBH.shape == (8,)

    def test_length_validation(self):
        with pytest.raises(NoiseError, match="length 4"):
            NoisePath(GridSpec(1.0, 4), np.zeros(4), np.zeros(3))

    def test_coarsen_sums_blocks(self):
        p = NoisePath(GridSpec(1.0, 4), np.arange(4.0), np.arange(4.0) * 2)
        c = p.coarsen(2)
        np.testing.assert_array_equal(c.dW, [1.0, 5.0])
        np.testing.assert_array_equal(c.dBH, [2.0, 10.0])
        assert c.grid == GridSpec(1.0, 2)

    def test_csv_round_trip(self, tmp_path):
        p = sample_noise_path(GridSpec(1.0, 10), 0.7, 2)
        out = tmp_path / "noise.csv"
        write_noise_csv(out, p)
        raw = out.read_bytes()
        assert raw.startswith(b"k,dW,dBH\n") and b"\r" not in raw
        rows = list(csv.reader(out.open()))[1:]
        assert [float(r[1]) for r in rows] == list(p.dW)
        assert [float(r[2]) for r in rows] == list(p.dBH)


def test_brownian_mean_of_a_million_increments():
    # sd of the mean is sqrt(0.01 / 1e6) = 1e-4, so the 3 sigma band is 3e-4
    dW = sample_brownian(GridSpec(10_000.0, 1_000_000), np.random.default_rng(7))
    assert abs(dW.mean()) < 3e-4
