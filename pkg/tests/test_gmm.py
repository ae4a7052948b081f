import math

import numpy as np
import pytest

from npads.gmm import DiagGmm, em_fit, gmm_to_bytes, log_pdf, read_gmm, total_loglik

import io


def naive_log_pdf(gmm, z):
    """Sum of explicit component densities, one scalar at a time."""
    total = 0.0
    for w, mu, var in zip(gmm.weights, gmm.means, gmm.variances):
        dens = w
        for zi, mi, vi in zip(z, mu, var):
            dens *= math.exp(-0.5 * (zi - mi) ** 2 / vi) / math.sqrt(2 * math.pi * vi)
        total += dens
    return math.log(total)


def random_gmm(rng, k, r):
    w = rng.uniform(0.2, 1.0, k)
    return DiagGmm(w / w.sum(), rng.normal(0, 1.5, (k, r)), rng.uniform(0.3, 2.0, (k, r)))


class TestLogPdf:
    def test_standard_normal_mode(self):
        g = DiagGmm(np.array([1.0]), np.zeros((1, 1)), np.ones((1, 1)))
        assert log_pdf(g, np.array([0.0])) == pytest.approx(-0.918939, abs=1e-6)
        assert log_pdf(g, np.array([0.0])) == pytest.approx(-0.5 * math.log(2 * math.pi), rel=1e-15)

    def test_mixture_collapse(self):
        rng = np.random.default_rng(0)
        mu, var = rng.standard_normal((1, 3)), rng.uniform(0.5, 2, (1, 3))
        one = DiagGmm(np.array([1.0]), mu, var)
        two = DiagGmm(np.array([0.5, 0.5]), np.vstack([mu, mu]), np.vstack([var, var]))
        z = rng.standard_normal((20, 3))
        np.testing.assert_allclose(log_pdf(two, z), log_pdf(one, z), rtol=1e-14)

    def test_naive_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            g = random_gmm(rng, 3, 4)
            z = rng.normal(0, 2, (25, 4))
            got = log_pdf(g, z)
            oracle = np.array([naive_log_pdf(g, row) for row in z])
            np.testing.assert_allclose(got, oracle, rtol=1e-10)

    def test_far_point_is_finite(self):
        g = DiagGmm(np.array([1.0]), np.zeros((1, 40)), np.full((1, 40), 1e-6))
        assert math.isfinite(log_pdf(g, np.full(40, 50.0)))

    def test_dimension_mismatch(self):
        g = random_gmm(np.random.default_rng(0), 2, 3)
        with pytest.raises(ValueError):
            log_pdf(g, np.zeros(4))

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            DiagGmm(np.array([0.7, 0.7]), np.zeros((2, 1)), np.ones((2, 1)))


class TestEm:
    def test_single_component_closed_form(self):
        x = np.random.default_rng(2).normal(3.0, 2.0, (300, 5))
        g = em_fit(x, k=1, iters=5, rng=np.random.default_rng(0))
        np.testing.assert_allclose(g.means[0], x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(g.variances[0], x.var(axis=0), rtol=1e-10)
        assert g.weights[0] == 1.0

    def test_two_clusters(self):
        rng = np.random.default_rng(3)
        x = np.vstack([rng.normal(-10, 0.1, (200, 2)), rng.normal(10, 0.1, (200, 2))])
        g = em_fit(x, k=2, iters=20, rng=rng)
        order = np.argsort(g.means[:, 0])
        np.testing.assert_allclose(g.means[order], [[-10, -10], [10, 10]], atol=0.1)
        np.testing.assert_allclose(g.weights, 0.5, atol=0.05)

    def test_monotone_trace(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((500, 4)) + rng.integers(0, 3, 500)[:, None] * 2.0
            trace = np.array(em_fit(x, k=3, iters=20, rng=rng).loglik_trace)
            assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[:-1]).clip(1.0))

    def test_variance_floor(self):
        x = np.tile([1.0, 2.0], (50, 1))
        g = em_fit(x, k=2, iters=5, rng=np.random.default_rng(0))
        assert np.all(g.variances >= 1e-6)
        assert abs(g.weights.sum() - 1.0) <= 1e-12

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            em_fit(np.zeros((3, 2)), k=4, rng=np.random.default_rng(0))

    def test_warm_start_not_worse(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((400, 3))
        g0 = em_fit(x, k=4, iters=3, rng=rng)
        g1 = em_fit(x, iters=5, rng=rng, init=g0)
        assert total_loglik(g1, x) >= total_loglik(g0, x) - 1e-9

    def test_density_integrates_to_one(self):
        # 1-D mixture on a fine grid
        rng = np.random.default_rng(5)
        g = random_gmm(rng, 3, 1)
        grid = np.linspace(-20, 20, 40001)
        dens = np.exp(log_pdf(g, grid[:, None]))
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-8)

    def test_component_permutation(self):
        rng = np.random.default_rng(6)
        g = random_gmm(rng, 4, 3)
        p = rng.permutation(4)
        h = DiagGmm(g.weights[p], g.means[p], g.variances[p])
        z = rng.standard_normal((30, 3))
        np.testing.assert_allclose(log_pdf(g, z), log_pdf(h, z), rtol=1e-13)

    def test_serialization_round_trip(self):
        g = random_gmm(np.random.default_rng(7), 3, 2)
        back = read_gmm(io.BytesIO(gmm_to_bytes(g)))
        for a, b in ((g.weights, back.weights), (g.means, back.means), (g.variances, back.variances)):
            assert a.tobytes() == b.tobytes()
