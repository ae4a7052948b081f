import math

import numpy as np
import pytest

from npads.gmm import DiagGmm, log_pdf
from npads.nn import LINEAR, Layer, Mlp
from npads.sampler import (
    RejectionBudgetExhausted,
    SamplerConfig,
    SampleStats,
    draw_standard_normal,
    generate_anomalous_batch,
    sample_anomalous_latent,
    sample_anomalous_latents,
)


def std_gmm(r=1):
    return DiagGmm(np.array([1.0]), np.zeros((1, r)), np.ones((1, r)))


def test_draw_determinism():
    a = draw_standard_normal(40, np.random.default_rng(3))
    b = draw_standard_normal(40, np.random.default_rng(3))
    assert a.shape == (40,) and np.array_equal(a, b)


def test_draw_moments():
    z = draw_standard_normal(1, np.random.default_rng(0), 100_000)[:, 0]
    assert abs(z.mean()) <= 3 / math.sqrt(1e5)
    # variance of the sample variance is 2/N for a normal
    assert abs(z.var() - 1.0) <= 3 * math.sqrt(2 / 1e5)


def test_vacuous_rejection_takes_first_draw():
    rng = np.random.default_rng(1)
    z = sample_anomalous_latent(std_gmm(3), SamplerConfig(-math.inf), rng)
    np.testing.assert_array_equal(z, draw_standard_normal(3, np.random.default_rng(1)))


def test_budget_exhausted():
    with pytest.raises(RejectionBudgetExhausted, match="rejection budget exhausted") as info:
        sample_anomalous_latent(std_gmm(2), SamplerConfig(1e6, max_attempts=50), np.random.default_rng(0))
    assert info.value.attempts == 50 and info.value.best_nll < 1e6
    with pytest.raises(RejectionBudgetExhausted):
        sample_anomalous_latents(std_gmm(2), SamplerConfig(1e6, max_attempts=300), 4, np.random.default_rng(0))


def test_batched_matches_single_draw_semantics():
    gmm = std_gmm(2)
    cfg = SamplerConfig(2.5)
    batch = sample_anomalous_latents(gmm, cfg, 50, np.random.default_rng(8), chunk=16)
    rng = np.random.default_rng(8)
    pool = np.vstack([draw_standard_normal(2, rng, 16) for _ in range(300)])
    keep = pool[-log_pdf(gmm, pool) > cfg.phi_z][:50]
    np.testing.assert_array_equal(batch, keep)


def test_acceptance_rate_at_80th_percentile():
    gmm = std_gmm(1)
    rng = np.random.default_rng(11)
    prior = draw_standard_normal(1, rng, 100_000)
    phi = float(np.quantile(-log_pdf(gmm, prior), 0.8))
    stats = SampleStats()
    z = sample_anomalous_latents(gmm, SamplerConfig(phi), 20_000, rng, stats)
    assert np.all(-log_pdf(gmm, z) > phi)
    assert stats.acceptance_rate == pytest.approx(0.2, abs=0.01)


def test_generate_empty_and_identity():
    gmm = std_gmm(3)
    ident = Mlp([Layer(np.eye(3), np.zeros(3), LINEAR)])
    x, z = generate_anomalous_batch(ident, gmm, SamplerConfig(3.0), 0, np.random.default_rng(0))
    assert x.shape == (0, 3)
    x, z = generate_anomalous_batch(ident, gmm, SamplerConfig(3.0), 7, np.random.default_rng(0))
    np.testing.assert_array_equal(x, z)
    x2, _ = generate_anomalous_batch(ident, gmm, SamplerConfig(3.0), 7, np.random.default_rng(0))
    np.testing.assert_array_equal(x, x2)
