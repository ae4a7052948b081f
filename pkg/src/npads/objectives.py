"""Anomaly scores, the KLD/reconstruction loss, smoothed TPR/FPR objectives and their gradients.

Gradients are returned as lists aligned with ``Mlp.params()`` so they can be
handed straight to :class:`npads.nn.Adam`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import Mlp, backward, forward

SIGMOID_CLAMP = 500.0
COV_RIDGE = 1e-6


def sigmoid(x):
    x = np.clip(np.asarray(x, dtype=np.float64), -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def _dsigmoid(x):
    s = sigmoid(x)
    return s * (1.0 - s)


# --------------------------------------------------------------------------
# Anomaly score
# --------------------------------------------------------------------------

@dataclass
class ScorePass:
    x: np.ndarray
    recon: np.ndarray
    scores: np.ndarray
    enc_cache: object
    dec_cache: object


def score_forward(encoder: Mlp, decoder: Mlp, x: np.ndarray) -> ScorePass:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z, enc_cache = forward(encoder, x)
    recon, dec_cache = forward(decoder, z)
    if recon.shape != x.shape:
        raise ValueError(f"reconstruction shape {recon.shape} != input shape {x.shape}")
    scores = np.sum((x - recon) ** 2, axis=1)
    return ScorePass(x, recon, scores, enc_cache, dec_cache)


def score_backward(encoder: Mlp, decoder: Mlp, sp: ScorePass, dscores: np.ndarray):
    """Backprop d(loss)/d(score_n) through decoder and encoder."""
    grad_recon = 2.0 * (sp.recon - sp.x) * np.asarray(dscores)[:, None]
    dec_grads, grad_z = backward(decoder, sp.dec_cache, grad_recon)
    enc_grads, _ = backward(encoder, sp.enc_cache, grad_z)
    return enc_grads, dec_grads


def anomaly_score(encoder: Mlp, decoder: Mlp, x: np.ndarray):
    """Squared reconstruction error ||x - D(E(x))||^2 per row (float for a single vector)."""
    scores = score_forward(encoder, decoder, x).scores
    return float(scores[0]) if np.ndim(x) == 1 else scores


def mean_reconstruction(encoder: Mlp, decoder: Mlp, x: np.ndarray):
    """Mean anomaly score over a batch and its gradients (plain autoencoder loss)."""
    sp = score_forward(encoder, decoder, x)
    n = sp.scores.size
    enc_grads, dec_grads = score_backward(encoder, decoder, sp, np.full(n, 1.0 / n))
    return float(sp.scores.mean()), enc_grads, dec_grads


# --------------------------------------------------------------------------
# Latent Gaussian constraint
# --------------------------------------------------------------------------

@dataclass
class BatchGaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def batch_stats(latents: np.ndarray, ridge: float = COV_RIDGE) -> BatchGaussianStats:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("batch_stats needs at least 2 latent vectors")
    mu = z.mean(axis=0)
    d = z - mu
    sigma = d.T @ d / z.shape[0] + ridge * np.eye(z.shape[1])
    return BatchGaussianStats(mu, sigma)


def _chol(sigma):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc


def kld_to_standard(stats: BatchGaussianStats) -> float:
    """D(N(0, I) || N(mu, Sigma)) = 1/2 [ln|Sigma| + tr(Sigma^-1) + mu' Sigma^-1 mu - R]."""
    sigma = np.asarray(stats.sigma, dtype=np.float64)
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma).max())):
        raise ValueError("covariance is not symmetric")
    chol = _chol(sigma)
    r = sigma.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    inv = np.linalg.inv(sigma)
    quad = float(stats.mu @ inv @ stats.mu)
    return float(0.5 * (logdet + np.trace(inv) + quad - r))


def kld_latent_grad(latents: np.ndarray, ridge: float = COV_RIDGE):
    """KLD of the batch Gaussian fit and its gradient w.r.t. every latent row."""
    z = np.asarray(latents, dtype=np.float64)
    m = z.shape[0]
    stats = batch_stats(z, ridge)
    value = kld_to_standard(stats)
    inv = np.linalg.inv(stats.sigma)
    inv = 0.5 * (inv + inv.T)
    a = inv @ stats.mu
    g_sigma = 0.5 * (inv - inv @ inv - np.outer(a, a))
    d = z - stats.mu
    # mean-centering makes the path through mu inside Sigma vanish
    grad = (2.0 / m) * d @ g_sigma + a[None, :] / m
    return value, grad


def j_kr(encoder: Mlp, generator: Mlp, x: np.ndarray, ridge: float = COV_RIDGE) -> float:
    """KLD of the latent batch plus the summed reconstruction error through the generator."""
    z = encoder(np.atleast_2d(x))
    recon = generator(z)
    return kld_to_standard(batch_stats(z, ridge)) + float(np.sum((x - recon) ** 2))


def j_kr_grads(encoder: Mlp, generator: Mlp, x: np.ndarray, ridge: float = COV_RIDGE):
    """Returns (value, kld, encoder grads, generator grads)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z, enc_cache = forward(encoder, x)
    recon, gen_cache = forward(generator, z)
    kld, grad_z_kld = kld_latent_grad(z, ridge)
    rec = float(np.sum((x - recon) ** 2))
    gen_grads, grad_z = backward(generator, gen_cache, 2.0 * (recon - x))
    enc_grads, _ = backward(encoder, enc_cache, grad_z + grad_z_kld)
    return kld + rec, kld, enc_grads, gen_grads


# --------------------------------------------------------------------------
# Thresholds and smoothed detection rates
# --------------------------------------------------------------------------

def threshold_index(m: int, rho: float) -> int:
    """1-based position floor(rho * M), clamped to [1, M]."""
    return min(m, max(1, math.floor(rho * m + 1e-9)))


def select_threshold(scores, rho: float) -> float:
    """floor(rho*M)-th largest score (1-based, at least the maximum)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("cannot select a threshold from an empty score list")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    ordered = np.sort(s, kind="stable")[::-1]
    return float(ordered[threshold_index(s.size, rho) - 1])


def smooth_tpr(scores_anom, phi: float) -> float:
    return float(np.mean(sigmoid(np.asarray(scores_anom) - phi)))


def smooth_fpr(scores_norm, phi: float) -> float:
    return float(np.mean(sigmoid(np.asarray(scores_norm) - phi)))


def j_np(scores_anom, scores_norm, phi_rho: float) -> float:
    return smooth_tpr(scores_anom, phi_rho) - smooth_fpr(scores_norm, phi_rho)


def j_np_score_grads(scores_anom, scores_norm, phi_rho: float):
    """d J_NP / d score for both batches, with phi_rho held constant."""
    sa = np.asarray(scores_anom, dtype=np.float64)
    su = np.asarray(scores_norm, dtype=np.float64)
    return _dsigmoid(sa - phi_rho) / sa.size, -_dsigmoid(su - phi_rho) / su.size


def j_auc(scores_anom, scores_norm) -> float:
    sa = np.asarray(scores_anom, dtype=np.float64)
    su = np.asarray(scores_norm, dtype=np.float64)
    tpr = sigmoid(sa[None, :] - su[:, None]).mean(axis=1)
    fpr = sigmoid(su[None, :] - su[:, None]).mean(axis=1)
    return float(np.mean(tpr - fpr))


def j_auc_score_grads(scores_anom, scores_norm):
    """d J_AUC / d score, differentiating through the normal scores used as thresholds."""
    sa = np.asarray(scores_anom, dtype=np.float64)
    su = np.asarray(scores_norm, dtype=np.float64)
    mu, ma = su.size, sa.size
    d_an = _dsigmoid(sa[None, :] - su[:, None]) / (mu * ma)  # rows: threshold n, cols: anomaly m
    d_uu = _dsigmoid(su[None, :] - su[:, None]) / (mu * mu)  # rows: threshold n, cols: normal k
    g_anom = d_an.sum(axis=0)
    g_norm = -d_an.sum(axis=1) - d_uu.sum(axis=0) + d_uu.sum(axis=1)
    return g_anom, g_norm


def _detector_grads(encoder, decoder, x_anom, x_norm, score_grads):
    x = np.vstack([np.atleast_2d(x_anom), np.atleast_2d(x_norm)])
    sp = score_forward(encoder, decoder, x)
    ma = np.atleast_2d(x_anom).shape[0]
    sa, su = sp.scores[:ma], sp.scores[ma:]
    value, ga, gu = score_grads(sa, su)
    enc_grads, dec_grads = score_backward(encoder, decoder, sp, np.concatenate([ga, gu]))
    return value, enc_grads, dec_grads, sa, su


def j_np_grads(encoder: Mlp, decoder: Mlp, x_anom, x_norm, phi_rho: float):
    """J_NP through the networks; returns (value, enc grads, dec grads, anomaly scores, normal scores)."""
    def fn(sa, su):
        return (j_np(sa, su, phi_rho), *j_np_score_grads(sa, su, phi_rho))
    return _detector_grads(encoder, decoder, x_anom, x_norm, fn)


def j_auc_grads(encoder: Mlp, decoder: Mlp, x_anom, x_norm):
    def fn(sa, su):
        return (j_auc(sa, su), *j_auc_score_grads(sa, su))
    return _detector_grads(encoder, decoder, x_anom, x_norm, fn)
