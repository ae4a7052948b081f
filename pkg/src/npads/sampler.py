"""Rejection sampling of latent vectors the normal-sound GMM finds unlikely."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gmm import DiagGmm, log_pdf
from .nn import Mlp, forward


class RejectionBudgetExhausted(RuntimeError):
    """``best_nll`` is the largest -ln p(z) among the rejected run of draws."""

    def __init__(self, phi_z: float, attempts: int, best_nll: float = float("-inf")):
        super().__init__(f"rejection budget exhausted: {attempts} consecutive draws had "
                         f"-ln p(z) <= phi_z={phi_z:.6g}")
        self.phi_z = phi_z
        self.attempts = attempts
        self.best_nll = best_nll


@dataclass(frozen=True)
class SamplerConfig:
    phi_z: float
    max_attempts: int = 10_000

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


def draw_standard_normal(r: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Box-Muller standard normals from the generator's uniforms.

    Returns shape (r,) when ``n`` is None, else (n, r).
    """
    if r < 1:
        raise ValueError("dimension must be >= 1")
    count = r if n is None else n * r
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = rad * np.cos(ang)
    z[1::2] = rad * np.sin(ang)
    z = z[:count]
    return z if n is None else z.reshape(n, r)


def sample_anomalous_latent(gmm: DiagGmm, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw N(0, I) candidates until one has -ln p(z | gmm) > phi_z."""
    best = -np.inf
    for _ in range(cfg.max_attempts):
        z = draw_standard_normal(gmm.dim, rng)
        nll = -log_pdf(gmm, z)
        if nll > cfg.phi_z:
            return z
        best = max(best, nll)
    raise RejectionBudgetExhausted(cfg.phi_z, cfg.max_attempts, best)


@dataclass
class SampleStats:
    accepted: int = 0
    drawn: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.drawn if self.drawn else float("nan")


def sample_anomalous_latents(gmm: DiagGmm, cfg: SamplerConfig, m: int, rng: np.random.Generator,
                             stats: SampleStats | None = None, chunk: int = 256) -> np.ndarray:
    """M accepted latents, drawing candidates in vectorized chunks.

    Each returned row is the first accepted candidate after the previous one,
    exactly as repeated single draws would give; the attempt budget applies to
    every run of consecutive rejections.
    """
    r = gmm.dim
    out = np.empty((m, r))
    filled = 0
    run = 0
    best = -np.inf  # largest rejected nll in the current run of rejections
    while filled < m:
        cand = draw_standard_normal(r, rng, chunk)
        nll = -log_pdf(gmm, cand)
        accept = nll > cfg.phi_z
        hits = np.flatnonzero(accept)[: m - filled]
        # rejections preceding each accepted candidate, counting the run carried in
        gaps = np.diff(np.concatenate(([-1 - run], hits))) - 1
        if np.any(gaps >= cfg.max_attempts):
            raise RejectionBudgetExhausted(cfg.phi_z, cfg.max_attempts, max(best, nll[~accept].max()))
        out[filled:filled + hits.size] = cand[hits]
        filled += hits.size
        if filled == m:
            used = int(hits[-1]) + 1
        else:
            used = chunk
            if hits.size:
                run, best = chunk - 1 - int(hits[-1]), -np.inf
                tail = nll[hits[-1] + 1:]
            else:
                run, tail = run + chunk, nll
            if tail.size:
                best = max(best, float(tail.max()))
            if run >= cfg.max_attempts:
                raise RejectionBudgetExhausted(cfg.phi_z, cfg.max_attempts, best)
        if stats is not None:
            stats.drawn += used
            stats.accepted += hits.size
    return out


def generate_anomalous_batch(generator: Mlp, gmm: DiagGmm, cfg: SamplerConfig, m: int,
                             rng: np.random.Generator, stats: SampleStats | None = None):
    """Decode M accepted latents through the generator; returns (x_anom, z_anom)."""
    if generator.n_in != gmm.dim:
        raise ValueError(f"generator input dim {generator.n_in} != GMM dim {gmm.dim}")
    if m == 0:
        return np.empty((0, generator.n_out)), np.empty((0, gmm.dim))
    z = sample_anomalous_latents(gmm, cfg, m, rng, stats)
    return forward(generator, z)[0], z
