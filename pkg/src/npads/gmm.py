"""Diagonal-covariance Gaussian mixture: log density and EM fitting."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

VAR_FLOOR = 1e-6
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class DiagGmm:
    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, R)
    variances: np.ndarray  # (K, R)
    loglik_trace: list[float] = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        k = self.weights.size
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise ValueError("inconsistent GMM parameter shapes")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def component_log_pdf(gmm: DiagGmm, z: np.ndarray) -> np.ndarray:
    """ln w_k + ln N(z | mu_k, diag var_k), shape (N, K)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != gmm.dim:
        raise ValueError(f"latent dim {z.shape[1]} != GMM dim {gmm.dim}")
    diff = z[:, None, :] - gmm.means[None, :, :]
    maha = np.einsum("nkr,kr->nk", diff * diff, 1.0 / gmm.variances)
    log_norm = -0.5 * (gmm.dim * LOG_2PI + np.sum(np.log(gmm.variances), axis=1))
    return np.log(gmm.weights) + log_norm - 0.5 * maha


def log_pdf(gmm: DiagGmm, z: np.ndarray) -> np.ndarray | float:
    """ln p(z | gmm) for one vector (returns float) or a batch (returns (N,))."""
    single = np.ndim(z) == 1
    out = logsumexp(component_log_pdf(gmm, z), axis=1)
    return float(out[0]) if single else out


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(x, resp, var_floor):
    nk = resp.sum(axis=0)
    safe = np.maximum(nk, np.finfo(float).tiny)
    means = (resp.T @ x) / safe[:, None]
    sq = (resp.T @ (x * x)) / safe[:, None]
    variances = np.maximum(sq - means ** 2, var_floor)
    return nk, means, variances


def em_fit(latents: np.ndarray, k: int = 16, iters: int = 20, rng: np.random.Generator | None = None,
           tol: float = 1e-6, var_floor: float = VAR_FLOOR, init: DiagGmm | None = None) -> DiagGmm:
    """Fit a diagonal GMM by EM.

    Starts from k-means++ seeds (or from ``init`` when warm-starting) and runs
    up to ``iters`` EM iterations, stopping early once the relative change in
    total log-likelihood drops below ``tol``.  The returned model carries the
    per-iteration log-likelihood trace, which EM keeps non-decreasing.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("latents must be an (N, R) matrix")
    n = x.shape[0]
    if init is not None:
        k = init.n_components
    if n < k:
        raise ValueError(f"need at least K={k} latents, got {n}")
    rng = np.random.default_rng() if rng is None else rng

    if init is None:
        means = _kmeanspp(x, k, rng)
        variances = np.tile(np.maximum(x.var(axis=0), var_floor), (k, 1))
        weights = np.full(k, 1.0 / k)
    else:
        means, variances, weights = init.means.copy(), init.variances.copy(), init.weights.copy()

    trace = []
    prev = -np.inf
    for _ in range(iters):
        gmm = DiagGmm(weights, means, variances)
        comp = component_log_pdf(gmm, x)
        row_ll = logsumexp(comp, axis=1)
        total = float(row_ll.sum())
        trace.append(total)
        if np.isfinite(prev) and abs(total - prev) <= tol * abs(prev):
            break
        prev = total
        resp = np.exp(comp - row_ll[:, None])
        nk, means, variances = _m_step(x, resp, var_floor)
        empty = nk < 1e-8 * n
        if np.any(empty):
            # reseed dead components on the worst-explained points
            worst = np.argsort(row_ll)[: int(empty.sum())]
            means[empty] = x[worst]
            variances[empty] = np.maximum(x.var(axis=0), var_floor)
            nk[empty] = 1.0
        weights = nk / nk.sum()

    gmm = DiagGmm(weights, means, variances)
    final = float(log_pdf(gmm, x).sum())
    if not trace or final != trace[-1]:
        trace.append(final)
    gmm.loglik_trace = trace
    return gmm


def total_loglik(gmm: DiagGmm, latents: np.ndarray) -> float:
    return float(np.sum(log_pdf(gmm, np.atleast_2d(latents))))


def write_gmm(fh, gmm: DiagGmm) -> None:
    fh.write(struct.pack("<II", gmm.n_components, gmm.dim))
    for arr in (gmm.weights, gmm.means, gmm.variances):
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_gmm(fh) -> DiagGmm:
    k, r = struct.unpack("<II", fh.read(8))

    def take(count):
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise ValueError("truncated GMM block")
        return np.frombuffer(raw, dtype="<f8").copy()

    weights = take(k)
    means = take(k * r).reshape(k, r)
    variances = take(k * r).reshape(k, r)
    return DiagGmm(weights, means, variances)


def gmm_to_bytes(gmm: DiagGmm) -> bytes:
    buf = io.BytesIO()
    write_gmm(buf, gmm)
    return buf.getvalue()
