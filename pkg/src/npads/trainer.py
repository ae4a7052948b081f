"""Training loops for the plain autoencoder and the NP / AUC objectives."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import NormStats, apply_norm, fit_norm_stats
from .gmm import DiagGmm, em_fit, log_pdf
from .model import TrainedModel
from .nn import Mlp, forward, init_mlp, mlp_optimizer
from .objectives import (
    j_auc,
    j_auc_score_grads,
    j_kr_grads,
    j_np,
    j_np_score_grads,
    mean_reconstruction,
    score_backward,
    score_forward,
    select_threshold,
    threshold_index,
)
from .sampler import RejectionBudgetExhausted, SampleStats, SamplerConfig, generate_anomalous_batch

log = logging.getLogger(__name__)

MODES = ("AE", "NP", "AUC")
LOG_FIELDS = ("iteration", "epoch", "j_kr", "j_obj", "lr", "acceptance_rate", "em_loglik",
              "phi_rho", "phi_z")


class TrainingAborted(FloatingPointError):
    """Non-finite loss or parameters; carries the iteration for diagnostics."""


@dataclass
class TrainConfig:
    mode: str = "NP"
    rho: float = 0.2
    lr: float = 1e-4
    l2: float = 1e-4
    batch_size: int = 512
    epochs: int = 500
    gmm_refresh_every: int = 30
    n_mixtures: int = 16
    latent_dim: int = 40
    hidden_units: int = 512
    hidden_layers: int = 3
    plateau_patience: int = 5
    em_iters: int = 20
    max_attempts: int = 10_000
    rho_deploy: float = 0.001
    seed: int = 0

    def __post_init__(self):
        self.mode = str(self.mode).upper()
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.rho < 1.0 or not 0.0 < self.rho_deploy < 1.0:
            raise ValueError("rho and rho_deploy must lie in (0, 1)")
        for name in ("lr", "batch_size", "epochs", "gmm_refresh_every", "n_mixtures", "latent_dim",
                     "hidden_units", "hidden_layers", "plateau_patience", "em_iters", "max_attempts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


@dataclass
class TrainingState:
    encoder: Mlp
    decoder: Mlp
    generator: Mlp | None
    gmm: DiagGmm | None


@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    relaxations: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in LOG_FIELDS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _dims(cfg: TrainConfig, q: int):
    hidden = [cfg.hidden_units] * cfg.hidden_layers
    return [q] + hidden + [cfg.latent_dim], [cfg.latent_dim] + hidden + [q]


def fit_gmm_to_normals(encoder: Mlp, x_normal: np.ndarray, cfg: TrainConfig, rng,
                       init: DiagGmm | None = None) -> DiagGmm:
    z = forward(encoder, x_normal)[0]
    return em_fit(z, cfg.n_mixtures, cfg.em_iters, rng, init=init)


def init_training_state(cfg: TrainConfig, q: int, x_normal: np.ndarray,
                        rng: np.random.Generator) -> TrainingState:
    """Glorot-initialized networks and an initial GMM fit on the initial encoder's normal latents."""
    enc_dims, dec_dims = _dims(cfg, q)
    encoder = init_mlp(enc_dims, rng=rng)
    decoder = init_mlp(dec_dims, rng=rng)
    if cfg.mode == "AE":
        return TrainingState(encoder, decoder, None, None)
    generator = init_mlp(dec_dims, rng=rng)
    gmm = fit_gmm_to_normals(encoder, x_normal, cfg, rng)
    return TrainingState(encoder, decoder, generator, gmm)


def _check_finite(value: float, what: str, iteration: int) -> None:
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite {what} ({value}) at iteration {iteration}")


def _minibatches(n: int, m: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    if n <= m:
        return [perm]
    return [perm[i * m:(i + 1) * m] for i in range(n // m)]


class _Plateau:
    """Halve the step size after ``patience`` consecutive epochs without a new best loss."""

    def __init__(self, lr: float, patience: int):
        self.lr = lr
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= 0.5
                self.bad = 0
        return self.lr


def _simulate(state: TrainingState, nll_normal: np.ndarray, cfg: TrainConfig, m: int, rng,
              stats: SampleStats, history: TrainingHistory, iteration: int):
    """Anomalous minibatch; relaxes phi_z down the sorted normal NLLs if the sampler stalls.

    After an exhausted attempt, values the rejected run could not beat are
    skipped: the next phi_z tried is the first sorted value below the largest
    NLL seen among the rejected draws.
    """
    ordered = np.sort(nll_normal, kind="stable")[::-1]
    start = k = threshold_index(ordered.size, cfg.rho) - 1
    while True:
        phi_z = float(ordered[k]) if k < ordered.size else -math.inf
        try:
            x_anom, _ = generate_anomalous_batch(state.generator, state.gmm,
                                                 SamplerConfig(phi_z, cfg.max_attempts), m, rng, stats)
            break
        except RejectionBudgetExhausted as exc:
            history.relaxations += 1
            k += 1
            while k < ordered.size and ordered[k] >= exc.best_nll:
                k += 1
    if k != start:
        log.warning("iteration %d: sampler budget exhausted, phi_z relaxed from %.6g to %.6g",
                    iteration, ordered[start], phi_z)
    return x_anom, phi_z


def train(x_normal: np.ndarray, x_various: np.ndarray | None, cfg: TrainConfig,
          norm: NormStats | None = None, history: TrainingHistory | None = None,
          feature_meta: dict | None = None) -> TrainedModel:
    """Train on raw (un-normalized) feature matrices.

    Normalization statistics are fit on the union of the normal and various
    pools unless ``norm`` is given.  All randomness flows from ``cfg.seed``.
    """
    x_normal = np.asarray(x_normal, dtype=np.float64)
    if x_normal.ndim != 2 or x_normal.shape[0] < 2:
        raise ValueError("need at least two normal training frames")
    q = x_normal.shape[1]
    if x_various is not None:
        x_various = np.asarray(x_various, dtype=np.float64)
        if x_various.ndim != 2 or x_various.shape[1] != q:
            raise ValueError(f"various features must have dimension {q}")
        if x_various.shape[0] < 2:
            raise ValueError("need at least two various-sound frames")
    elif cfg.mode != "AE":
        raise ValueError(f"mode {cfg.mode} needs various-sound training data")

    if norm is None:
        pool = [x_normal] if x_various is None else [x_normal, x_various]
        norm = fit_norm_stats(pool)
    xn = apply_norm(x_normal, norm)
    xv = apply_norm(x_various, norm) if x_various is not None else None

    history = TrainingHistory() if history is None else history
    rng = np.random.default_rng(cfg.seed)
    state = init_training_state(cfg, q, xn, rng)
    enc, dec, gen = state.encoder, state.decoder, state.generator
    opt_det = mlp_optimizer(enc, dec)
    opt_kr = mlp_optimizer(enc, gen) if gen is not None else None
    plateau = _Plateau(cfg.lr, cfg.plateau_patience)
    lr = cfg.lr
    em_ll = float(np.mean(log_pdf(state.gmm, forward(enc, xn)[0]))) if state.gmm is not None else None

    it = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _minibatches(xn.shape[0], cfg.batch_size, rng):
            it += 1
            xu = xn[idx]
            row = {"iteration": it, "epoch": epoch + 1, "lr": lr}
            if cfg.mode == "AE":
                loss, g_enc, g_dec = mean_reconstruction(enc, dec, xu)
                _check_finite(loss, "reconstruction loss", it)
                opt_det.step(g_enc + g_dec, lr, cfg.l2)
                row["j_obj"] = loss
                losses.append(loss)
            else:
                m = idx.size
                # step 1: KLD + reconstruction of various sounds, descent on (E, G)
                v_idx = rng.integers(0, xv.shape[0], size=m)
                jkr, _, g_enc, g_gen = j_kr_grads(enc, gen, xv[v_idx])
                _check_finite(jkr, "J_KR", it)
                opt_kr.step(g_enc + g_gen, lr, cfg.l2)

                # step 2: thresholds from the normal minibatch, simulated anomalies, ascent on (E, D)
                sp_u = score_forward(enc, dec, xu)
                z_u = sp_u.dec_cache.inputs[0]
                phi_rho = select_threshold(sp_u.scores, cfg.rho)
                stats = SampleStats()
                x_anom, phi_z = _simulate(state, -log_pdf(state.gmm, z_u), cfg, m, rng, stats, history, it)
                sp_a = score_forward(enc, dec, x_anom)
                if cfg.mode == "NP":
                    obj = j_np(sp_a.scores, sp_u.scores, phi_rho)
                    g_a, g_u = j_np_score_grads(sp_a.scores, sp_u.scores, phi_rho)
                else:
                    obj = j_auc(sp_a.scores, sp_u.scores)
                    g_a, g_u = j_auc_score_grads(sp_a.scores, sp_u.scores)
                _check_finite(obj, f"J_{cfg.mode}", it)
                ge_a, gd_a = score_backward(enc, dec, sp_a, g_a)
                ge_u, gd_u = score_backward(enc, dec, sp_u, g_u)
                grads = [a + b for a, b in zip(ge_a + gd_a, ge_u + gd_u)]
                opt_det.step(grads, lr, cfg.l2, maximize=True)

                # step 3: periodic GMM refresh on all normal latents
                if it % cfg.gmm_refresh_every == 0:
                    state.gmm = fit_gmm_to_normals(enc, xn, cfg, rng, init=state.gmm)
                    em_ll = state.gmm.loglik_trace[-1] / xn.shape[0]
                row.update(j_kr=jkr, j_obj=obj, acceptance_rate=stats.acceptance_rate,
                           em_loglik=em_ll, phi_rho=phi_rho, phi_z=phi_z)
                losses.append(jkr - obj)
            history.rows.append(row)

        epoch_loss = float(np.mean(losses))
        _check_finite(epoch_loss, "epoch loss", it)
        history.epoch_loss.append(epoch_loss)
        history.lr.append(lr)
        lr = plateau.update(epoch_loss)
        log.info("epoch %d/%d loss=%.6g lr=%.3g", epoch + 1, cfg.epochs, epoch_loss, lr)

    for net in (enc, dec) + ((gen,) if gen is not None else ()):
        for p in net.params():
            if not np.all(np.isfinite(p)):
                raise TrainingAborted("training produced non-finite parameters")

    train_scores = score_forward(enc, dec, xn).scores
    phi = select_threshold(train_scores, cfg.rho_deploy)
    meta = {"mode": cfg.mode, "seed": cfg.seed, "config": asdict(cfg),
            "features": feature_meta or {}, "rho_deploy": cfg.rho_deploy,
            "iterations": it, "final_lr": lr}
    return TrainedModel(enc, dec, gen, norm, state.gmm, phi, meta)
