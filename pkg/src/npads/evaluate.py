"""Clip-level detection, ROC metrics and ANR test-set synthesis."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .audio import AudioClip, mix_at_anr

DEFAULT_ANRS = (-15.0, -20.0, -25.0)
DEFAULT_RHO = 0.05
DEFAULT_P = 0.1


@dataclass
class DetectionResult:
    frame_scores: np.ndarray
    decision: float  # fraction of frames above phi
    anomalous: bool
    phi: float
    phi_v: float = 0.0

    @property
    def max_score(self) -> float:
        return float(np.max(self.frame_scores))


def decide(frame_scores, phi: float, phi_v: float = 0.0) -> DetectionResult:
    """Fraction of frames whose score exceeds ``phi``; anomalous when it exceeds ``phi_v``."""
    s = np.asarray(frame_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("no frames to decide on")
    v = float(np.mean(s > phi))
    return DetectionResult(s, v, v > phi_v, float(phi), float(phi_v))


def detect_clip(model, feats: np.ndarray, phi: float | None = None, phi_v: float = 0.0) -> DetectionResult:
    """Detection over normalized features of one clip; ``phi`` defaults to the model's deployed threshold."""
    scores = model.frame_scores(np.atleast_2d(feats), normalized=True)
    return decide(scores, model.phi if phi is None else phi, phi_v)


# --------------------------------------------------------------------------
# ROC metrics
# --------------------------------------------------------------------------

def _check_scores(normals, anomalies):
    n = np.asarray(normals, dtype=np.float64).ravel()
    a = np.asarray(anomalies, dtype=np.float64).ravel()
    if n.size == 0 or a.size == 0:
        raise ValueError("both normal and anomalous score lists must be non-empty")
    if not (np.all(np.isfinite(n)) and np.all(np.isfinite(a))):
        raise ValueError("scores must be finite")
    return n, a


def roc_curve(normals, anomalies) -> tuple[np.ndarray, np.ndarray]:
    """ROC points (fpr, tpr) from thresholds at every pooled unique score, (0,0) through (1,1)."""
    n, a = _check_scores(normals, anomalies)
    thresholds = np.unique(np.concatenate([n, a]))[::-1]
    sn, sa = np.sort(n), np.sort(a)
    # counts of scores >= each threshold
    fp = n.size - np.searchsorted(sn, thresholds, side="left")
    tp = a.size - np.searchsorted(sa, thresholds, side="left")
    fpr = np.concatenate([[0.0], fp / n.size])
    tpr = np.concatenate([[0.0], tp / a.size])
    return fpr, tpr


def rank_auc(normals, anomalies) -> float:
    """P(anomaly outscores normal) + 1/2 P(tie), via the Mann-Whitney rank sum."""
    n, a = _check_scores(normals, anomalies)
    ranks = rankdata(np.concatenate([a, n]))
    u = ranks[:a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * n.size))


def partial_auc(fpr, tpr, p: float = DEFAULT_P) -> float:
    """Area under the ROC polyline over FPR in [0, p], divided by p."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    inside = fpr <= p
    xs, ys = fpr[inside], tpr[inside]
    if xs[-1] < p:
        j = np.flatnonzero(~inside)[0]
        y_p = tpr[j - 1] + (tpr[j] - tpr[j - 1]) * (p - fpr[j - 1]) / (fpr[j] - fpr[j - 1])
        xs, ys = np.append(xs, p), np.append(ys, y_p)
    area = np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0)
    return float(area / p)


def tpr_at_fpr(fpr, tpr, rho: float = DEFAULT_RHO) -> float:
    """TPR at FPR = rho, interpolated from the last ROC point with FPR <= rho to the next one."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    i = int(np.flatnonzero(fpr <= rho)[-1])
    if fpr[i] == rho or i == fpr.size - 1:
        return float(tpr[i])
    j = i + 1
    return float(tpr[i] + (tpr[j] - tpr[i]) * (rho - fpr[i]) / (fpr[j] - fpr[i]))


@dataclass
class EvalReport:
    fpr: list[float]
    tpr: list[float]
    auc: float
    pauc: float
    rho_tpr: float
    p: float = DEFAULT_P
    rho: float = DEFAULT_RHO
    n_normal: int = 0
    n_anomalous: int = 0
    condition: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def write_roc_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr"])
            for x, y in zip(self.fpr, self.tpr):
                writer.writerow([repr(x), repr(y)])


def evaluate_scores(normals, anomalies, rho: float = DEFAULT_RHO, p: float = DEFAULT_P,
                    condition: dict | None = None) -> EvalReport:
    fpr, tpr = roc_curve(normals, anomalies)
    return EvalReport(
        fpr=[float(v) for v in fpr], tpr=[float(v) for v in tpr],
        auc=rank_auc(normals, anomalies), pauc=partial_auc(fpr, tpr, p), rho_tpr=tpr_at_fpr(fpr, tpr, rho),
        p=p, rho=rho, n_normal=int(np.size(normals)), n_anomalous=int(np.size(anomalies)),
        condition=dict(condition or {}),
    )


def pauc(report: EvalReport, p: float = DEFAULT_P) -> float:
    return partial_auc(report.fpr, report.tpr, p)


def rho_tpr(report: EvalReport, rho: float = DEFAULT_RHO) -> float:
    return tpr_at_fpr(report.fpr, report.tpr, rho)


def save_reports(path, reports: dict[str, EvalReport], extra: dict | None = None) -> None:
    payload = {"reports": {k: r.to_dict() for k, r in reports.items()}}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_reports(path) -> dict[str, EvalReport]:
    with open(path) as fh:
        payload = json.load(fh)
    return {k: EvalReport.from_dict(v) for k, v in payload["reports"].items()}


# --------------------------------------------------------------------------
# Test-set synthesis
# --------------------------------------------------------------------------

@dataclass
class TestItem:
    clip: AudioClip
    anomalous: bool
    anr_db: float
    source: str = ""


def build_test_set(normal_pool: Sequence[AudioClip], anomaly_pool: Sequence[AudioClip],
                   anr_list: Sequence[float] = DEFAULT_ANRS, rng: np.random.Generator | None = None,
                   names: Sequence[str] | None = None) -> list[TestItem]:
    """One normal cut and one mixture per (anomaly clip, ANR).

    The normal source for each pair is drawn uniformly from the pool clips
    long enough to hold the anomaly.
    """
    if not normal_pool or not anomaly_pool:
        raise ValueError("normal and anomaly pools must be non-empty")
    rng = np.random.default_rng() if rng is None else rng
    names = list(names) if names is not None else [f"anomaly{i}" for i in range(len(anomaly_pool))]
    items = []
    for anr in anr_list:
        for name, anomaly in zip(names, anomaly_pool):
            hosts = [c for c in normal_pool if len(c) >= len(anomaly)]
            if not hosts:
                raise ValueError(f"no normal clip is long enough to host {name}")
            host = hosts[int(rng.integers(len(hosts)))]
            cut, mixture = mix_at_anr(host, anomaly, anr, rng)
            items.append(TestItem(cut, False, float(anr), name))
            items.append(TestItem(mixture, True, float(anr), name))
    return items


def clip_score(model, clip: AudioClip) -> float:
    """Clip-level score: the largest per-frame anomaly score."""
    return float(np.max(model.clip_frame_scores(clip)))


def evaluate_model(model, items: Sequence[TestItem], rho: float = DEFAULT_RHO,
                   p: float = DEFAULT_P) -> dict[str, EvalReport]:
    """Reports keyed by ANR ("anr=-15") plus a pooled "all" report."""
    scores = np.array([clip_score(model, it.clip) for it in items])
    labels = np.array([it.anomalous for it in items])
    anrs = np.array([it.anr_db for it in items])
    reports = {}
    for anr in sorted(set(anrs.tolist()), reverse=True):
        sel = anrs == anr
        reports[f"anr={anr:g}"] = evaluate_scores(scores[sel & ~labels], scores[sel & labels], rho, p,
                                                  {"anr_db": anr})
    reports["all"] = evaluate_scores(scores[~labels], scores[labels], rho, p, {"anr_db": "pooled"})
    return reports
