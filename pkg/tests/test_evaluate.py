import numpy as np
import pytest

from npads.audio import AudioClip, median_log_power
from npads.evaluate import (
    EvalReport,
    build_test_set,
    decide,
    evaluate_scores,
    load_reports,
    partial_auc,
    rank_auc,
    roc_curve,
    save_reports,
    tpr_at_fpr,
)


def all_pairs_auc(normals, anomalies):
    total = 0.0
    for a in anomalies:
        for n in normals:
            total += 1.0 if a > n else 0.5 if a == n else 0.0
    return total / (len(normals) * len(anomalies))


def polyline_area(xs, ys, p):
    """Exact area of a piecewise-linear curve on [0, p], segment by segment."""
    area = 0.0
    for x0, x1, y0, y1 in zip(xs[:-1], xs[1:], ys[:-1], ys[1:]):
        if x1 <= x0 or x0 >= p:
            continue
        hi = min(x1, p)
        y_hi = y0 + (y1 - y0) * (hi - x0) / (x1 - x0)
        area += (hi - x0) * (y0 + y_hi) / 2
    return area / p


class TestDecide:
    def test_no_exceedance(self):
        r = decide([0.1, 0.5, 0.5], phi=0.5)
        assert r.decision == 0.0 and not r.anomalous

    def test_one_frame_rule(self):
        scores = np.zeros(100)
        scores[37] = 2.0
        r = decide(scores, phi=1.0)
        assert r.decision == 0.01 and r.anomalous and r.max_score == 2.0

    def test_fraction_oracle(self):
        rng = np.random.default_rng(0)
        sc = rng.standard_normal(57)
        r = decide(sc, phi=0.3, phi_v=0.5)
        oracle = sum(1 for v in sc if v > 0.3) / 57
        assert r.decision == oracle and r.anomalous == (oracle > 0.5)

    def test_empty(self):
        with pytest.raises(ValueError):
            decide([], 1.0)


class TestAuc:
    def test_perfect(self):
        assert rank_auc([0.0, 1.0], [2.0, 3.0]) == 1.0

    def test_all_tied(self):
        assert rank_auc([1.0] * 4, [1.0] * 3) == 0.5

    def test_all_pairs_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = np.round(rng.standard_normal(40), 1)
            a = np.round(rng.standard_normal(30) + 0.5, 1)
            assert rank_auc(n, a) == all_pairs_auc(n, a)

    def test_roc_trapezoid_equals_rank_auc(self):
        rng = np.random.default_rng(2)
        n, a = np.round(rng.standard_normal(50), 1), np.round(rng.standard_normal(50) + 1, 1)
        fpr, tpr = roc_curve(n, a)
        assert np.trapezoid(tpr, fpr) == pytest.approx(rank_auc(n, a), abs=1e-12)

    def test_roc_monotone(self):
        fpr, tpr = roc_curve(np.random.default_rng(3).random(30), np.random.default_rng(4).random(20))
        assert fpr[0] == tpr[0] == 0.0 and fpr[-1] == tpr[-1] == 1.0
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)

    def test_empty(self):
        with pytest.raises(ValueError):
            rank_auc([], [1.0])


class TestPartial:
    def test_full_range_is_auc(self):
        rng = np.random.default_rng(5)
        n, a = rng.standard_normal(60), rng.standard_normal(60) + 0.7
        fpr, tpr = roc_curve(n, a)
        assert abs(partial_auc(fpr, tpr, 1.0) - rank_auc(n, a)) <= 1e-12

    def test_polyline_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            fpr, tpr = roc_curve(rng.standard_normal(37), rng.standard_normal(23) + 1)
            for p in (0.05, 0.1, 0.33):
                assert partial_auc(fpr, tpr, p) == pytest.approx(polyline_area(fpr, tpr, p), abs=1e-9)

    def test_rho_tpr_interpolates(self):
        fpr, tpr = np.array([0.0, 0.0, 0.1, 1.0]), np.array([0.0, 0.4, 0.8, 1.0])
        assert tpr_at_fpr(fpr, tpr, 0.05) == pytest.approx(0.6)
        assert tpr_at_fpr(fpr, tpr, 0.1) == 0.8

    def test_perfect_separation(self):
        r = evaluate_scores([0.0, 0.1, 0.2], [5.0, 6.0])
        assert r.auc == r.pauc == r.rho_tpr == 1.0

    def test_reports_round_trip(self, tmp_path):
        r = evaluate_scores([0.0, 0.5, 0.2], [0.4, 6.0], condition={"anr_db": -20.0})
        save_reports(tmp_path / "m.json", {"anr=-20": r})
        back = load_reports(tmp_path / "m.json")["anr=-20"]
        assert isinstance(back, EvalReport) and back == r
        r.write_roc_csv(tmp_path / "roc.csv")
        assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "fpr,tpr"


class TestTestSet:
    def test_counts_and_fidelity(self):
        rng = np.random.default_rng(7)
        normals = [AudioClip(0.05 * rng.standard_normal(40000))]
        anomalies = [AudioClip(0.2 * np.sin(np.arange(8000) * 0.3 + k)) for k in range(3)]
        items = build_test_set(normals, anomalies, (-15.0, -20.0, -25.0), rng)
        assert len(items) == 18 and sum(it.anomalous for it in items) == 9
        for cut, mix in zip(items[0::2], items[1::2]):
            assert not cut.anomalous and mix.anomalous and cut.anr_db == mix.anr_db
            measured = median_log_power(mix.clip.samples - cut.clip.samples) - median_log_power(cut.clip)
            assert abs(measured - mix.anr_db) <= 0.1

    def test_host_too_short(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            build_test_set([AudioClip(np.ones(100))], [AudioClip(np.ones(200))], rng=rng)
