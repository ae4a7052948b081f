import csv
import json

import numpy as np
import pytest

from npads.audio import AudioClip, load_feature_cache, write_wav
from npads.cli import main
from npads.evaluate import load_reports
from npads.synthetic import ANOMALOUS, NORMAL, VARIOUS, render

TINY = ["--epochs", "2", "--batch-size", "32", "--hidden-units", "16", "--hidden-layers", "1",
        "--latent-dim", "3", "--n-mixtures", "2", "--em-iters", "5", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(0)
    layout = {
        "normal": [render(NORMAL, 1.5, rng) for _ in range(3)],
        "various": [render(t, 1.0, rng) for t in VARIOUS],
        "test": [render(NORMAL, 4.0, rng)],
        "anom": [render(t, 0.5, rng) for t in ANOMALOUS],
    }
    for group, clips in layout.items():
        (root / group).mkdir()
        for i, clip in enumerate(clips):
            write_wav(root / group / f"{group}{i}.wav", clip)
    return root


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("features", corpus / "normal", "--out", out / "normal.bin") == 0
    assert run("features", corpus / "various", "--out", out / "various.bin") == 0
    assert run("train", "--normal", out / "normal.bin", "--various", out / "various.bin",
               "--out", out / "model.npm", "--mode", "NP", *TINY) == 0
    return out


def test_features_index_and_stats(corpus, tmp_path):
    assert run("features", corpus / "normal", "--out", tmp_path / "f.bin", "--fit-stats", tmp_path / "n.json") == 0
    feats = load_feature_cache(tmp_path / "f.bin")
    with open(tmp_path / "f.bin.index.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["path"] for r in rows] == sorted(r["path"] for r in rows)
    assert sum(int(r["frames"]) for r in rows) == feats.shape[0] == 3 * 92
    stats = json.loads((tmp_path / "n.json").read_text())
    assert len(stats["mean"]) == len(stats["std"]) == 440


def test_features_one_second_clip(tmp_path):
    (tmp_path / "in").mkdir()
    write_wav(tmp_path / "in" / "a.wav", AudioClip(0.1 * np.sin(np.arange(16000) * 0.05)))
    assert run("features", tmp_path / "in", "--out", tmp_path / "a.bin") == 0
    assert load_feature_cache(tmp_path / "a.bin").shape == (61, 440)


def test_features_errors(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert run("features", tmp_path / "empty", "--out", tmp_path / "x.bin") == 2
    assert "no input files" in capsys.readouterr().err
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "junk.wav").write_bytes(b"RIFF....")
    assert run("features", tmp_path / "bad", "--out", tmp_path / "x.bin") == 2
    assert "junk.wav" in capsys.readouterr().err


def test_train_usage_errors(trained, tmp_path):
    assert run("train", "--normal", trained / "normal.bin", "--out", tmp_path / "m", "--mode", "SVM") == 1
    assert run("train", "--normal", trained / "normal.bin", "--out", tmp_path / "m", "--mode", "NP") == 1
    assert run("train", "--bogus") == 1


def test_train_config_file_and_flag_override(trained, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nmode = AE\nepochs = 1\nbatch_size = 32\nhidden_units = 8\nhidden_layers = 1\n"
                   "latent_dim = 2\nseed = 4\n")
    assert run("train", "--config", cfg, "--normal", trained / "normal.bin", "--out", tmp_path / "m.npm",
               "--epochs", "2") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["iterations"] == 2 * (276 // 32)
    assert len(info["digest"]) == 64
    cfg.write_text("colour = blue\n")
    assert run("train", "--config", cfg, "--normal", trained / "normal.bin", "--out", tmp_path / "m.npm") == 1


def test_train_is_deterministic(trained, tmp_path, capsys):
    digests = []
    for name in ("a.npm", "b.npm"):
        run("train", "--normal", trained / "normal.bin", "--various", trained / "various.bin",
            "--out", tmp_path / name, "--mode", "NP", *TINY)
        digests.append(json.loads(capsys.readouterr().out)["digest"])
    assert digests[0] == digests[1]
    assert (tmp_path / "a.npm").read_bytes() == (tmp_path / "b.npm").read_bytes()
    assert (tmp_path / "a.npm.log.csv").read_text() == (tmp_path / "b.npm.log.csv").read_text()


def test_detect(trained, corpus, tmp_path):
    out = tmp_path / "det.jsonl"
    assert run("detect", "--model", trained / "model.npm", corpus / "anom", corpus / "test",
               "--out", out, "--frames-dir", tmp_path / "frames") == 0
    recs = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(recs) == 3
    for r in recs:
        assert 0.0 <= r["V"] <= 1.0 and r["verdict"] in ("normal", "anomalous")
        assert r["verdict"] == ("anomalous" if r["V"] > 0 else "normal")
    assert len(list((tmp_path / "frames").glob("*.csv"))) == 3


def test_detect_silence_and_rho_deploy(trained, tmp_path, capsys):
    (tmp_path / "s").mkdir()
    write_wav(tmp_path / "s" / "quiet.wav", AudioClip(np.zeros(8000)))
    assert run("detect", "--model", trained / "model.npm", tmp_path / "s") == 0
    rec = json.loads(capsys.readouterr().out)
    assert np.isfinite(rec["max_score"])
    assert run("detect", "--model", trained / "model.npm", "--rho-deploy", "0.001", tmp_path / "s") == 0
    stored = json.loads(capsys.readouterr().out)["phi"]
    assert run("detect", "--model", trained / "model.npm", "--rho-deploy", "0.001",
               "--normal", trained / "normal.bin", tmp_path / "s") == 0
    assert json.loads(capsys.readouterr().out)["phi"] == pytest.approx(stored, rel=1e-6)
    assert run("detect", "--model", trained / "model.npm", "--rho-deploy", "0.3", tmp_path / "s") == 1


def test_simulate(trained, tmp_path):
    assert run("simulate", "--model", trained / "model.npm", "--out", tmp_path / "sim.csv", "-n", "6",
               "--normal", trained / "normal.bin") == 0
    with open(tmp_path / "sim.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 7 and len(rows[0]) == 1 + 3 + 440
    assert run("simulate", "--model", trained / "model.npm", "--out", tmp_path / "x.csv") == 1


def test_eval_outputs(trained, corpus, tmp_path):
    out = tmp_path / "rep"
    assert run("eval", "--model", trained / "model.npm", "--normal", corpus / "test",
               "--anomalies", corpus / "anom", "--out", out) == 0
    reports = load_reports(out / "metrics.json")
    assert set(reports) == {"anr=-15", "anr=-20", "anr=-25", "all"}
    assert reports["all"].n_normal == reports["all"].n_anomalous == 6
    assert all(r.rho == 0.05 and r.p == 0.1 for r in reports.values())
    assert (out / "roc.png").read_bytes()[:4] == b"\x89PNG"
    assert (out / "roc_anr-20.csv").exists()
    first = (out / "metrics.json").read_bytes()
    assert run("eval", "--model", trained / "model.npm", "--normal", corpus / "test",
               "--anomalies", corpus / "anom", "--out", out, "--no-plots") == 0
    assert (out / "metrics.json").read_bytes() == first


def test_missing_model(tmp_path):
    assert run("detect", "--model", tmp_path / "nope.npm", tmp_path) == 2
