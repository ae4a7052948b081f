"""Command-line interface: ``npads {synth,features,train,simulate,detect,eval}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .audio import (
    AudioError,
    FeatureConfig,
    NormStats,
    apply_norm,
    extract_features,
    fit_norm_stats,
    list_wavs,
    load_feature_cache,
    read_wav,
    save_feature_cache,
    write_wav,
)
from .evaluate import DEFAULT_ANRS, DEFAULT_P, DEFAULT_RHO, build_test_set, decide, evaluate_model, save_reports
from .gmm import log_pdf
from .model import load_model, save_model
from .nn import forward
from .objectives import select_threshold
from .sampler import RejectionBudgetExhausted, SamplerConfig, SampleStats, generate_anomalous_batch
from .trainer import TrainConfig, TrainingHistory, train

log = logging.getLogger("npads")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

FEATURE_KEYS = ("n_mels", "context")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in TRAIN_KEYS + FEATURE_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def _coerce(key: str, value):
    if key == "mode":
        return str(value)
    if key in ("rho", "lr", "l2", "rho_deploy"):
        return float(value)
    return int(value)


def resolve_settings(args, keys) -> dict:
    """Config-file values overridden by any flag the user set."""
    merged = read_config(args.config) if getattr(args, "config", None) else {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    try:
        return {k: _coerce(k, v) for k, v in merged.items() if k in keys}
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def feature_config(settings: dict) -> FeatureConfig:
    try:
        return FeatureConfig(**{k: settings[k] for k in FEATURE_KEYS if k in settings})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def collect_wavs(inputs) -> list[Path]:
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(list_wavs(p))
        elif p.is_file():
            paths.append(p)
        else:
            raise DataError(f"no such file or directory: {p}")
    paths = sorted(set(paths))
    if not paths:
        raise DataError("no input files")
    return paths


def read_clips(paths):
    clips, errors = [], []
    for p in paths:
        try:
            clips.append(read_wav(p))
        except AudioError as exc:
            errors.append(f"{p}: {exc}")
    if errors:
        raise DataError("failed to read:\n  " + "\n  ".join(errors))
    return clips


def load_cache(path) -> np.ndarray:
    try:
        return load_feature_cache(path).astype(np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load feature cache {path}: {exc}") from exc


def write_norm_json(path, stats: NormStats) -> None:
    with open(path, "w") as fh:
        json.dump({"mean": stats.mean.tolist(), "std": stats.std.tolist()}, fh)
        fh.write("\n")


def read_norm_json(path) -> NormStats:
    try:
        with open(path) as fh:
            d = json.load(fh)
        return NormStats(np.array(d["mean"]), np.array(d["std"]))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load normalization stats {path}: {exc}") from exc


def _load_model(path):
    try:
        return load_model(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc


def _out(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthetic import desk_corpus

    corpus = desk_corpus(np.random.default_rng(args.seed), normal_seconds=args.normal_seconds)
    root = Path(args.out)
    groups = {
        "normal_train": [(f"normal-{i:03d}", c) for i, c in enumerate(corpus.normal_train)],
        "various_train": [(f"various-{i:03d}", c) for i, c in enumerate(corpus.various_train)],
        "normal_test": [(f"normal-test-{i:03d}", c) for i, c in enumerate(corpus.normal_test)],
        "anomalies": list(zip(corpus.anomaly_names, corpus.anomalies)),
    }
    for group, items in groups.items():
        (root / group).mkdir(parents=True, exist_ok=True)
        for name, clip in items:
            write_wav(root / group / f"{name}.wav", clip)
        print(f"{group}: {len(items)} clips")
    return EXIT_OK


def cmd_features(args) -> int:
    settings = resolve_settings(args, FEATURE_KEYS)
    cfg = feature_config(settings)
    paths = collect_wavs(args.inputs)
    clips = read_clips(paths)
    mats, index, start = [], [], 0
    for p, clip in zip(paths, clips):
        try:
            f = extract_features(clip, cfg)
        except AudioError as exc:
            raise DataError(f"{p}: {exc}") from exc
        mats.append(f)
        index.append((str(p), start, f.shape[0]))
        start += f.shape[0]
    feats = np.vstack(mats)
    out = _out(args.out)
    save_feature_cache(out, feats)
    with open(out.with_suffix(out.suffix + ".index.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "start", "frames"])
        writer.writerows(index)
    if args.fit_stats:
        pool = [feats] + [load_cache(c) for c in args.stats_with or ()]
        write_norm_json(_out(args.fit_stats), fit_norm_stats(pool))
    print(f"{len(paths)} files, {feats.shape[0]} frames x {feats.shape[1]} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    settings = resolve_settings(args, TRAIN_KEYS + FEATURE_KEYS)
    fcfg = feature_config(settings)
    try:
        cfg = TrainConfig(**{k: v for k, v in settings.items() if k in TRAIN_KEYS})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    x_normal = load_cache(args.normal)
    x_various = load_cache(args.various) if args.various else None
    for name, x in (("normal", x_normal), ("various", x_various)):
        if x is not None and x.shape[1] != fcfg.dim:
            raise DataError(f"{name} features have dimension {x.shape[1]}, expected {fcfg.dim}")
    if cfg.mode != "AE" and x_various is None:
        raise UsageError(f"mode {cfg.mode} needs --various")
    norm = read_norm_json(args.norm) if args.norm else None
    history = TrainingHistory()
    feature_meta = {"n_mels": fcfg.n_mels, "context": fcfg.context}
    try:
        model = train(x_normal, x_various, cfg, norm=norm, history=history, feature_meta=feature_meta)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    model.meta["inputs"] = {"normal": str(args.normal), "various": str(args.various or "")}
    digest = save_model(_out(args.out), model)
    log_path = args.log or str(args.out) + ".log.csv"
    history.write_csv(_out(log_path))
    print(json.dumps({"model": str(args.out), "digest": digest, "phi": model.phi,
                      "iterations": model.meta["iterations"], "log": str(log_path)}, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = _load_model(args.model)
    if model.generator is None or model.gmm is None:
        raise DataError("model has no generator/GMM (trained in AE mode)")
    if args.phi_z is not None:
        phi_z = args.phi_z
    elif args.normal:
        xn = apply_norm(load_cache(args.normal), model.norm)
        nll = -log_pdf(model.gmm, forward(model.encoder, xn)[0])
        phi_z = select_threshold(nll, args.rho)
    else:
        raise UsageError("give --phi-z or --normal (to set phi_z from normal latents at --rho)")
    rng = np.random.default_rng(args.seed)
    stats = SampleStats()
    x, z = generate_anomalous_batch(model.generator, model.gmm, SamplerConfig(phi_z, args.max_attempts),
                                    args.n, rng, stats)
    nll = -log_pdf(model.gmm, z) if args.n else np.empty(0)
    with open(_out(args.out), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["nll"] + [f"z{i}" for i in range(z.shape[1])] + [f"x{i}" for i in range(x.shape[1])])
        for k in range(args.n):
            writer.writerow([repr(float(v)) for v in np.concatenate([[nll[k]], z[k], x[k]])])
    print(json.dumps({"out": str(args.out), "n": args.n, "phi_z": phi_z,
                      "acceptance_rate": stats.acceptance_rate}, sort_keys=True))
    return EXIT_OK


def cmd_detect(args) -> int:
    model = _load_model(args.model)
    if args.threshold is not None:
        phi = args.threshold
    elif args.rho_deploy is not None:
        if args.normal:
            scores = model.frame_scores(load_cache(args.normal), normalized=False)
            phi = select_threshold(scores, args.rho_deploy)
        elif math.isclose(args.rho_deploy, model.meta.get("rho_deploy", math.nan)):
            phi = model.phi
        else:
            raise UsageError("--rho-deploy differs from the stored value; give --normal to recompute phi")
    else:
        phi = model.phi
    paths = collect_wavs(args.inputs)
    clips = read_clips(paths)
    out = open(_out(args.out), "w") if args.out else sys.stdout
    try:
        for p, clip in zip(paths, clips):
            try:
                scores = model.clip_frame_scores(clip)
            except AudioError as exc:
                raise DataError(f"{p}: {exc}") from exc
            res = decide(scores, phi, args.phi_v)
            record = {"path": str(p), "frames": int(scores.size), "V": res.decision,
                      "verdict": "anomalous" if res.anomalous else "normal",
                      "max_score": res.max_score, "phi": phi, "phi_v": args.phi_v}
            out.write(json.dumps(record, sort_keys=True) + "\n")
            if args.frames_dir:
                fpath = _out(Path(args.frames_dir) / f"{p.stem}.frames.csv")
                with open(fpath, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["frame", "score", "above_phi"])
                    for t, s in enumerate(scores):
                        writer.writerow([t, repr(float(s)), int(s > phi)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    try:
        anrs = [float(a) for a in args.anr.split(",")] if args.anr else list(DEFAULT_ANRS)
    except ValueError as exc:
        raise UsageError(f"bad --anr list: {exc}") from exc
    normal_paths, anomaly_paths = collect_wavs([args.normal]), collect_wavs([args.anomalies])
    normals, anomalies = read_clips(normal_paths), read_clips(anomaly_paths)
    rng = np.random.default_rng(args.seed)
    try:
        items = build_test_set(normals, anomalies, anrs, rng, names=[p.stem for p in anomaly_paths])
    except (AudioError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    reports = evaluate_model(model, items, rho=args.rho, p=args.p)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_reports(out / "metrics.json", reports,
                 extra={"model": str(args.model), "seed": args.seed, "anr_db": anrs,
                        "mode": model.meta.get("mode")})
    for key, rep in reports.items():
        rep.write_roc_csv(out / f"roc_{key.replace('=', '')}.csv")
    if not args.no_plots:
        from .plots import plot_roc

        plot_roc(reports, out / "roc.png", title=f"ROC ({model.meta.get('mode', '?')})")
    summary = {k: {"auc": r.auc, "pauc": r.pauc, "rho_tpr": r.rho_tpr} for k, r in reports.items()}
    print(json.dumps(summary, sort_keys=True, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="npads", description="Anomalous sound detection with a Neyman-Pearson autoencoder.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write the synthetic desk corpus as WAV files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normal-seconds", type=float, default=32.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract log-mel context features to a cache file")
    p.add_argument("inputs", nargs="+", help="WAV files or directories")
    p.add_argument("--out", required=True, help="feature cache to write")
    p.add_argument("--fit-stats", metavar="JSON", help="also fit normalization stats and write them here")
    p.add_argument("--stats-with", nargs="*", metavar="CACHE", help="extra caches pooled into --fit-stats")
    p.add_argument("--config")
    p.add_argument("--n-mels", dest="n_mels", type=int)
    p.add_argument("--context", type=int)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a model from feature caches")
    p.add_argument("--normal", required=True, help="normal-sound feature cache")
    p.add_argument("--various", help="various-sound feature cache (required unless mode=AE)")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--norm", help="normalization stats JSON (default: fit on normal+various)")
    p.add_argument("--config")
    p.add_argument("--mode")
    p.add_argument("--rho", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--gmm-refresh-every", dest="gmm_refresh_every", type=int)
    p.add_argument("--n-mixtures", dest="n_mixtures", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--hidden-units", dest="hidden_units", type=int)
    p.add_argument("--hidden-layers", dest="hidden_layers", type=int)
    p.add_argument("--plateau-patience", dest="plateau_patience", type=int)
    p.add_argument("--em-iters", dest="em_iters", type=int)
    p.add_argument("--max-attempts", dest="max_attempts", type=int)
    p.add_argument("--rho-deploy", dest="rho_deploy", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-mels", dest="n_mels", type=int)
    p.add_argument("--context", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="dump simulated anomalous latents and decoded vectors")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--phi-z", dest="phi_z", type=float)
    p.add_argument("--normal", help="normal feature cache used to set phi_z")
    p.add_argument("--rho", type=float, default=0.2)
    p.add_argument("--max-attempts", dest="max_attempts", type=int, default=10_000)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("detect", help="per-clip verdicts as JSON lines")
    p.add_argument("--model", required=True)
    p.add_argument("inputs", nargs="+", help="WAV files or directories")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float, help="frame-score threshold phi")
    g.add_argument("--rho-deploy", dest="rho_deploy", type=float,
                   help="phi as the training-FPR quantile (recomputed when --normal is given)")
    p.add_argument("--normal", help="normal training feature cache for --rho-deploy")
    p.add_argument("--phi-v", dest="phi_v", type=float, default=0.0)
    p.add_argument("--frames-dir", help="write per-frame score CSVs here")
    p.add_argument("--out", help="JSON-lines output (default stdout)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="build the ANR test set and report AUC / pAUC / rhoTPR")
    p.add_argument("--model", required=True)
    p.add_argument("--normal", required=True, help="directory of held-out normal clips")
    p.add_argument("--anomalies", required=True, help="directory of anomaly clips")
    p.add_argument("--anr", help="comma-separated ANRs in dB (default -15,-20,-25)")
    p.add_argument("--rho", type=float, default=DEFAULT_RHO)
    p.add_argument("--p", type=float, default=DEFAULT_P)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"npads: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, AudioError, RejectionBudgetExhausted) as exc:
        print(f"npads: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"npads: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
