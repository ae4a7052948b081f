"""TrainedModel container and its binary file format.

Layout (little-endian)::

    b"NPMDL" u32 version
    u32 n, n bytes of UTF-8 JSON metadata (config echo, seed, thresholds)
    encoder, decoder network blocks; u32 flag + generator block
    u32 Q, f64[Q] mean, f64[Q] std
    u32 flag + GMM block {K, R, weights, means, variances}
    f64 phi
    32-byte SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioClip, FeatureConfig, NormStats, apply_norm, extract_features
from .gmm import DiagGmm, read_gmm, write_gmm
from .nn import Mlp, read_mlp, write_mlp
from .objectives import anomaly_score

MODEL_MAGIC = b"NPMDL"
MODEL_VERSION = 1


@dataclass
class TrainedModel:
    encoder: Mlp
    decoder: Mlp
    generator: Mlp | None
    norm: NormStats
    gmm: DiagGmm | None
    phi: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        q = self.encoder.n_in
        if self.decoder.n_in != self.encoder.n_out or self.decoder.n_out != q:
            raise ValueError("encoder/decoder dimensions are inconsistent")
        if self.norm.mean.size != q:
            raise ValueError("normalization stats do not match the input dimension")
        if not np.isfinite(self.phi):
            raise ValueError("deployed threshold must be finite")

    @property
    def feature_config(self) -> FeatureConfig:
        cfg = self.meta.get("features", {})
        return FeatureConfig(**{k: cfg[k] for k in ("n_mels", "context") if k in cfg})

    def frame_scores(self, feats: np.ndarray, normalized: bool = True) -> np.ndarray:
        x = feats if normalized else apply_norm(feats, self.norm)
        return np.atleast_1d(anomaly_score(self.encoder, self.decoder, np.atleast_2d(x)))

    def clip_frame_scores(self, clip: AudioClip) -> np.ndarray:
        feats = extract_features(clip, self.feature_config)
        return self.frame_scores(feats, normalized=False)


def _payload(model: TrainedModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC + struct.pack("<I", MODEL_VERSION))
    meta = json.dumps(model.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)) + meta)
    write_mlp(buf, model.encoder)
    write_mlp(buf, model.decoder)
    buf.write(struct.pack("<I", int(model.generator is not None)))
    if model.generator is not None:
        write_mlp(buf, model.generator)
    q = model.norm.mean.size
    buf.write(struct.pack("<I", q))
    buf.write(np.ascontiguousarray(model.norm.mean, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(model.norm.std, dtype="<f8").tobytes())
    has_gmm = model.gmm is not None
    buf.write(struct.pack("<I", int(has_gmm)))
    if has_gmm:
        write_gmm(buf, model.gmm)
    buf.write(struct.pack("<d", model.phi))
    return buf.getvalue()


def model_to_bytes(model: TrainedModel) -> bytes:
    body = _payload(model)
    return body + hashlib.sha256(body).digest()


def model_digest(model: TrainedModel) -> str:
    return hashlib.sha256(_payload(model)).hexdigest()


def save_model(path, model: TrainedModel) -> str:
    data = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data[-32:].hex()


def model_from_bytes(data: bytes) -> TrainedModel:
    if len(data) < 32 or data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError("not a model file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("model file digest mismatch (corrupt or truncated)")
    fh = io.BytesIO(body)
    fh.read(len(MODEL_MAGIC))
    (version,) = struct.unpack("<I", fh.read(4))
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    (n,) = struct.unpack("<I", fh.read(4))
    meta = json.loads(fh.read(n).decode("utf-8"))
    encoder, decoder = read_mlp(fh), read_mlp(fh)
    (has_gen,) = struct.unpack("<I", fh.read(4))
    generator = read_mlp(fh) if has_gen else None
    (q,) = struct.unpack("<I", fh.read(4))
    mean = np.frombuffer(fh.read(8 * q), dtype="<f8").copy()
    std = np.frombuffer(fh.read(8 * q), dtype="<f8").copy()
    (has_gmm,) = struct.unpack("<I", fh.read(4))
    gmm = read_gmm(fh) if has_gmm else None
    (phi,) = struct.unpack("<d", fh.read(8))
    return TrainedModel(encoder, decoder, generator, NormStats(mean, std), gmm, phi, meta)


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
