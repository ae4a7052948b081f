"""Audio I/O, log-mel context features, normalization and test-mixture synthesis."""
from __future__ import annotations

import csv
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 16000
FRAME_LEN = 512
HOP = 256
AUGMENT_PEAKS = (1.0, 0.5, 0.25, 0.125, 0.063)

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8

CACHE_MAGIC = b"NPFC"
CACHE_VERSION = 1


class AudioError(ValueError):
    """Raised for malformed or unsupported audio input."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.size == 0:
            raise AudioError("empty clip")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("clip contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 40
    context: int = 5
    eps_floor: float = LOG_FLOOR
    frame_len: int = FRAME_LEN
    hop: int = HOP

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if self.context < 0:
            raise ValueError("context must be >= 0")

    @property
    def dim(self) -> int:
        return self.n_mels * (2 * self.context + 1)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(self.std <= 0):
            raise ValueError("std entries must be positive")


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

def read_wav(path) -> AudioClip:
    """Read a 16 kHz mono PCM16 WAV file into a clip scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            comp = w.getcomptype()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioError(f"{path}: not a readable PCM WAV ({exc})") from exc
    if comp != "NONE" or width != 2:
        raise AudioError(f"{path}: only 16-bit PCM is supported")
    if channels != 1:
        raise AudioError(f"{path}: expected mono, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    pcm = np.frombuffer(frames, dtype="<i2")
    if pcm.size == 0:
        raise AudioError(f"{path}: no samples")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# Spectral analysis
# --------------------------------------------------------------------------

def num_frames(n_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


def stft(clip, frame_len: int = FRAME_LEN, hop: int = HOP, window="hann") -> np.ndarray:
    """Magnitude spectrogram, shape (T, frame_len // 2 + 1).

    ``window`` is a scipy window name (periodic) or an explicit array;
    ``"boxcar"`` gives the rectangular window.
    """
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    n = num_frames(x.size, frame_len, hop)
    if n == 0:
        raise AudioError(f"clip too short: {x.size} samples < frame length {frame_len}")
    if isinstance(window, str):
        win = get_window(window, frame_len, fftbins=True)
    else:
        win = np.asarray(window, dtype=np.float64)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n)[:, None]
    return np.abs(np.fft.rfft(x[idx] * win, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 40, frame_len: int = FRAME_LEN, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters with unit peak, shape (n_mels, frame_len // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(frame_len // 2 + 1) * sample_rate / frame_len
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(spec: np.ndarray, cfg: FeatureConfig = FeatureConfig(),
            fbank: np.ndarray | None = None) -> np.ndarray:
    """ln(max(Mel @ |X|, eps)) per frame, shape (T, n_mels)."""
    spec = np.asarray(spec, dtype=np.float64)
    if fbank is None:
        fbank = mel_filterbank(cfg.n_mels, cfg.frame_len)
    return np.log(np.maximum(spec @ fbank.T, cfg.eps_floor))


def frame_context(mels: np.ndarray, context: int) -> np.ndarray:
    """Stack 2C+1 neighbouring frames per row, replicating the edge frames."""
    mels = np.asarray(mels, dtype=np.float64)
    if context < 0:
        raise ValueError("context must be >= 0")
    if mels.ndim != 2 or mels.shape[0] == 0:
        raise ValueError("frame_context needs a non-empty (T, n_mels) array")
    t = mels.shape[0]
    offsets = np.arange(-context, context + 1)
    idx = np.clip(np.arange(t)[:, None] + offsets[None, :], 0, t - 1)
    return mels[idx].reshape(t, -1)


def extract_features(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Un-normalized context features of a clip, shape (T, Q)."""
    spec = stft(clip, cfg.frame_len, cfg.hop)
    return frame_context(log_mel(spec, cfg), cfg.context)


def fit_norm_stats(features: Sequence[np.ndarray] | np.ndarray, floor: float = STD_FLOOR) -> NormStats:
    if isinstance(features, np.ndarray):
        features = [features]
    stacked = np.concatenate([np.atleast_2d(f) for f in features], axis=0)
    if stacked.shape[0] < 2:
        raise ValueError("need at least 2 frames to fit normalization stats")
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), floor)
    return NormStats(mean, std)


def apply_norm(features: np.ndarray, stats: NormStats) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != stats.mean.size:
        raise ValueError(f"feature dim {features.shape[-1]} != stats dim {stats.mean.size}")
    return (features - stats.mean) / stats.std


# --------------------------------------------------------------------------
# Test synthesis and augmentation
# --------------------------------------------------------------------------

def median_log_power(clip, frame_len: int = FRAME_LEN, hop: int = HOP) -> float:
    """Median over frames of 20*log10(sum_w |X_w|), the representative level of a clip."""
    spec = stft(clip, frame_len, hop)
    return float(np.median(20.0 * np.log10(np.maximum(spec.sum(axis=1), LOG_FLOOR))))


def anr_gain(p_anomaly: float, p_normal: float, anr_db: float) -> float:
    return 10.0 ** ((anr_db - (p_anomaly - p_normal)) / 20.0)


def mix_at_anr(normal: AudioClip, anomaly: AudioClip, anr_db: float,
               rng: np.random.Generator) -> tuple[AudioClip, AudioClip]:
    """Cut ``normal`` to the anomaly's length and add the anomaly scaled to ``anr_db``.

    Returns ``(normal_cut, mixture)``.
    """
    n, m = len(normal), len(anomaly)
    if m > n:
        raise AudioError(f"anomaly ({m} samples) is longer than normal ({n} samples)")
    start = int(rng.integers(0, n - m + 1))
    cut = normal.samples[start:start + m].copy()
    gain = anr_gain(median_log_power(anomaly.samples), median_log_power(cut), anr_db)
    mixture = cut + gain * anomaly.samples
    return AudioClip(cut), AudioClip(mixture)


def augment_gains(clip: AudioClip, peaks: Sequence[float] = AUGMENT_PEAKS) -> list[AudioClip]:
    peak = float(np.max(np.abs(clip.samples)))
    if peak <= 0.0:
        raise AudioError("cannot peak-normalize a silent clip")
    return [AudioClip(clip.samples * (target / peak), clip.sample_rate) for target in peaks]


# --------------------------------------------------------------------------
# Feature cache
# --------------------------------------------------------------------------

def save_feature_cache(path, feats: np.ndarray) -> None:
    """Header {magic, version, T, Q} followed by row-major little-endian float32."""
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    t, q = feats.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, t, q))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def load_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache")
        version, t, q = struct.unpack("<III", head[4:])
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != t * q:
        raise ValueError(f"{path}: truncated cache ({data.size} of {t * q} values)")
    return data.reshape(t, q).astype(np.float32)


def export_features_csv(path, feats: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(feats.shape[1])])
        for row in feats:
            writer.writerow([repr(float(v)) for v in row])


def list_wavs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".wav" and p.is_file())
