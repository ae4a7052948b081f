"""Synthetic machine-like sounds built from fixed spectral templates.

Each template is a few steady tones plus Gaussian-shaped noise bands.  Every
rendered clip jitters component levels and phases, so clips drawn from one
template share a spectral signature without being identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import SAMPLE_RATE, AudioClip, augment_gains


@dataclass(frozen=True)
class Template:
    name: str
    tones: tuple = ()          # (freq_hz, amplitude)
    bands: tuple = ()          # (center_hz, width_hz, amplitude)
    floor: float = 0.0         # white-noise floor, relative to the band noise level
    mod_db: float = 0.0        # std of slow per-component level drift
    transient_rate: float = 0.0  # short broadband bursts per second
    level_jitter_db: float = 2.0
    freq_jitter: float = 0.01


NORMAL = Template("normal", tones=((150.0, 0.30), (300.0, 0.20), (450.0, 0.10)),
                  bands=((1000.0, 400.0, 1.0), (250.0, 150.0, 0.6), (3500.0, 1500.0, 0.15)),
                  floor=0.05, mod_db=3.0, transient_rate=0.1)

VARIOUS = (
    Template("various-1", tones=((700.0, 0.25), (1400.0, 0.15)), bands=((2500.0, 600.0, 1.0),),
             floor=0.05, mod_db=3.0),
    Template("various-2", tones=((120.0, 0.30),), bands=((4000.0, 1200.0, 1.0),), floor=0.05, mod_db=3.0,
             transient_rate=1.0),
    Template("various-3", tones=((2000.0, 0.25), (3100.0, 0.20)), bands=((500.0, 250.0, 0.8),),
             floor=0.05, mod_db=3.0),
    Template("various-4", tones=((5000.0, 0.20),), bands=((1800.0, 2500.0, 1.0), (6500.0, 800.0, 0.5)),
             floor=0.05, mod_db=3.0),
)

ANOMALOUS = (
    Template("anomaly-hiss", bands=((2200.0, 900.0, 1.0),), mod_db=2.0),
    Template("anomaly-rumble", tones=((620.0, 0.05),), bands=((700.0, 350.0, 1.0), (5200.0, 1200.0, 0.3)),
             mod_db=2.0),
)


def _drift(n: int, std_db: float, rng: np.random.Generator, rate_hz: float = 4.0) -> np.ndarray:
    """Smooth random gain curve with the given dB standard deviation."""
    if std_db <= 0.0:
        return np.ones(n)
    knots = max(2, int(n / SAMPLE_RATE * rate_hz) + 2)
    db = rng.normal(0.0, std_db, knots)
    return 10.0 ** (np.interp(np.linspace(0, knots - 1, n), np.arange(knots), db) / 20.0)


def render(template: Template, duration: float, rng: np.random.Generator, rms: float = 0.05) -> AudioClip:
    """Render one clip of ``duration`` seconds scaled to the given RMS level."""
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    x = np.zeros(n)
    jitter = lambda: 10.0 ** (rng.normal(0.0, template.level_jitter_db) / 20.0)  # noqa: E731
    for freq, amp in template.tones:
        f = freq * (1.0 + rng.normal(0.0, template.freq_jitter))
        x += amp * jitter() * _drift(n, template.mod_db, rng) * np.sin(2.0 * np.pi * f * t + rng.uniform(0.0, 2.0 * np.pi))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    for center, width, amp in template.bands:
        env = np.exp(-0.5 * ((freqs - center) / width) ** 2)
        noise = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) * env, n)
        noise /= max(np.sqrt(np.mean(noise ** 2)), 1e-12)
        x += 0.3 * amp * jitter() * _drift(n, template.mod_db, rng) * noise
    if template.floor > 0.0:
        x += 0.3 * template.floor * rng.standard_normal(n)
    n_bursts = rng.poisson(template.transient_rate * duration)
    for _ in range(n_bursts):
        length = int(rng.uniform(0.01, 0.03) * SAMPLE_RATE)
        start = int(rng.integers(0, max(1, n - length)))
        decay = np.exp(-np.arange(length) / (0.3 * length))
        x[start:start + length] += rng.uniform(0.3, 1.0) * rng.standard_normal(length)[: n - start] * decay[: n - start]
    x *= rms / max(np.sqrt(np.mean(x ** 2)), 1e-12)
    return AudioClip(np.clip(x, -1.0, 1.0))


@dataclass
class DeskCorpus:
    normal_train: list[AudioClip]
    various_train: list[AudioClip]
    normal_test: list[AudioClip]
    anomalies: list[AudioClip]
    anomaly_names: list[str] = field(default_factory=list)


def desk_corpus(rng: np.random.Generator, normal_seconds: float = 32.0, various_seconds: float = 12.0,
                test_normal_seconds: float = 60.0, anomalies_per_template: int = 20,
                anomaly_seconds: float = 1.0, clip_seconds: float = 4.0) -> DeskCorpus:
    """Training pools, a held-out normal pool and anomaly clips from the held-out templates.

    Various sounds are gain-augmented to the five fixed peak levels.
    """
    def clips(template, total):
        count = max(1, int(round(total / clip_seconds)))
        return [render(template, clip_seconds, rng) for _ in range(count)]

    normal_train = clips(NORMAL, normal_seconds)
    various = []
    for template in VARIOUS:
        for clip in clips(template, various_seconds):
            various.extend(augment_gains(clip))
    normal_test = [render(NORMAL, test_normal_seconds, rng)]
    anomalies, names = [], []
    for template in ANOMALOUS:
        for i in range(anomalies_per_template):
            anomalies.append(render(template, anomaly_seconds, rng))
            names.append(f"{template.name}-{i:03d}")
    return DeskCorpus(normal_train, various, normal_test, anomalies, names)
