"""Synthetic paired vocal/accompaniment corpus, a desk-scale stand-in for real multitracks.

Vocals are harmonic notes (3-8 partials, f0 in [100, 400] Hz) with vibrato and
note envelopes. Accompaniment is band-limited noise in a high band plus
low-frequency bass tones.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .audio_io import Waveform, read_wav, write_wav

NOISE_BAND_HZ = (4000.0, 10000.0)
PEAK_RANGE = (0.5, 0.8)


@dataclass(frozen=True)
class SynthSpec:
    tracks: int = 20
    duration: float = 10.0
    seed: int = 0
    sample_rate: int = 44100


@dataclass
class Track:
    name: str
    vocals: np.ndarray
    accompaniment: np.ndarray
    sample_rate: int = 44100


def _ramp_envelope(n: int, attack: int, release: int) -> np.ndarray:
    env = np.ones(n)
    attack, release = min(attack, n // 2), min(release, n // 2)
    if attack:
        env[:attack] = 0.5 - 0.5 * np.cos(np.pi * np.arange(attack) / attack)
    if release:
        env[n - release:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(1, release + 1) / release)
    return env


def synth_vocals(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.3) * sr)
    while pos < n:
        length = min(int(rng.uniform(0.4, 1.5) * sr), n - pos)
        t = np.arange(length) / sr
        f0 = rng.uniform(100.0, 400.0)
        vib = 1.0 + rng.uniform(0.005, 0.02) * np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * t + rng.uniform(0, 2 * np.pi))
        phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
        tilt = rng.uniform(0.5, 1.5)
        note = np.zeros(length)
        for k in range(1, int(rng.integers(3, 9)) + 1):
            if k * f0 * 1.03 >= sr / 2:
                break
            amp = k ** -tilt * rng.uniform(0.5, 1.0)
            note += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        env = _ramp_envelope(length, int(rng.uniform(0.02, 0.08) * sr), int(rng.uniform(0.05, 0.15) * sr))
        out[pos:pos + length] += note * env * rng.uniform(0.6, 1.0)
        pos += length + int(rng.uniform(0.05, 0.3) * sr)
    return out


def synth_accompaniment(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    sos = signal.butter(4, NOISE_BAND_HZ, btype="bandpass", fs=sr, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    # rhythmic gating of the noise at a random tempo
    beat = rng.uniform(2.0, 4.0)
    gate = 0.3 + 0.7 * np.maximum(0.0, np.cos(2 * np.pi * beat * t)) ** 4
    noise *= gate / (np.std(noise) + 1e-12)
    bass = np.zeros(n)
    pos = 0
    while pos < n:
        length = min(int(rng.uniform(0.25, 1.0) * sr), n - pos)
        f = rng.uniform(40.0, 90.0)
        tt = np.arange(length) / sr
        bass[pos:pos + length] = np.sin(2 * np.pi * f * tt) * _ramp_envelope(length, int(0.01 * sr), int(0.05 * sr))
        pos += length
    return 0.5 * noise / np.max(np.abs(noise)) + rng.uniform(0.5, 1.0) * bass


def _normalize(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    peak = np.max(np.abs(x))
    return x if peak == 0 else x * (rng.uniform(*PEAK_RANGE) / peak)


def synth_dataset(spec: SynthSpec) -> list[Track]:
    """Deterministic corpus of ``spec.tracks`` paired stems."""
    n = int(round(spec.duration * spec.sample_rate))
    tracks = []
    for i in range(spec.tracks):
        rng = np.random.default_rng([spec.seed, i])
        v = _normalize(synth_vocals(rng, n, spec.sample_rate), rng)
        a = _normalize(synth_accompaniment(rng, n, spec.sample_rate), rng)
        # stored as float32 WAV; round now so in-memory and on-disk corpora agree
        tracks.append(Track(f"track{i:03d}", v.astype(np.float32).astype(np.float64),
                            a.astype(np.float32).astype(np.float64), spec.sample_rate))
    return tracks


def write_corpus(tracks: list[Track], root: str | Path) -> None:
    root = Path(root)
    for tr in tracks:
        d = root / tr.name
        d.mkdir(parents=True, exist_ok=True)
        write_wav(d / "vocals.wav", Waveform(tr.vocals, tr.sample_rate))
        write_wav(d / "accompaniment.wav", Waveform(tr.accompaniment, tr.sample_rate))


class MissingStemsError(FileNotFoundError):
    pass


def load_corpus(root: str | Path) -> list[Track]:
    """Load ``<root>/<track>/{vocals,accompaniment}.wav`` pairs in sorted track order."""
    root = Path(root)
    if not root.is_dir():
        raise MissingStemsError(f"data directory {root} does not exist")
    tracks, problems = [], []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        missing = [s for s in ("vocals.wav", "accompaniment.wav") if not (d / s).is_file()]
        if missing:
            problems.append(f"{d.name}: missing {', '.join(missing)}")
            continue
        v, a = read_wav(d / "vocals.wav"), read_wav(d / "accompaniment.wav")
        if v.sample_rate != a.sample_rate:
            problems.append(f"{d.name}: sample rates differ ({v.sample_rate} vs {a.sample_rate})")
            continue
        n = min(len(v), len(a))
        tracks.append(Track(d.name, v.samples[:n], a.samples[:n], v.sample_rate))
    if problems:
        raise MissingStemsError("incomplete stems:\n  " + "\n  ".join(problems))
    if not tracks:
        raise MissingStemsError(f"no <track>/vocals.wav + accompaniment.wav pairs under {root}")
    return tracks
