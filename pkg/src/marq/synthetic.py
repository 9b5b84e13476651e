"""Synthetic audio corpora for smoke tests and sanity training runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import AudioBuffer, ManifestEntry, write_manifest, write_wav


def sine_mixture(rng: np.random.Generator, seconds: float, sample_rate: int = 16000, n_tones: int = 3,
                 fmin: float = 80.0, fmax: float = 4000.0, noise_std: float = 0.01) -> np.ndarray:
    """Sum of ``n_tones`` log-uniform frequency sinusoids plus white noise, peak <= 0.9."""
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    freqs = np.exp(rng.uniform(np.log(fmin), np.log(fmax), n_tones))
    amps = rng.uniform(0.2, 1.0, n_tones)
    phases = rng.uniform(0, 2 * np.pi, n_tones)
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    x += rng.normal(0.0, noise_std, size=t.shape)
    return 0.9 * x / np.max(np.abs(x))


def tone(freq: float, seconds: float, sample_rate: int = 16000, amplitude: float = 1.0,
         phase: float = 0.0) -> np.ndarray:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq * t + phase)


def sine_corpus(n_clips: int, seconds: float, seed: int, sample_rate: int = 16000) -> list[AudioBuffer]:
    rng = np.random.default_rng(seed)
    return [AudioBuffer(sine_mixture(rng, seconds, sample_rate), sample_rate) for _ in range(n_clips)]


def tone_class_corpus(n_clips: int, seconds: float, seed: int, freqs=(220.0, 440.0, 880.0),
                      sample_rate: int = 16000) -> tuple[list[AudioBuffer], np.ndarray]:
    """Single harmonic tones with random level, phase, detuning and noise; labels index ``freqs``."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(freqs), size=n_clips)
    clips = []
    for lab in labels:
        f0 = freqs[lab] * 2 ** (rng.uniform(-0.25, 0.25) / 12)
        x = tone(f0, seconds, sample_rate, phase=rng.uniform(0, 2 * np.pi))
        x += rng.uniform(0.1, 0.5) * tone(2 * f0, seconds, sample_rate, phase=rng.uniform(0, 2 * np.pi))
        x += rng.normal(0.0, 0.02, size=x.shape)
        x *= rng.uniform(0.3, 0.9) / np.max(np.abs(x))
        clips.append(AudioBuffer(x, sample_rate))
    return clips, labels


def write_corpus(directory, clips, splits, labels=None, prefix: str = "clip") -> Path:
    """Write WAVs plus ``manifest.csv`` into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (clip, split) in enumerate(zip(clips, splits)):
        name = f"{prefix}{i:04d}"
        write_wav(directory / f"{name}.wav", clip.samples, clip.sample_rate)
        lab = None if labels is None else labels[i]
        entries.append(ManifestEntry(name, Path(f"{name}.wav"), split, lab))
    path = directory / "manifest.csv"
    write_manifest(path, entries)
    return path
