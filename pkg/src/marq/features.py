"""Deterministic DSP front-ends producing :class:`FeatureMatrix` objects.

Frame-count conventions:

* ``stft``/``mel_spectrogram``/``cqt`` use centered frames: frame ``t`` is
  centered on sample ``t * hop`` and there are ``1 + len // hop`` frames.
  STFT pads by reflection, CQT pads with zeros.
* ``waveform_patches`` does not pad: ``floor((len - patch_len) / hop) + 1``
  frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import AudioBuffer, read_feature_cache


class FeatureError(ValueError):
    pass


class MissingRecordError(KeyError):
    pass


def as_rate(rate) -> Fraction:
    """Exact rational frame rate from an int, Fraction, float or decimal string."""
    if isinstance(rate, Fraction):
        return rate
    if isinstance(rate, int):
        return Fraction(rate)
    if isinstance(rate, float):
        return Fraction(rate).limit_denominator(10**6)
    return Fraction(str(rate))


def round_half_up(x) -> int:
    return math.floor(x + Fraction(1, 2)) if isinstance(x, Fraction) else math.floor(x + 0.5)


@dataclass
class FeatureMatrix:
    feature_name: str
    frame_rate: Fraction
    data: np.ndarray

    def __post_init__(self):
        self.frame_rate = as_rate(self.frame_rate)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise FeatureError("feature data must be frames x dims")
        if not np.all(np.isfinite(self.data)):
            raise FeatureError(f"non-finite values in {self.feature_name!r} features")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]

    def crop(self, start: int, length: int) -> "FeatureMatrix":
        return FeatureMatrix(self.feature_name, self.frame_rate, self.data[start:start + length])


@dataclass
class MelConfig:
    n_fft: int = 1024
    hop: int = 1024
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None
    log_floor: float = 1e-5


@dataclass
class CqtConfig:
    fmin: float = 32.70
    bins_per_octave: int = 12
    n_bins: int = 84
    hop: int = 512
    log_floor: float = 1e-5


@dataclass
class PatchConfig:
    patch_len: int = 640
    hop: int = 640


# -- STFT --------------------------------------------------------------------


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (DFT-even), mean gain exactly 0.5."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    padded = np.pad(x, n_fft // 2, mode="reflect")
    n_frames = 1 + len(x) // hop
    return sliding_window_view(padded, n_fft)[::hop][:n_frames]


def stft(audio: AudioBuffer, n_fft: int = 1024, hop: int = 1024, window: str = "hann") -> np.ndarray:
    """Centered, reflect-padded STFT; returns ``frames x (n_fft // 2 + 1)`` complex."""
    if n_fft <= 0 or n_fft & (n_fft - 1):
        raise FeatureError(f"n_fft must be a power of two, got {n_fft}")
    if hop < 1:
        raise FeatureError("hop must be >= 1")
    if window != "hann":
        raise FeatureError(f"unsupported window {window!r}")
    x = audio.samples
    if len(x) < hop or len(x) <= n_fft // 2:
        raise FeatureError("audio shorter than one hop / half a window")
    frames = _frame(x, n_fft, hop) * hann(n_fft)
    return np.fft.rfft(frames, axis=1)


# -- mel ---------------------------------------------------------------------

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(f):
    """Slaney (Auditory Toolbox) mel scale: linear below 1 kHz, log above."""
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


def mel_band_edges(sample_rate: int, cfg: MelConfig) -> np.ndarray:
    """``n_mels + 2`` band edge frequencies; entries 1..n_mels are filter centers."""
    fmax = cfg.fmax if cfg.fmax is not None else sample_rate / 2
    if not 0 <= cfg.fmin < fmax <= sample_rate / 2:
        raise FeatureError(f"need 0 <= fmin < fmax <= {sample_rate / 2}")
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))


def mel_filterbank(sample_rate: int, cfg: MelConfig) -> np.ndarray:
    """Triangular filters on the Slaney scale, each row summing to one."""
    if cfg.hop > cfg.n_fft:
        raise FeatureError("hop must not exceed n_fft")
    edges = mel_band_edges(sample_rate, cfg)
    freqs = np.arange(cfg.n_fft // 2 + 1) * sample_rate / cfg.n_fft
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (ctr - lo)
    falling = (hi - freqs) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    sums = fb.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise FeatureError("empty mel filter; reduce n_mels or raise n_fft")
    return fb / sums


def mel_spectrogram(audio: AudioBuffer, cfg: MelConfig | None = None) -> FeatureMatrix:
    cfg = cfg or MelConfig()
    fb = mel_filterbank(audio.sample_rate, cfg)
    power = np.abs(stft(audio, cfg.n_fft, cfg.hop)) ** 2
    data = np.log(power @ fb.T + cfg.log_floor)
    return FeatureMatrix("mel", Fraction(audio.sample_rate, cfg.hop), data)


# -- CQT ---------------------------------------------------------------------


def cqt_frequencies(cfg: CqtConfig) -> np.ndarray:
    return cfg.fmin * 2.0 ** (np.arange(cfg.n_bins) / cfg.bins_per_octave)


def cqt_kernels(sample_rate: int, cfg: CqtConfig) -> list[np.ndarray]:
    """One Hann-windowed complex exponential per bin, normalized by window sum.

    A unit-amplitude real sinusoid at a bin's center frequency gives a
    response magnitude of about 0.5 in that bin.
    """
    freqs = cqt_frequencies(cfg)
    if freqs[-1] > sample_rate / 2:
        raise FeatureError("highest CQT bin exceeds Nyquist")
    q = 1.0 / (2.0 ** (1.0 / cfg.bins_per_octave) - 1.0)
    kernels = []
    for f in freqs:
        n = int(math.ceil(q * sample_rate / f))
        w = hann(n)
        t = (np.arange(n) - n // 2) / sample_rate
        kernels.append(w * np.exp(-2j * np.pi * f * t) / w.sum())
    return kernels


def cqt(audio: AudioBuffer, cfg: CqtConfig | None = None) -> FeatureMatrix:
    """Log-magnitude constant-Q transform by direct per-bin inner products."""
    cfg = cfg or CqtConfig()
    kernels = cqt_kernels(audio.sample_rate, cfg)
    longest = max(len(k) for k in kernels)
    x = audio.samples
    if len(x) < longest:
        raise FeatureError(f"audio shorter than the longest CQT kernel ({longest} samples)")
    pad = longest // 2 + 1
    padded = np.pad(x, pad)
    n_frames = 1 + len(x) // cfg.hop
    centers = np.arange(n_frames) * cfg.hop + pad
    out = np.empty((n_frames, cfg.n_bins))
    for k, kern in enumerate(kernels):
        n = len(kern)
        windows = sliding_window_view(padded, n)[centers - n // 2]
        out[:, k] = np.abs(windows @ kern)
    return FeatureMatrix("cqt", Fraction(audio.sample_rate, cfg.hop), np.log(out + cfg.log_floor))


# -- raw waveform, external features, frame-grid resampling -------------------


def waveform_patches(audio: AudioBuffer, patch_len: int = 640, hop: int = 640) -> FeatureMatrix:
    if not patch_len >= hop >= 1:
        raise FeatureError("need patch_len >= hop >= 1")
    x = audio.samples
    if len(x) < patch_len:
        raise FeatureError("audio shorter than one patch")
    rows = sliding_window_view(x, patch_len)[::hop]
    return FeatureMatrix("audio", Fraction(audio.sample_rate, hop), rows.copy())


def load_external_features(cache_path, clip_id: str, feature_name: str = "enc") -> FeatureMatrix:
    for rec in read_feature_cache(cache_path):
        if rec.clip_id == clip_id and rec.feature_name == feature_name:
            return FeatureMatrix(feature_name, rec.frame_rate, rec.payload.astype(np.float64))
    raise MissingRecordError(f"no {feature_name!r} record for clip {clip_id!r} in {cache_path}")


def check_dims(feat: FeatureMatrix, expected: int) -> FeatureMatrix:
    if feat.dims != expected:
        raise FeatureError(f"{feat.feature_name!r} has {feat.dims} dims, pipeline expects {expected}")
    return feat


def resample_frames(feat: FeatureMatrix, target_rate) -> FeatureMatrix:
    """Nearest-frame resampling onto a new frame grid.

    Output frame ``t`` copies input frame ``round(t * in_rate / target_rate)``
    (halves round up, index clamped to the last frame); the output has
    ``round(frames * target_rate / in_rate)`` frames.
    """
    target = as_rate(target_rate)
    if target <= 0:
        raise FeatureError("target rate must be positive")
    if feat.frames == 0:
        raise FeatureError("cannot resample an empty feature matrix")
    if target == feat.frame_rate:
        return FeatureMatrix(feat.feature_name, target, feat.data.copy())
    ratio = feat.frame_rate / target
    n_out = max(1, round_half_up(feat.frames / ratio))
    idx = np.array([min(round_half_up(t * ratio), feat.frames - 1) for t in range(n_out)])
    return FeatureMatrix(feat.feature_name, target, feat.data[idx])


def extract_feature(audio: AudioBuffer, name: str, cfg=None) -> FeatureMatrix:
    """Dispatch by feature name (``mel``, ``cqt``, ``audio``)."""
    if name == "mel":
        return mel_spectrogram(audio, cfg)
    if name == "cqt":
        return cqt(audio, cfg)
    if name == "audio":
        cfg = cfg or PatchConfig()
        return waveform_patches(audio, cfg.patch_len, cfg.hop)
    raise FeatureError(f"no built-in extractor for {name!r}; load it as an external feature")
