from fractions import Fraction

import numpy as np
import pytest

from marq.audio_io import AudioBuffer, FeatureCacheRecord, write_feature_cache
from marq.features import (CqtConfig, FeatureError, FeatureMatrix, MelConfig, MissingRecordError, check_dims,
                           cqt, cqt_frequencies, hann, load_external_features, mel_band_edges,
                           mel_filterbank, mel_spectrogram, resample_frames, stft, waveform_patches)

SR = 16000


def tone(freq, seconds=1.0, sr=SR, amp=1.0):
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * np.arange(int(seconds * sr)) / sr), sr)


def direct_dft(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    return (frame[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(axis=1)


# -- STFT --------------------------------------------------------------------


def test_stft_zero_signal():
    assert not np.abs(stft(AudioBuffer(np.zeros(4096), SR), 1024, 256)).any()


def test_stft_tone_peak_bin_and_magnitude():
    spec = np.abs(stft(tone(1000.0), 1024, 256))
    interior = spec[4:-4]
    assert np.all(interior.argmax(axis=1) == 64)
    # full-scale tone at an exact bin: n_fft * mean(window) / 2
    np.testing.assert_allclose(interior[:, 64], 1024 * 0.5 / 2, rtol=0.01)


def test_stft_matches_direct_dft():
    rng = np.random.default_rng(1)
    audio = AudioBuffer(rng.uniform(-1, 1, 2048), SR)
    spec = stft(audio, 256, 128)
    padded = np.pad(audio.samples, 128, mode="reflect")
    for t in (0, 3, 10):
        frame = padded[t * 128:t * 128 + 256] * hann(256)
        np.testing.assert_allclose(spec[t], direct_dft(frame), atol=1e-9)


def test_stft_parseval():
    rng = np.random.default_rng(2)
    audio = AudioBuffer(rng.uniform(-1, 1, 8000), SR)
    n_fft, hop = 512, 200
    spec = stft(audio, n_fft, hop)
    padded = np.pad(audio.samples, n_fft // 2, mode="reflect")
    w = hann(n_fft)
    for t in range(spec.shape[0]):
        energy = np.sum((padded[t * hop:t * hop + n_fft] * w) ** 2)
        half = np.abs(spec[t]) ** 2
        full = half[0] + half[-1] + 2 * half[1:-1].sum()
        assert abs(energy - full / n_fft) <= 1e-3 * energy


def test_stft_errors():
    with pytest.raises(FeatureError):
        stft(tone(100.0), 1000, 100)
    with pytest.raises(FeatureError):
        stft(AudioBuffer(np.zeros(100), SR), 1024, 256)


def test_stft_frame_count():
    for n in (4096, 5000, 16000):
        assert stft(AudioBuffer(np.zeros(n), SR), 1024, 256).shape == (1 + n // 256, 513)


# -- mel ---------------------------------------------------------------------


def test_mel_silence_is_log_floor():
    feat = mel_spectrogram(AudioBuffer(np.zeros(SR), SR))
    np.testing.assert_array_equal(feat.data, np.log(1e-5))


def test_mel_default_frame_rate_is_15_625():
    feat = mel_spectrogram(tone(440.0))
    assert feat.frame_rate == Fraction(125, 8) and float(feat.frame_rate) == 15.625
    assert feat.frames == 1 + SR // 1024
    assert feat.dims == 64


def test_mel_filters_rows_sum_to_one():
    fb = mel_filterbank(SR, MelConfig())
    np.testing.assert_allclose(fb.sum(axis=1), 1.0)
    assert np.all(fb >= 0)


def test_mel_slaney_scale_anchor_points():
    from marq.features import hz_to_mel, mel_to_hz
    assert hz_to_mel(1000.0) == pytest.approx(15.0)
    assert hz_to_mel(6400.0) == pytest.approx(15.0 + 27.0)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel([0.0, 440.0, 5000.0])), [0.0, 440.0, 5000.0])


def test_mel_tone_argmax_is_nearest_center():
    centers = mel_band_edges(SR, MelConfig())[1:-1]
    expected = int(np.argmin(np.abs(centers - 440.0)))
    feat = mel_spectrogram(tone(440.0))
    assert np.all(feat.data[2:-2].argmax(axis=1) == expected)


def test_mel_dc_offset_only_touches_filters_covering_dc_leakage():
    cfg = MelConfig()
    fb = mel_filterbank(SR, cfg)
    rng = np.random.default_rng(3)
    x = 0.3 * rng.uniform(-1, 1, SR)
    a = mel_spectrogram(AudioBuffer(x, SR), cfg).data
    b = mel_spectrogram(AudioBuffer(x + 0.01, SR), cfg).data
    # a periodic Hann window spreads DC over DFT bins 0 and 1 only
    untouched = (fb[:, 0] == 0) & (fb[:, 1] == 0)
    assert untouched.sum() > 50
    np.testing.assert_allclose(a[:, untouched], b[:, untouched], rtol=0, atol=1e-9)
    assert not np.allclose(a[:, ~untouched], b[:, ~untouched])


def test_mel_config_errors():
    with pytest.raises(FeatureError):
        mel_filterbank(SR, MelConfig(fmin=9000.0))
    with pytest.raises(FeatureError):
        mel_filterbank(SR, MelConfig(n_fft=256, n_mels=256))
    with pytest.raises(FeatureError):
        mel_filterbank(SR, MelConfig(n_fft=512, hop=1024))


# -- CQT ---------------------------------------------------------------------


def test_cqt_440_lands_in_bin_45():
    assert round(np.log2(440 / 32.70) * 12) == 45
    feat = cqt(tone(440.0))
    assert feat.frame_rate == Fraction(SR, 512)
    assert np.all(feat.data[8:-8].argmax(axis=1) == 45)


def test_cqt_tone_at_fmin_lands_in_bin_0():
    cfg = CqtConfig()
    feat = cqt(tone(cfg.fmin, seconds=2.0), cfg)
    assert np.all(feat.data[20:-20].argmax(axis=1) == 0)


def test_cqt_octave_shift_moves_by_bins_per_octave():
    cfg = CqtConfig(fmin=100.0, bins_per_octave=24, n_bins=120)
    low = cqt(tone(300.0), cfg).data[10:-10].argmax(axis=1)
    high = cqt(tone(600.0), cfg).data[10:-10].argmax(axis=1)
    np.testing.assert_array_equal(high - low, 24)


def test_cqt_matches_direct_kernel_sum():
    from marq.features import cqt_kernels
    cfg = CqtConfig(fmin=200.0, n_bins=12, hop=400)
    rng = np.random.default_rng(4)
    audio = AudioBuffer(rng.uniform(-1, 1, 4000), SR)
    feat = cqt(audio, cfg)
    kernels = cqt_kernels(SR, cfg)
    for t in (0, 3, 7):
        for k in (0, 5, 11):
            kern = kernels[k]
            n = len(kern)
            acc = 0j
            for i in range(n):
                idx = t * cfg.hop - n // 2 + i
                if 0 <= idx < len(audio.samples):
                    acc += audio.samples[idx] * kern[i]
            assert feat.data[t, k] == pytest.approx(np.log(abs(acc) + 1e-5), abs=1e-9)


def test_cqt_bins_are_geometric():
    f = cqt_frequencies(CqtConfig())
    np.testing.assert_allclose(f[12::12] / f[:-12:12], 2.0)


def test_cqt_errors():
    with pytest.raises(FeatureError):
        cqt(tone(440.0, seconds=0.2))
    with pytest.raises(FeatureError):
        cqt(tone(440.0), CqtConfig(n_bins=200))


# -- waveform patches --------------------------------------------------------


def test_patches_nonoverlapping_reshape():
    x = np.linspace(-1, 1, 1003)
    feat = waveform_patches(AudioBuffer(x, SR), 10, 10)
    np.testing.assert_array_equal(feat.data.ravel(), x[:1000])
    assert feat.frame_rate == 1600


def test_patches_ramp_row():
    x = np.arange(20) / 20.0
    feat = waveform_patches(AudioBuffer(x, SR), 4, 2)
    np.testing.assert_array_equal(feat.data[1], x[[2, 3, 4, 5]])


@pytest.mark.parametrize("seed", range(5))
def test_patches_frame_count(seed):
    rng = np.random.default_rng(seed)
    n, patch = int(rng.integers(50, 500)), int(rng.integers(5, 40))
    hop = int(rng.integers(1, patch + 1))
    feat = waveform_patches(AudioBuffer(np.zeros(n), SR), patch, hop)
    count = sum(1 for start in range(0, n) if start % hop == 0 and start + patch <= n)
    assert feat.frames == count == (n - patch) // hop + 1


def test_patches_errors():
    with pytest.raises(FeatureError):
        waveform_patches(AudioBuffer(np.zeros(5), SR), 10, 10)
    with pytest.raises(FeatureError):
        waveform_patches(AudioBuffer(np.zeros(50), SR), 4, 8)


# -- external features and resampling -----------------------------------------


def test_external_features(tmp_path):
    data = np.random.default_rng(0).normal(size=(30, 8)).astype(np.float32)
    write_feature_cache([FeatureCacheRecord("c1", "enc", 75, data)], tmp_path / "enc.bin")
    feat = load_external_features(tmp_path / "enc.bin", "c1")
    assert feat.frame_rate == 75 and feat.dims == 8
    np.testing.assert_array_equal(feat.data, data.astype(np.float64))
    with pytest.raises(MissingRecordError):
        load_external_features(tmp_path / "enc.bin", "nope")
    with pytest.raises(FeatureError):
        check_dims(feat, 128)


def test_resample_identity():
    feat = FeatureMatrix("x", 10, np.arange(20.0).reshape(10, 2))
    np.testing.assert_array_equal(resample_frames(feat, 10).data, feat.data)


def index_oracle(n_in, rate_in, rate_out):
    n_out = int(np.floor(n_in * rate_out / rate_in + 0.5))
    return [min(int(np.floor(t * rate_in / rate_out + 0.5)), n_in - 1) for t in range(n_out)]


def test_resample_downsample_rows():
    feat = FeatureMatrix("x", 10, np.arange(10.0)[:, None])
    out = resample_frames(feat, 5)
    assert out.frame_rate == 5
    np.testing.assert_array_equal(out.data[:, 0], [0, 2, 4, 6, 8])


def test_resample_upsample_duplicates():
    feat = FeatureMatrix("x", 5, np.arange(6.0)[:, None])
    out = resample_frames(feat, 10)
    np.testing.assert_array_equal(out.data[:, 0], index_oracle(6, 5, 10))
    assert out.frames == 12


@pytest.mark.parametrize("rates", [(Fraction(125, 8), Fraction(75, 4)), (75, Fraction(75, 4)), (Fraction(125, 4), 25)])
def test_resample_matches_index_formula(rates):
    r_in, r_out = rates
    feat = FeatureMatrix("x", r_in, np.arange(97.0)[:, None])
    out = resample_frames(feat, r_out)
    np.testing.assert_array_equal(out.data[:, 0], index_oracle(97, Fraction(r_in), Fraction(r_out)))


def test_resample_empty_errors():
    with pytest.raises(FeatureError):
        resample_frames(FeatureMatrix("x", 10, np.zeros((0, 3))), 5)


# -- extractor-wide properties -------------------------------------------------


EXTRACTORS = {
    "mel": (lambda a: mel_spectrogram(a), 1024),
    "cqt": (lambda a: cqt(a), 512),
    "audio": (lambda a: waveform_patches(a, 640, 640), 640),
}


@pytest.mark.parametrize("name", EXTRACTORS)
def test_extractors_deterministic(name):
    fn, _ = EXTRACTORS[name]
    audio = AudioBuffer(np.random.default_rng(5).uniform(-1, 1, 2 * SR), SR)
    assert fn(audio).data.tobytes() == fn(audio).data.tobytes()


@pytest.mark.parametrize("name", EXTRACTORS)
def test_extractors_shift_by_one_hop(name):
    fn, hop = EXTRACTORS[name]
    rng = np.random.default_rng(6)
    x = rng.uniform(-0.5, 0.5, 2 * SR)
    shifted = np.concatenate([rng.uniform(-0.5, 0.5, hop), x])
    a = fn(AudioBuffer(x, SR)).data
    b = fn(AudioBuffer(shifted, SR)).data
    edge = 10 if name == "cqt" else 2
    np.testing.assert_allclose(b[1 + edge:a.shape[0] - edge + 1], a[edge:-edge], rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("name", EXTRACTORS)
def test_frame_rate_metadata_exact(name):
    fn, hop = EXTRACTORS[name]
    feat = fn(tone(300.0))
    assert feat.frame_rate == Fraction(SR, hop)
