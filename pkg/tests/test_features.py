import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clpscf.dataio import AudioClip
from clpscf.features import (FeatureCache, FeatureConfig, log_mel, log_mel_array,
                             mel_center_frequencies, num_frames, tgram_shape_contract)


def _clip(x, rate=16000):
    return AudioClip(np.asarray(x, dtype=np.float64), rate, "fan", 0, source_path="fan/a.wav")


def test_zero_waveform_gives_floor():
    cfg = FeatureConfig()
    spec = log_mel(_clip(np.zeros(4096)), cfg)
    assert np.all(spec.values == math.log(cfg.log_floor))


def test_frame_count_ten_seconds():
    cfg = FeatureConfig()
    spec = log_mel(_clip(np.random.default_rng(0).normal(size=160000) * 0.1), cfg)
    assert spec.values.shape == (128, 311)
    assert spec.frames == 1 + (160000 - 1024) // 512 == 311


def test_errors():
    cfg = FeatureConfig()
    with pytest.raises(ValueError):
        log_mel(_clip(np.zeros(1000)), cfg)
    with pytest.raises(ValueError):
        log_mel(_clip(np.zeros(4096), rate=22050), cfg)
    with pytest.raises(ValueError):
        FeatureConfig(n_fft=256, hop=512)


def _oracle_mel_column(frame, cfg):
    """Direct DFT of one Hann-windowed frame followed by an independently
    constructed triangular HTK filterbank."""
    n = cfg.n_fft
    window = [0.5 - 0.5 * math.cos(2 * math.pi * k / n) for k in range(n)]
    xs = [frame[k] * window[k] for k in range(n)]
    power = []
    for b in range(n // 2 + 1):
        re = sum(xs[k] * math.cos(2 * math.pi * b * k / n) for k in range(n))
        im = sum(xs[k] * math.sin(2 * math.pi * b * k / n) for k in range(n))
        power.append(re * re + im * im)
    top = 2595 * math.log10(1 + (cfg.sample_rate / 2) / 700)
    edges = [700 * (10 ** (top * j / (cfg.mel_bins + 1) / 2595) - 1) for j in range(cfg.mel_bins + 2)]
    out = []
    for m in range(cfg.mel_bins):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        acc = 0.0
        for b, p in enumerate(power):
            f = b * cfg.sample_rate / n
            if lo < f <= mid:
                acc += p * (f - lo) / (mid - lo)
            elif mid < f < hi:
                acc += p * (hi - f) / (hi - mid)
        out.append(acc)
    return out


@pytest.mark.parametrize("band", [12, 20, 30])
def test_sine_at_mel_centre_peaks_in_that_band(band):
    cfg = FeatureConfig(n_fft=256, hop=128, mel_bins=40, sample_rate=16000)
    freq = mel_center_frequencies(cfg)[band]
    t = np.arange(2048) / cfg.sample_rate
    x = 0.5 * np.sin(2 * np.pi * freq * t)
    values = log_mel(_clip(x), cfg).values
    mid = values.shape[1] // 2
    oracle = _oracle_mel_column(x[mid * cfg.hop: mid * cfg.hop + cfg.n_fft], cfg)
    assert int(np.argmax(oracle)) == band
    assert int(np.argmax(values[:, mid])) == band
    np.testing.assert_allclose(values[:, mid], np.log(np.maximum(oracle, cfg.log_floor)),
                               rtol=1e-9, atol=1e-9)


def test_tgram_contract():
    cfg = FeatureConfig()
    assert tgram_shape_contract(160000, cfg) == (128, 311)
    assert tgram_shape_contract(1024, cfg) == (128, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(256, 5000))
def test_tgram_contract_matches_log_mel(length):
    cfg = FeatureConfig(n_fft=256, hop=96, mel_bins=16)
    x = np.random.default_rng(length).normal(size=length)
    assert tgram_shape_contract(length, cfg) == log_mel(_clip(x), cfg).values.shape


def test_amplitude_doubling_adds_log4():
    cfg = FeatureConfig(n_fft=512, hop=256, mel_bins=32)
    x = np.random.default_rng(1).normal(size=4000) * 0.1
    a = log_mel_array(x, cfg)
    b = log_mel_array(2 * x, cfg)
    above = a > math.log(cfg.log_floor) + 1
    assert above.any()
    np.testing.assert_allclose((b - a)[above], math.log(4), atol=1e-9)


def test_deterministic():
    cfg = FeatureConfig(n_fft=512, hop=256, mel_bins=32)
    x = np.random.default_rng(2).normal(size=4000)
    assert log_mel_array(x, cfg).tobytes() == log_mel_array(x.copy(), cfg).tobytes()


def test_feature_cache_same_result(tmp_path):
    cfg = FeatureConfig(n_fft=512, hop=256, mel_bins=32)
    clip = _clip(np.random.default_rng(3).normal(size=4000))
    cache = FeatureCache(tmp_path)
    first = cache.get_or_compute(clip, cfg)
    assert len(list(tmp_path.glob("*.feat"))) == 1
    second = cache.get_or_compute(clip, cfg)
    assert first.tobytes() == second.tobytes() == log_mel(clip, cfg).values.tobytes()
    other = FeatureConfig(n_fft=512, hop=128, mel_bins=32)
    assert cache.get_or_compute(clip, other).shape[1] == num_frames(4000, other)
