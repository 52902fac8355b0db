"""Log-Mel spectral features and the frame contract shared with the learned
temporal branch of the backbone."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from ._container import read_container, write_container


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = 1024
    hop: int = 512
    mel_bins: int = 128
    sample_rate: int = 16000
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_fft < 1 or self.hop < 1:
            raise ValueError("n_fft and hop must be positive")
        if self.hop > self.n_fft:
            raise ValueError("hop must not exceed n_fft")
        if self.mel_bins < 1:
            raise ValueError("mel_bins must be >= 1")
        if self.sample_rate <= 0 or self.log_floor <= 0:
            raise ValueError("sample_rate and log_floor must be positive")

    @property
    def hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class LogMelSpec:
    values: np.ndarray  # (mel_bins, frames)
    config_hash: str

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def num_frames(length: int, cfg: FeatureConfig) -> int:
    if length < cfg.n_fft:
        raise ValueError(f"waveform of {length} samples is shorter than n_fft={cfg.n_fft}")
    return 1 + (length - cfg.n_fft) // cfg.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    pts = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2), cfg.mel_bins + 2)
    return mel_to_hz(pts[1:-1])


@lru_cache(maxsize=16)
def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular HTK-spaced filters, shape (mel_bins, n_fft // 2 + 1), peak 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2),
                                  cfg.mel_bins + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def power_spectrogram(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """|STFT|^2 with a periodic Hann window and no centre padding; (bins, frames)."""
    x = np.asarray(x, dtype=np.float64)
    t = num_frames(len(x), cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[::cfg.hop][:t]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.n_fft) / cfg.n_fft)
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def log_mel_array(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    mel = mel_filterbank(cfg) @ power_spectrogram(x, cfg)
    return np.log(np.maximum(mel, cfg.log_floor))


def log_mel(clip, cfg: FeatureConfig) -> LogMelSpec:
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip sample rate {clip.sample_rate} != configured {cfg.sample_rate}")
    return LogMelSpec(log_mel_array(clip.samples, cfg), cfg.hash)


def tgram_shape_contract(waveform_length: int, cfg: FeatureConfig) -> tuple[int, int]:
    """(channels, frames) the temporal branch must emit to stack with log-Mel."""
    return cfg.mel_bins, num_frames(waveform_length, cfg)


def batch_log_mel(clips, cfg: FeatureConfig, workers: int = 1, cache=None) -> np.ndarray:
    """Stack log-Mel features of equal-length clips into (N, mel_bins, frames)."""
    def one(clip):
        if cache is not None and clip.source_path:
            return cache.get_or_compute(clip, cfg)
        return log_mel(clip, cfg).values

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            mats = list(pool.map(one, clips))
    else:
        mats = [one(c) for c in clips]
    return np.stack(mats)


class FeatureCache:
    """On-disk log-Mel cache keyed by (clip path, feature config hash)."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, source_path: str, cfg: FeatureConfig) -> Path:
        key = hashlib.sha256(f"{source_path}\0{cfg.hash}".encode()).hexdigest()[:24]
        return self.directory / f"{key}.feat"

    def get_or_compute(self, clip, cfg: FeatureConfig) -> np.ndarray:
        path = self._path(clip.source_path, cfg)
        if path.exists():
            meta, arrays = read_container(path, "feature-v1")
            if meta.get("source_path") == clip.source_path and meta.get("config_hash") == cfg.hash:
                return arrays["log_mel"]
        values = log_mel(clip, cfg).values
        write_container(path, "feature-v1",
                        {"source_path": clip.source_path, "config_hash": cfg.hash},
                        {"log_mel": values})
        return values
