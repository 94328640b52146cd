"""Framing, magnitude STFT, log-Mel and MFCC features.

Frames are taken without padding: ``1 + (len - frame_length) // frame_shift``
frames, each windowed (periodic Hann by default) and zero-padded to ``n_fft``.

Mel filters are HTK-mel triangles with unit peak placed on a continuous
frequency axis. Adjacent triangles cross at half height, so the weights on
any FFT bin sum to at most 1 across filters; summed mel energy therefore
never exceeds the frame's spectral energy.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.fft import dct

KINDS = ("mfcc", "logmel", "layer", "random_layer", "stft", "frames")


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    frame_length: int = 400
    frame_shift: int = 160
    n_fft: int = 512
    n_mels: int = 40
    n_mfcc: int = 13
    mel_fmin: float = 20.0
    mel_fmax: float = 7600.0
    log_floor: float = 1e-10
    window: str = "hann"
    deltas: bool = False

    def __post_init__(self):
        if not 0 < self.frame_shift <= self.frame_length <= self.n_fft:
            raise ValueError("need 0 < frame_shift <= frame_length <= n_fft")
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise ValueError("need 1 <= n_mfcc <= n_mels")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be > 0")
        if not 0 <= self.mel_fmin < self.mel_fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= mel_fmin < mel_fmax <= sample_rate/2")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.frame_shift

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_length:
            return 0
        return 1 + (n_samples - self.frame_length) // self.frame_shift

    def with_(self, **kw) -> "DspConfig":
        return replace(self, **kw)


@dataclass
class FeatureSequence:
    data: np.ndarray
    frame_rate: float
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"feature data must be frames x dims with both >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("feature data contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]


def frame_signal(samples, cfg: DspConfig) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("samples must be a 1-D waveform")
    n = cfg.n_frames(len(x))
    if n < 1:
        raise ValueError(f"signal of {len(x)} samples is shorter than frame_length={cfg.frame_length}")
    idx = np.arange(cfg.frame_length)[None, :] + cfg.frame_shift * np.arange(n)[:, None]
    return x[idx]


@lru_cache(maxsize=8)
def _window(kind: str, length: int) -> np.ndarray:
    if kind == "rect":
        return np.ones(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def stft_magnitude(samples, cfg: DspConfig = DspConfig()) -> FeatureSequence:
    frames = frame_signal(samples, cfg) * _window(cfg.window, cfg.frame_length)
    mag = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1))
    return FeatureSequence(mag, cfg.frame_rate, "stft")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(cfg: DspConfig) -> np.ndarray:
    pts = np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.n_mels + 2)
    return mel_to_hz(pts[1:-1])


@lru_cache(maxsize=8)
def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """n_mels x (n_fft/2+1) matrix of unit-peak triangular filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.clip(np.minimum(rising, falling), 0.0, None)
    empty = fb.sum(axis=1) == 0
    if empty.any():
        # band narrower than one bin: give it the nearest bin
        for b in np.flatnonzero(empty):
            fb[b, np.argmin(np.abs(freqs - mid[b, 0]))] = 1.0
    fb.setflags(write=False)
    return fb


def log_mel(samples, cfg: DspConfig = DspConfig()) -> FeatureSequence:
    power = stft_magnitude(samples, cfg).data ** 2
    energy = power @ mel_filterbank(cfg).T
    return FeatureSequence(np.log(np.maximum(energy, cfg.log_floor)), cfg.frame_rate, "logmel")


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    n = len(feat)
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    denom = 2 * sum(i * i for i in range(1, width + 1))
    out = np.zeros_like(feat)
    for i in range(1, width + 1):
        out += i * (padded[width + i:width + i + n] - padded[width - i:width - i + n])
    return out / denom


def mfcc_from_logmel(logmel: np.ndarray, cfg: DspConfig) -> np.ndarray:
    c = dct(logmel, type=2, norm="ortho", axis=-1)[..., :cfg.n_mfcc]
    if cfg.deltas:
        d1 = deltas(c)
        c = np.concatenate([c, d1, deltas(d1)], axis=1)
    return c


def mfcc(samples, cfg: DspConfig = DspConfig()) -> FeatureSequence:
    lm = log_mel(samples, cfg).data
    return FeatureSequence(mfcc_from_logmel(lm, cfg), cfg.frame_rate, "mfcc")


def mfcc_dims(cfg: DspConfig) -> int:
    return cfg.n_mfcc * (3 if cfg.deltas else 1)
