"""MFCC + delta + delta-delta at a 20 ms hop, aligned 1:1 with encoder frames."""

from __future__ import annotations

import numpy as np
from scipy.fft import dct

from .corpus import HOP, SAMPLE_RATE
from .errors import LengthError

WIN = 400  # 25 ms
N_FFT = 512
N_MELS = 26
N_CEPS = 13
DELTA_WIDTH = 2
LOG_FLOOR = 1e-10


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m : m + 3]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FB = mel_filterbank()
_WINDOW = np.hanning(WIN)


def deltas(x: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Regression deltas along time with edge replication."""
    T = x.shape[0]
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    num = sum(n * (padded[width + n : width + n + T] - padded[width - n : width - n + T]) for n in range(1, width + 1))
    return num / (2 * sum(n * n for n in range(1, width + 1)))


def mfcc(samples: np.ndarray) -> np.ndarray:
    """``(floor(n / 320), 39)`` float32 matrix: 13 cepstra, their deltas and delta-deltas."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < WIN:
        raise LengthError(f"mfcc needs at least {WIN} samples, got {x.shape[0]}")
    T = x.shape[0] // HOP
    # frames start at 320 t; the last window may run past the end, so zero-pad
    need = (T - 1) * HOP + WIN
    if need > x.shape[0]:
        x = np.pad(x, (0, need - x.shape[0]))
    idx = np.arange(T)[:, None] * HOP + np.arange(WIN)[None, :]
    frames = x[idx] * _WINDOW
    power = np.abs(np.fft.rfft(frames, n=N_FFT)) ** 2 / N_FFT
    logmel = np.log(np.maximum(power @ _FB.T, LOG_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :N_CEPS]
    d1 = deltas(ceps)
    d2 = deltas(d1)
    return np.concatenate([ceps, d1, d2], axis=1).astype(np.float32)
