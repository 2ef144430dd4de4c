"""Waveform container, 16-bit PCM I/O and resampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from dccomix.errors import InvalidInputError

SAMPLE_RATE = 24000


@dataclass(frozen=True)
class Waveform:
    """Mono audio with amplitudes in [-1, 1].

    ``samples`` is stored as a read-only float64 array.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidInputError(f"waveform must be 1-D, got shape {x.shape}")
        if x.size < 1:
            raise InvalidInputError("waveform is empty")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("waveform contains non-finite samples")
        if np.max(np.abs(x)) > 1.0:
            raise InvalidInputError("waveform amplitude exceeds 1; peak-normalize first")
        if int(self.sample_rate) <= 0:
            raise InvalidInputError(f"invalid sample rate {self.sample_rate}")
        x = x.copy()
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @classmethod
    def from_array(cls, samples, sample_rate: int = SAMPLE_RATE, normalize: bool = False) -> "Waveform":
        x = np.asarray(samples, dtype=np.float64)
        if normalize:
            x = peak_normalize(x)
        return cls(x, sample_rate)

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def peak_normalize(x: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Scale so that max |x| equals ``peak``; silent or already-quiet input is left alone."""
    x = np.asarray(x, dtype=np.float64)
    m = float(np.max(np.abs(x))) if x.size else 0.0
    if m > peak:
        return x * (peak / m)
    return x


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Windowed-sinc polyphase resampling (Kaiser window)."""
    if w.sample_rate == target_rate:
        return w
    g = math.gcd(w.sample_rate, target_rate)
    up, down = target_rate // g, w.sample_rate // g
    y = resample_poly(w.samples, up, down, window=("kaiser", 5.0))
    expected = math.ceil(len(w) * up / down)
    y = y[:expected]
    return Waveform(np.clip(y, -1.0, 1.0), target_rate)


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = np.clip(data.astype(np.float64), -1.0, 1.0)
    return Waveform(x, rate)


def to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * 32767.0), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write 16-bit PCM mono."""
    wavfile.write(str(path), w.sample_rate, to_pcm16(w.samples))
