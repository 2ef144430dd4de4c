"""STFT front-end shared by the posterior encoder, the losses and evaluation.

Framing convention: frame ``t`` is centred on sample ``t * hop``; the signal is
reflect-padded by ``n_fft // 2`` on both sides (zero-padded when it is too
short to reflect) and exactly ``ceil(num_samples / hop)`` frames are kept.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F

from dccomix.data.audio import SAMPLE_RATE, Waveform

N_FFT = 1024
WIN_LENGTH = 1024
HOP_LENGTH = 256
N_MELS = 80
LOG_FLOOR = 1e-5


def num_frames(num_samples: int, hop: int = HOP_LENGTH) -> int:
    return math.ceil(num_samples / hop)


def stft_magnitude(
    y: torch.Tensor,
    n_fft: int = N_FFT,
    hop: int = HOP_LENGTH,
    win_length: int = WIN_LENGTH,
) -> torch.Tensor:
    """Magnitude STFT of ``y`` [B, N] (or [N]) -> [B, n_fft // 2 + 1, ceil(N / hop)]."""
    squeeze = y.dim() == 1
    if squeeze:
        y = y.unsqueeze(0)
    n = y.shape[-1]
    pad = n_fft // 2
    mode = "reflect" if n > pad else "constant"
    y = F.pad(y.unsqueeze(1), (pad, pad), mode=mode).squeeze(1)
    window = torch.hann_window(win_length, dtype=y.dtype, device=y.device)
    spec = torch.stft(
        y,
        n_fft,
        hop_length=hop,
        win_length=win_length,
        window=window,
        center=False,
        return_complex=True,
    )
    mag = torch.sqrt(spec.real.pow(2) + spec.imag.pow(2) + 1e-9)
    mag = mag[..., : num_frames(n, hop)]
    return mag.squeeze(0) if squeeze else mag


def linear_spectrogram(w: Waveform) -> np.ndarray:
    """513 x ceil(len / 256) magnitude spectrogram of a waveform."""
    y = torch.from_numpy(np.asarray(w.samples, dtype=np.float32))
    return stft_magnitude(y).numpy()


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, f / f_sp)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def mel_filterbank(
    sample_rate: int = SAMPLE_RATE,
    n_fft: int = N_FFT,
    n_mels: int = N_MELS,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular Slaney-normalised mel filters, shape [n_mels, n_fft // 2 + 1]."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (hz_pts[2:] - hz_pts[:-2])
    weights *= enorm[:, None]
    weights.setflags(write=False)
    return weights


def linear_to_log_mel(spec: torch.Tensor, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS) -> torch.Tensor:
    """Natural-log mel spectrogram from a magnitude spectrogram [..., F, T]."""
    n_fft = (spec.shape[-2] - 1) * 2
    fb = torch.from_numpy(np.array(mel_filterbank(sample_rate, n_fft, n_mels))).to(spec)
    mel = torch.matmul(fb, spec)
    return torch.log(torch.clamp(mel, min=LOG_FLOOR))


def log_mel_spectrogram(y: torch.Tensor, sample_rate: int = SAMPLE_RATE) -> torch.Tensor:
    return linear_to_log_mel(stft_magnitude(y), sample_rate)
