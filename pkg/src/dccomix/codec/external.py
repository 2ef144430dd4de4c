"""Adapter boundary for a pretrained neural audio codec used as a feature extractor."""

from __future__ import annotations

import math
from typing import Protocol, runtime_checkable

import numpy as np

from dccomix.codec.rvq import CodeMatrix
from dccomix.data.audio import Waveform
from dccomix.errors import ConfigurationError, EnvironmentUnavailableError, InvalidInputError

REMEDIATION = (
    "download a pretrained 24 kHz Encodec checkpoint (e.g. facebook/encodec_24khz) "
    "to a local directory and pass that directory as the codec path; "
    "the adapter never downloads weights and never falls back to the mini codec"
)


@runtime_checkable
class CodecAdapter(Protocol):
    num_codebooks: int
    codebook_size: int
    sample_rate: int
    frame_rate: float

    def encode_samples(self, samples: np.ndarray) -> np.ndarray:
        """float samples [N] -> integer codes [D, T]."""
        ...


class EncodecAdapter:
    """Wraps a ``transformers`` Encodec model.

    Pass either a loaded ``model`` or ``name_or_path`` of a locally available
    checkpoint. ``bandwidth`` selects the number of residual codebooks
    (6 kbps -> 8 codebooks at 75 frames/s).
    """

    def __init__(self, name_or_path: str | None = None, bandwidth: float = 6.0, model=None):
        if model is None:
            if name_or_path is None:
                raise EnvironmentUnavailableError(f"no external codec configured; {REMEDIATION}")
            try:
                from transformers import EncodecModel
            except ImportError as e:  # pragma: no cover - transformers is a declared dependency
                raise EnvironmentUnavailableError(f"transformers is not importable ({e}); {REMEDIATION}") from None
            try:
                model = EncodecModel.from_pretrained(name_or_path, local_files_only=True)
            except Exception as e:
                raise EnvironmentUnavailableError(f"cannot load codec {name_or_path!r}: {e}; {REMEDIATION}") from None
        cfg = model.config
        if bandwidth not in cfg.target_bandwidths:
            raise ConfigurationError(f"bandwidth {bandwidth} not in {cfg.target_bandwidths}")
        self.model = model.eval()
        self.bandwidth = bandwidth
        self.sample_rate = int(cfg.sampling_rate)
        self.frame_rate = float(cfg.frame_rate)
        self.codebook_size = int(cfg.codebook_size)
        self.num_codebooks = int(round(1000 * bandwidth / (cfg.frame_rate * math.log2(cfg.codebook_size))))

    def encode_samples(self, samples: np.ndarray) -> np.ndarray:
        import torch

        x = torch.as_tensor(np.asarray(samples, dtype=np.float32)).view(1, 1, -1)
        with torch.no_grad():
            out = self.model.encode(x, bandwidth=self.bandwidth)
        codes = out.audio_codes  # [chunks, B, D, T]
        return codes[:, 0].permute(1, 0, 2).reshape(codes.shape[2], -1).cpu().numpy().astype(np.int64)


def external_codec_encode(
    w: Waveform,
    adapter: CodecAdapter | None,
    expected_codebooks: int | None = None,
    expected_codebook_size: int | None = None,
) -> CodeMatrix:
    """Encode with an external codec under the same contract as the mini codec."""
    if adapter is None:
        raise EnvironmentUnavailableError(f"external codec adapter is not available; {REMEDIATION}")
    if expected_codebooks is not None and adapter.num_codebooks != expected_codebooks:
        raise ConfigurationError(f"codec has {adapter.num_codebooks} codebooks, config expects {expected_codebooks}")
    if expected_codebook_size is not None and adapter.codebook_size != expected_codebook_size:
        raise ConfigurationError(f"codec codebook size {adapter.codebook_size}, config expects {expected_codebook_size}")
    if w.sample_rate != adapter.sample_rate:
        raise ConfigurationError(f"waveform is {w.sample_rate} Hz, codec expects {adapter.sample_rate} Hz")
    if len(w) < 1:
        raise InvalidInputError("empty waveform")
    idx = adapter.encode_samples(w.samples)
    if idx.shape[0] != adapter.num_codebooks:
        raise ConfigurationError(f"codec returned {idx.shape[0]} codebooks, metadata says {adapter.num_codebooks}")
    return CodeMatrix(idx, adapter.codebook_size, adapter.frame_rate)
