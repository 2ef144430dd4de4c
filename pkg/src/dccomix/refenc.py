"""Reference encoders mapping discrete codes (or spectrograms) to an utterance-level style vector.

``MixerReferenceEncoder`` is the Mixer+GRU encoder: a stack of Mixer blocks
(depthwise time convolution + channel feed-forward, both pre-normalised with
residuals) followed by a single-layer GRU whose final state is the style
embedding. ``GSTReferenceEncoder`` is the strided 2-D CNN + GRU encoder used
for the "without Mixer" ablation.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence

from dccomix.codec.rvq import CodeMatrix
from dccomix.errors import ConfigurationError, InvalidInputError, NumericError

CODE_MODES = ("raw", "embed")


def code_to_channels(codes: CodeMatrix, mode: str = "raw") -> np.ndarray:
    """Raw-mode channel map of a code matrix: index i -> 2 i / (K - 1) - 1, in [-1, 1].

    ``embed`` mode is learned and therefore lives in :class:`CodeFrontend`.
    """
    if mode not in CODE_MODES:
        raise ConfigurationError(f"unknown code input mode {mode!r}")
    if mode == "embed":
        raise ConfigurationError("embed mode needs learned tables; use CodeFrontend")
    K = codes.codebook_size
    if K == 1:
        return np.zeros(codes.indices.shape)
    return 2.0 * codes.indices / (K - 1) - 1.0


class CodeFrontend(nn.Module):
    """Integer codes [B, D, T] -> real channels [B, C, T]."""

    def __init__(self, num_codebooks: int, codebook_size: int, mode: str = "raw", embed_dim: int = 8):
        super().__init__()
        if mode not in CODE_MODES:
            raise ConfigurationError(f"unknown code input mode {mode!r}")
        self.mode = mode
        self.num_codebooks = num_codebooks
        self.codebook_size = codebook_size
        if mode == "embed":
            self.tables = nn.ModuleList(nn.Embedding(codebook_size, embed_dim) for _ in range(num_codebooks))
            self.out_channels = num_codebooks * embed_dim
        else:
            self.out_channels = num_codebooks

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.shape[1] != self.num_codebooks:
            raise InvalidInputError(f"expected {self.num_codebooks} codebooks, got {codes.shape[1]}")
        if self.mode == "raw":
            if self.codebook_size == 1:
                return torch.zeros(codes.shape, dtype=torch.get_default_dtype(), device=codes.device)
            return 2.0 * codes.to(torch.get_default_dtype()) / (self.codebook_size - 1) - 1.0
        emb = [table(codes[:, i]) for i, table in enumerate(self.tables)]  # each [B, T, E]
        return torch.cat(emb, dim=-1).transpose(1, 2)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of [B, C, T] tensors."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class MixerBlock(nn.Module):
    """y = x1 + channel_mix(norm(x1)), x1 = x + time_mix(norm(x)).

    ``time_mix`` is a depthwise Conv1d (one filter per channel, zero padding),
    ``channel_mix`` a two-layer feed-forward with GELU.
    """

    def __init__(self, channels: int, kernel_size: int = 3, expansion: int = 4, dropout: float = 0.1):
        super().__init__()
        self.norm_time = ChannelNorm(channels)
        self.time_mix = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels)
        self.norm_channel = ChannelNorm(channels)
        self.channel_mix = nn.Sequential(
            nn.Linear(channels, channels * expansion),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(channels * expansion, channels),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None:
            mask = torch.ones_like(x[:, :1])
        x = x + self.time_mix(self.norm_time(x) * mask) * mask
        y = self.channel_mix(self.norm_channel(x).transpose(1, 2)).transpose(1, 2)
        return x + y * mask


def mixer_block_forward(x: torch.Tensor, block: MixerBlock) -> torch.Tensor:
    """Apply one block to an unbatched [C, T] or batched [B, C, T] input."""
    squeeze = x.dim() == 2
    y = block(x.unsqueeze(0) if squeeze else x)
    if not torch.isfinite(y).all():
        raise NumericError("non-finite activations in mixer block")
    return y.squeeze(0) if squeeze else y


def sequence_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def _gru_final_state(gru: nn.GRU, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Final GRU state at each sequence's true last step; x is [B, C, T]."""
    packed = pack_padded_sequence(x.transpose(1, 2), lengths.cpu(), batch_first=True, enforce_sorted=False)
    _, h = gru(packed)
    return h[-1]


class MixerReferenceEncoder(nn.Module):
    """Mixer blocks + GRU reference encoder.

    Args:
        in_channels: channels of the input feature map (8 for raw codes).
        hidden: GRU state size, i.e. the style embedding dimension.
        num_blocks: Mixer blocks (6 in the reference configuration).
        mixer_channels: width of the Mixer stack. ``None`` projects the input
            to ``hidden`` with a learned 1x1 map first; ``0`` runs the blocks
            directly at the input width.
    """

    def __init__(
        self,
        in_channels: int,
        hidden: int = 64,
        num_blocks: int = 6,
        kernel_size: int = 3,
        expansion: int = 4,
        dropout: float = 0.1,
        mixer_channels: Optional[int] = None,
    ):
        super().__init__()
        width = hidden if mixer_channels is None else (mixer_channels or in_channels)
        self.in_channels = in_channels
        self.hidden = hidden
        self.width = width
        self.input_projection = nn.Conv1d(in_channels, width, 1) if width != in_channels or mixer_channels is None else None
        self.blocks = nn.ModuleList(MixerBlock(width, kernel_size, expansion, dropout) for _ in range(num_blocks))
        self.gru = nn.GRU(width, hidden, batch_first=True)

    def forward(self, x: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        """[B, C, T] features -> [B, hidden] style embeddings."""
        if x.shape[-1] == 0:
            raise InvalidInputError("reference has zero frames")
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[-1], dtype=torch.long, device=x.device)
        if int(lengths.min()) < 1:
            raise InvalidInputError("reference has zero frames")
        mask = sequence_mask(lengths, x.shape[-1]).unsqueeze(1).to(x.dtype)
        x = x * mask
        if self.input_projection is not None:
            x = self.input_projection(x) * mask
        for i, block in enumerate(self.blocks):
            x = block(x, mask)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after mixer block {i}")
        return _gru_final_state(self.gru, x, lengths)


class GSTReferenceEncoder(nn.Module):
    """Strided 2-D convolutions over (time, channel) followed by a GRU.

    Each conv layer halves both axes (kernel 3, stride 2, padding 1) and is
    followed by batch norm and ReLU.
    """

    def __init__(
        self,
        in_channels: int,
        hidden: int = 64,
        filters: tuple[int, ...] = (32, 32, 64, 64, 128, 128),
        kernel_size: int = 3,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.num_layers = len(filters)
        layers = []
        prev = 1
        for f in filters:
            layers += [
                nn.Conv2d(prev, f, kernel_size, stride=2, padding=kernel_size // 2),
                nn.BatchNorm2d(f),
                nn.ReLU(),
            ]
            prev = f
        self.convs = nn.Sequential(*layers)
        freq = in_channels
        for _ in filters:
            freq = (freq + 1) // 2
        self.gru = nn.GRU(filters[-1] * freq, hidden, batch_first=True)

    @property
    def min_frames(self) -> int:
        return 2 ** self.num_layers

    def reduced_length(self, lengths: torch.Tensor) -> torch.Tensor:
        for _ in range(self.num_layers):
            lengths = torch.div(lengths + 1, 2, rounding_mode="floor")
        return lengths

    def forward(self, x: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, C, T = x.shape
        if lengths is None:
            lengths = torch.full((B,), T, dtype=torch.long, device=x.device)
        if int(lengths.min()) < self.min_frames:
            raise InvalidInputError(f"reference shorter than the total conv stride ({self.min_frames} frames)")
        mask = sequence_mask(lengths, T).unsqueeze(1).to(x.dtype)
        h = self.convs((x * mask).transpose(1, 2).unsqueeze(1))  # [B, F, T', C']
        h = h.permute(0, 2, 1, 3).reshape(B, h.shape[2], -1)  # [B, T', F * C']
        return _gru_final_state(self.gru, h.transpose(1, 2), self.reduced_length(lengths))


class StyleEncoder(nn.Module):
    """Input front-end plus reference encoder.

    ``input_kind`` is ``"codes"`` (integer code matrices through a
    :class:`CodeFrontend`) or ``"spectrogram"`` (real feature maps used as is).
    """

    def __init__(self, encoder: nn.Module, frontend: Optional[CodeFrontend] = None):
        super().__init__()
        self.frontend = frontend
        self.encoder = encoder

    @property
    def input_kind(self) -> str:
        return "codes" if self.frontend is not None else "spectrogram"

    @property
    def hidden(self) -> int:
        return self.encoder.hidden

    def forward(self, ref: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.frontend(ref) if self.frontend is not None else ref
        return self.encoder(x.to(self.encoder.gru.weight_ih_l0.dtype), lengths)


def build_style_encoder(
    kind: str,
    hidden: int,
    num_codebooks: int = 8,
    codebook_size: int = 64,
    code_mode: str = "raw",
    code_embed_dim: int = 8,
    spec_channels: int = 513,
    input_kind: str = "codes",
    num_blocks: int = 6,
    kernel_size: int = 3,
    expansion: int = 4,
    dropout: float = 0.1,
    mixer_channels: Optional[int] = None,
    gst_filters: tuple[int, ...] = (32, 32, 64, 64, 128, 128),
) -> StyleEncoder:
    """``kind`` is ``"mixer"`` or ``"gst"``; ``input_kind`` is ``"codes"`` or ``"spectrogram"``."""
    if input_kind == "codes":
        frontend = CodeFrontend(num_codebooks, codebook_size, code_mode, code_embed_dim)
        in_ch = frontend.out_channels
    elif input_kind == "spectrogram":
        frontend, in_ch = None, spec_channels
    else:
        raise ConfigurationError(f"unknown reference input kind {input_kind!r}")
    if kind == "mixer":
        enc = MixerReferenceEncoder(in_ch, hidden, num_blocks, kernel_size, expansion, dropout, mixer_channels)
    elif kind == "gst":
        enc = GSTReferenceEncoder(in_ch, hidden, tuple(gst_filters), kernel_size)
    else:
        raise ConfigurationError(f"unknown reference encoder {kind!r}")
    return StyleEncoder(enc, frontend)


@torch.no_grad()
def encode_style(codes: CodeMatrix, encoder: StyleEncoder) -> np.ndarray:
    """Utterance-level style embedding of one code matrix (evaluation mode)."""
    if codes.num_frames < 1:
        raise InvalidInputError("code matrix has zero frames")
    was_training = encoder.training
    encoder.eval()
    try:
        ref = torch.from_numpy(np.array(codes.indices)).unsqueeze(0)
        s = encoder(ref)
    finally:
        encoder.train(was_training)
    return s[0].detach().cpu().numpy()


def gst_reference_encoder(features: np.ndarray | torch.Tensor, encoder: StyleEncoder) -> np.ndarray:
    """Style embedding of a real C x T feature map through a (GST) spectrogram encoder."""
    x = torch.as_tensor(np.asarray(features), dtype=torch.get_default_dtype()).unsqueeze(0)
    if not torch.isfinite(x).all():
        raise InvalidInputError("features contain non-finite values")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            s = encoder.encoder(x)
    finally:
        encoder.train(was_training)
    return s[0].cpu().numpy()
