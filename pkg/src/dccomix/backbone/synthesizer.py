"""End-to-end synthesizer with speaker + style global conditioning.

The condition is ``g = concat(speaker_embedding, style_embedding)`` (speaker
first). It is fed to the posterior encoder, every flow coupling layer, the
duration predictor and the decoder.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from dccomix.backbone import commons
from dccomix.backbone.alignment import maximum_path
from dccomix.backbone.discriminator import MultiPeriodDiscriminator
from dccomix.backbone.losses import kl_loss, masked_l1
from dccomix.backbone.models import (
    Generator,
    PosteriorEncoder,
    ResidualCouplingBlock,
    StochasticDurationPredictor,
    TextEncoder,
)
from dccomix.codec.rvq import CodeMatrix
from dccomix.config import ModelConfig
from dccomix.data.audio import Waveform
from dccomix.data.spectrogram import linear_spectrogram, log_mel_spectrogram
from dccomix.errors import ConfigurationError, InvalidInputError, NumericError
from dccomix.refenc import StyleEncoder, build_style_encoder

SCOPES = ("whole", "refenc", "by_submodule")


class Synthesizer(nn.Module):
    """Text encoder, posterior encoder, flow, duration predictor, decoder, speaker table and
    reference encoder (plus discriminators when enabled).

    Args:
        cfg: model hyper-parameters; ``cfg.speakers`` fixes the speaker table rows.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.hop_length = cfg.hop_length
        self.speakers = list(cfg.speakers)
        self._speaker_index = {s: i for i, s in enumerate(self.speakers)}
        gin = cfg.speaker_dim + cfg.style_dim
        self.gin_channels = gin

        self.enc_p = TextEncoder(
            cfg.vocab_size, cfg.inter_channels, cfg.hidden_channels, cfg.filter_channels,
            cfg.n_heads, cfg.text_layers, cfg.text_kernel, cfg.p_dropout,
        )
        self.enc_q = PosteriorEncoder(
            cfg.spec_channels, cfg.inter_channels, cfg.hidden_channels,
            cfg.posterior_kernel, 1, cfg.posterior_layers, gin_channels=gin,
        )
        self.flow = ResidualCouplingBlock(
            cfg.inter_channels, cfg.hidden_channels, cfg.flow_kernel, 1, cfg.flow_layers,
            n_flows=cfg.flow_steps, gin_channels=gin,
        )
        self.dp = StochasticDurationPredictor(
            cfg.hidden_channels, cfg.sdp_filter, cfg.sdp_kernel, cfg.sdp_dropout,
            n_flows=cfg.sdp_flows, gin_channels=gin,
        )
        self.dec = Generator(
            cfg.inter_channels, cfg.resblock, cfg.resblock_kernels, cfg.resblock_dilations,
            cfg.upsample_rates, cfg.upsample_initial, cfg.upsample_kernels, gin_channels=gin,
        )
        self.emb_g = nn.Embedding(len(self.speakers), cfg.speaker_dim)
        self.refenc: StyleEncoder = build_style_encoder(
            cfg.refenc_kind,
            cfg.style_dim,
            num_codebooks=cfg.num_codebooks,
            codebook_size=cfg.codebook_size,
            code_mode=cfg.code_mode,
            code_embed_dim=cfg.code_embed_dim,
            spec_channels=cfg.spec_channels,
            input_kind=cfg.ref_input,
            num_blocks=cfg.refenc_blocks,
            kernel_size=cfg.refenc_kernel,
            expansion=cfg.refenc_expansion,
            dropout=cfg.refenc_dropout,
            mixer_channels=cfg.mixer_channels,
            gst_filters=tuple(cfg.gst_filters),
        )
        self.disc = MultiPeriodDiscriminator() if cfg.use_discriminator else None

    # -- conditioning --------------------------------------------------------

    def speaker_index(self, speaker_id: str) -> int:
        try:
            return self._speaker_index[speaker_id]
        except KeyError:
            raise InvalidInputError(f"unknown speaker {speaker_id!r}") from None

    def speaker_indices(self, speaker_ids) -> torch.Tensor:
        return torch.tensor([self.speaker_index(s) for s in speaker_ids], dtype=torch.long)

    def style(self, ref: torch.Tensor, ref_lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.refenc(ref, ref_lengths)

    def condition(self, speakers: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        """[B] speaker rows + [B, h] style -> [B, speaker_dim + h], speaker first."""
        if style.shape[-1] != self.cfg.style_dim:
            raise InvalidInputError(f"style has {style.shape[-1]} channels, expected {self.cfg.style_dim}")
        return torch.cat([self.emb_g(speakers), style.to(self.emb_g.weight.dtype)], dim=-1)

    def generator_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("disc.")]

    # -- training ------------------------------------------------------------

    def train_forward(self, batch: dict, segment_frames: int, generator: Optional[torch.Generator] = None) -> dict:
        """Loss terms for one batch (see :func:`train_forward`)."""
        spec, spec_lengths = batch["spec"], batch["spec_lengths"]
        wav = batch["wav"]
        if wav.shape[-1] != spec.shape[-1] * self.hop_length:
            raise InvalidInputError(
                f"waveform has {wav.shape[-1]} samples, spectrogram implies {spec.shape[-1] * self.hop_length}"
            )
        tokens, token_lengths = batch["tokens"], batch["token_lengths"]
        if int((spec_lengths < token_lengths).sum()):
            raise InvalidInputError("an utterance has fewer frames than tokens")

        s = self.style(batch["ref"], batch.get("ref_lengths"))
        g = self.condition(batch["speakers"], s)

        x, m_p, logs_p, x_mask = self.enc_p(tokens, token_lengths)
        z, m_q, logs_q, y_mask, eps = self.enc_q(spec, spec_lengths, g=g)
        z_p = self.flow(z, y_mask, g=g)

        with torch.no_grad():
            s_p_sq_r = torch.exp(-2 * logs_p)
            neg_cent1 = torch.sum(-0.5 * math.log(2 * math.pi) - logs_p, [1], keepdim=True)
            neg_cent2 = torch.matmul(-0.5 * (z_p ** 2).transpose(1, 2), s_p_sq_r)
            neg_cent3 = torch.matmul(z_p.transpose(1, 2), m_p * s_p_sq_r)
            neg_cent4 = torch.sum(-0.5 * (m_p ** 2) * s_p_sq_r, [1], keepdim=True)
            neg_cent = neg_cent1 + neg_cent2 + neg_cent3 + neg_cent4
            attn_mask = x_mask.unsqueeze(2) * y_mask.unsqueeze(-1)  # [b, 1, t_y, t_x]
            attn = maximum_path(neg_cent, attn_mask.squeeze(1)).unsqueeze(1).detach()

        w = attn.sum(2)
        l_length = self.dp(x, x_mask, w, g=g, generator=generator)
        l_dur = torch.sum(l_length / torch.sum(x_mask))

        m_p_y = torch.matmul(attn.squeeze(1), m_p.transpose(1, 2)).transpose(1, 2)
        logs_p_y = torch.matmul(attn.squeeze(1), logs_p.transpose(1, 2)).transpose(1, 2)
        l_kl = kl_loss(z_p, logs_q, m_p_y, logs_p_y, y_mask, eps=eps)

        z_slice, ids_slice = commons.rand_slice_segments(z, spec_lengths, segment_frames, generator=generator)
        y_hat = self.dec(z_slice, g=g)
        hop = self.hop_length
        y = commons.slice_segments(wav, ids_slice * hop, segment_frames * hop)
        seg_mask = commons.sequence_mask(
            torch.clamp(spec_lengths - ids_slice, 0, segment_frames), segment_frames
        ).unsqueeze(1).to(y_hat.dtype)
        mel_hat = log_mel_spectrogram(y_hat.squeeze(1))
        mel = log_mel_spectrogram(y.squeeze(1))
        l_mel = masked_l1(mel_hat, mel, seg_mask)

        return {
            "mel": l_mel,
            "kl": l_kl,
            "dur": l_dur,
            "y_hat": y_hat,
            "y": y,
            "attn": attn,
            "ids_slice": ids_slice,
        }

    # -- inference -----------------------------------------------------------

    @torch.no_grad()
    def infer(
        self,
        tokens: torch.Tensor,
        token_lengths: torch.Tensor,
        g: torch.Tensor,
        noise_scale: float = 0.667,
        noise_scale_w: float = 0.8,
        length_scale: float = 1.0,
        generator: Optional[torch.Generator] = None,
    ):
        """Returns (waveform [B, 1, N], y_lengths [B]) with N = hop * max(y_lengths)."""
        x, m_p, logs_p, x_mask = self.enc_p(tokens, token_lengths)
        logw = self.dp(x, x_mask, g=g, reverse=True, noise_scale=noise_scale_w, generator=generator)
        w_ceil = torch.ceil(torch.exp(logw) * x_mask * length_scale)
        y_lengths = torch.clamp_min(torch.sum(w_ceil, [1, 2]), 1).long()
        y_mask = commons.sequence_mask(y_lengths, int(y_lengths.max())).unsqueeze(1).to(x_mask.dtype)
        attn_mask = x_mask.unsqueeze(2) * y_mask.unsqueeze(-1)
        attn = commons.generate_path(w_ceil, attn_mask)
        m_p = torch.matmul(attn.squeeze(1), m_p.transpose(1, 2)).transpose(1, 2)
        logs_p = torch.matmul(attn.squeeze(1), logs_p.transpose(1, 2)).transpose(1, 2)
        eps = torch.randn(m_p.shape, generator=generator, dtype=m_p.dtype)
        z_p = m_p + eps * torch.exp(logs_p) * noise_scale
        z = self.flow(z_p, y_mask, g=g, reverse=True)
        o = self.dec(z * y_mask, g=g)
        return o, y_lengths

    def reconstruct(self, spec: torch.Tensor, spec_lengths: torch.Tensor, g: torch.Tensor, noise_scale: float = 0.0):
        """Posterior -> decoder reconstruction (no text path); noise 0 uses the posterior mean."""
        noise = torch.zeros(spec.shape[0], self.cfg.inter_channels, spec.shape[-1], dtype=spec.dtype)
        if noise_scale:
            noise = torch.randn_like(noise) * noise_scale
        z, *_ = self.enc_q(spec, spec_lengths, g=g, noise=noise)
        return self.dec(z, g=g)


# -- functional API ----------------------------------------------------------


def build_condition(speaker_id: str, style, model: Synthesizer) -> torch.Tensor:
    """Condition vector for one utterance: concat(speaker embedding, style) of length speaker_dim + h."""
    idx = torch.tensor([model.speaker_index(speaker_id)])
    style = torch.as_tensor(np.asarray(style) if not torch.is_tensor(style) else style, dtype=model.emb_g.weight.dtype)
    if style.dim() != 1:
        raise InvalidInputError("style must be a vector")
    g = model.condition(idx, style.unsqueeze(0))[0]
    if not torch.isfinite(g).all():
        raise InvalidInputError("condition contains non-finite values")
    return g


def train_forward(model: Synthesizer, batch: dict, segment_frames: int = 32, generator=None) -> dict:
    """Loss bundle {mel, kl, dur} (+ tensors used by the adversarial step)."""
    return model.train_forward(batch, segment_frames, generator)


def flow_roundtrip(z: torch.Tensor, condition: torch.Tensor, model: Synthesizer, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """inverse(forward(z)) for latents z [B, C, T] under condition [B, G]."""
    if not torch.isfinite(z).all():
        raise InvalidInputError("latent contains non-finite values")
    if mask is None:
        mask = torch.ones_like(z[:, :1])
    zp = model.flow(z, mask, g=condition)
    out = model.flow(zp, mask, g=condition, reverse=True)
    if not torch.isfinite(out).all():
        raise NumericError("flow produced non-finite values")
    return out


def count_parameters(model: nn.Module, scope: str = "whole"):
    """Trainable scalar count: ``whole`` (int), ``refenc`` (int) or ``by_submodule`` (name -> int)."""
    if scope not in SCOPES:
        raise ConfigurationError(f"unknown parameter scope {scope!r}; expected one of {SCOPES}")

    def n(m):
        return sum(p.numel() for p in m.parameters() if p.requires_grad)

    if scope == "whole":
        return n(model)
    if scope == "refenc":
        if not hasattr(model, "refenc"):
            raise ConfigurationError("model has no reference encoder")
        return n(model.refenc)
    return {name: n(child) for name, child in model.named_children()}


def reference_tensor(reference, model: Synthesizer, codec=None) -> torch.Tensor:
    """Reference (Waveform, CodeMatrix or C x T array) -> [1, C, T] encoder input."""
    if model.refenc.input_kind == "codes":
        if isinstance(reference, Waveform):
            if codec is None:
                raise ConfigurationError("a codec is needed to turn a reference waveform into codes")
            from dccomix.codec.external import external_codec_encode

            if hasattr(codec, "encode") and hasattr(codec, "codebooks"):
                reference = codec.encode(reference)
            else:
                reference = external_codec_encode(reference, codec, model.cfg.num_codebooks, model.cfg.codebook_size)
        if not isinstance(reference, CodeMatrix):
            raise InvalidInputError("code-input reference encoder needs a Waveform or CodeMatrix reference")
        if reference.codebook_size != model.cfg.codebook_size or reference.num_codebooks != model.cfg.num_codebooks:
            raise ConfigurationError(
                f"reference codes are {reference.num_codebooks}x(K={reference.codebook_size}), "
                f"model expects {model.cfg.num_codebooks}x(K={model.cfg.codebook_size})"
            )
        return torch.from_numpy(np.array(reference.indices)).unsqueeze(0)
    if isinstance(reference, Waveform):
        reference = linear_spectrogram(reference)
    if isinstance(reference, CodeMatrix):
        raise InvalidInputError("spectrogram-input reference encoder cannot take codes")
    return torch.as_tensor(np.asarray(reference), dtype=model.emb_g.weight.dtype).unsqueeze(0)


@torch.no_grad()
def synthesize(
    tokens,
    speaker_id: str,
    reference,
    model: Synthesizer,
    codec=None,
    noise_scale: float = 0.667,
    noise_scale_w: float = 0.8,
    length_scale: float = 1.0,
    seed: int = 0,
    style_override: Optional[torch.Tensor] = None,
) -> Waveform:
    """Speech for ``tokens`` in ``speaker_id``'s voice with the prosody of ``reference``.

    Output length is exactly hop * (sum of predicted durations). With both
    noise scales at 0 the result does not depend on ``seed``.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long).view(1, -1)
    if tokens.shape[1] == 0:
        raise InvalidInputError("empty token sequence")
    spk = torch.tensor([model.speaker_index(speaker_id)])
    was_training = model.training
    model.eval()
    try:
        style = model.style(reference_tensor(reference, model, codec)) if style_override is None else style_override.view(1, -1)
        g = model.condition(spk, style)
        gen = torch.Generator().manual_seed(seed)
        o, y_lengths = model.infer(
            tokens, torch.tensor([tokens.shape[1]]), g, noise_scale, noise_scale_w, length_scale, generator=gen
        )
    finally:
        model.train(was_training)
    n = int(y_lengths[0]) * model.hop_length
    y = o[0, 0, :n].double().numpy()
    if not np.isfinite(y).all():
        raise NumericError("synthesized waveform is not finite")
    return Waveform(np.clip(y, -1.0, 1.0), model.cfg.sample_rate)
