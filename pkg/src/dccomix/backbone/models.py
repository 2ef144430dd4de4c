"""Synthesizer submodules: text encoder, posterior encoder, flow, stochastic
duration predictor and waveform decoder.

The global condition ``g`` ([B, G]) is concatenated to the input of the
posterior encoder, of every coupling layer, of the duration predictor and of
the decoder, then projected back to the module width by that module's first
layer. The text encoder is unconditioned.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from dccomix.backbone import modules
from dccomix.backbone.commons import cat_condition, sequence_mask
from dccomix.refenc import ChannelNorm


class TextEncoder(nn.Module):
    """Token embeddings + post-norm self-attention/convolution blocks -> prior stats.

    Args:
        n_vocab: token inventory size.
        out_channels: latent size of the prior (mean and log-std each).
        hidden_channels: model width.
        filter_channels: feed-forward width.
        n_heads: attention heads.
        n_layers: number of attention blocks.
        kernel_size: feed-forward convolution kernel.
        p_dropout: dropout rate.
    """

    def __init__(self, n_vocab, out_channels, hidden_channels, filter_channels, n_heads, n_layers, kernel_size, p_dropout):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.out_channels = out_channels
        self.emb = nn.Embedding(n_vocab, hidden_channels)
        nn.init.normal_(self.emb.weight, 0.0, hidden_channels ** -0.5)
        self.attn = nn.ModuleList()
        self.norm_1 = nn.ModuleList()
        self.ffn_1 = nn.ModuleList()
        self.ffn_2 = nn.ModuleList()
        self.norm_2 = nn.ModuleList()
        for _ in range(n_layers):
            self.attn.append(nn.MultiheadAttention(hidden_channels, n_heads, dropout=p_dropout, batch_first=True))
            self.norm_1.append(ChannelNorm(hidden_channels))
            self.ffn_1.append(nn.Conv1d(hidden_channels, filter_channels, kernel_size, padding=kernel_size // 2))
            self.ffn_2.append(nn.Conv1d(filter_channels, hidden_channels, kernel_size, padding=kernel_size // 2))
            self.norm_2.append(ChannelNorm(hidden_channels))
        self.drop = nn.Dropout(p_dropout)
        self.proj = nn.Conv1d(hidden_channels, out_channels * 2, 1)

    def forward(self, tokens: torch.Tensor, lengths: torch.Tensor):
        x = self.emb(tokens) * math.sqrt(self.hidden_channels)  # [b, t, h]
        x = x.transpose(1, 2)
        x_mask = sequence_mask(lengths, x.size(2)).unsqueeze(1).to(x.dtype)
        pad = x_mask[:, 0] == 0
        for i in range(len(self.attn)):
            x = x * x_mask
            q = x.transpose(1, 2)
            y, _ = self.attn[i](q, q, q, key_padding_mask=pad, need_weights=False)
            x = self.norm_1[i](x + self.drop(y.transpose(1, 2)))
            y = self.ffn_1[i](x * x_mask)
            y = self.ffn_2[i](self.drop(torch.relu(y)) * x_mask) * x_mask
            x = self.norm_2[i](x + self.drop(y))
        x = x * x_mask
        stats = self.proj(x) * x_mask
        m, logs = torch.split(stats, self.out_channels, dim=1)
        return x, m, logs, x_mask


class PosteriorEncoder(nn.Module):
    """Linear spectrogram (+ g) -> posterior latent z, its mean and log-std."""

    def __init__(self, in_channels, out_channels, hidden_channels, kernel_size, dilation_rate, n_layers, gin_channels=0):
        super().__init__()
        self.out_channels = out_channels
        self.pre = nn.Conv1d(in_channels + gin_channels, hidden_channels, 1)
        self.enc = modules.WN(hidden_channels, kernel_size, dilation_rate, n_layers)
        self.proj = nn.Conv1d(hidden_channels, out_channels * 2, 1)

    def forward(self, x, x_lengths, g=None, noise: Optional[torch.Tensor] = None):
        """Returns (z, m, logs, x_mask, eps) with z = m + eps * exp(logs) on valid frames."""
        x_mask = sequence_mask(x_lengths, x.size(2)).unsqueeze(1).to(x.dtype)
        h = self.pre(cat_condition(x, g)) * x_mask
        h = self.enc(h, x_mask)
        stats = self.proj(h) * x_mask
        m, logs = torch.split(stats, self.out_channels, dim=1)
        eps = torch.randn_like(m) if noise is None else noise
        eps = eps * x_mask
        z = (m + eps * torch.exp(logs)) * x_mask
        return z, m, logs, x_mask, eps


class ResidualCouplingBlock(nn.Module):
    """Stack of (coupling, flip) pairs; volume preserving."""

    def __init__(self, channels, hidden_channels, kernel_size, dilation_rate, n_layers, n_flows=4, gin_channels=0):
        super().__init__()
        self.flows = nn.ModuleList()
        for _ in range(n_flows):
            self.flows.append(
                modules.ResidualCouplingLayer(channels, hidden_channels, kernel_size, dilation_rate, n_layers, gin_channels=gin_channels)
            )
            self.flows.append(modules.Flip())

    def forward(self, x, x_mask, g=None, reverse=False):
        if not reverse:
            for flow in self.flows:
                x, _ = flow(x, x_mask, g=g, reverse=False)
        else:
            for flow in reversed(self.flows):
                x = flow(x, x_mask, g=g, reverse=True)
        return x


class StochasticDurationPredictor(nn.Module):
    """Flow-based duration model.

    Forward returns a per-item variational bound on -log p(w); reverse samples
    log-durations. ``noise`` replaces the internal Gaussian draws (used for
    gradient checks and reproducible runs).
    """

    def __init__(self, in_channels, filter_channels, kernel_size, p_dropout, n_flows=4, gin_channels=0):
        super().__init__()
        self.log_flow = modules.Log()
        self.flows = nn.ModuleList([modules.ElementwiseAffine(2)])
        for _ in range(n_flows):
            self.flows.append(modules.ConvFlow(2, filter_channels, kernel_size, n_layers=3))
            self.flows.append(modules.Flip())

        self.post_pre = nn.Conv1d(1, filter_channels, 1)
        self.post_proj = nn.Conv1d(filter_channels, filter_channels, 1)
        self.post_convs = modules.DDSConv(filter_channels, kernel_size, n_layers=3, p_dropout=p_dropout)
        self.post_flows = nn.ModuleList([modules.ElementwiseAffine(2)])
        for _ in range(4):
            self.post_flows.append(modules.ConvFlow(2, filter_channels, kernel_size, n_layers=3))
            self.post_flows.append(modules.Flip())

        self.pre = nn.Conv1d(in_channels + gin_channels, filter_channels, 1)
        self.proj = nn.Conv1d(filter_channels, filter_channels, 1)
        self.convs = modules.DDSConv(filter_channels, kernel_size, n_layers=3, p_dropout=p_dropout)

    def forward(self, x, x_mask, w=None, g=None, reverse=False, noise_scale=1.0, noise=None, generator=None):
        # text states are detached so the duration loss does not shape the text encoder
        x = self.pre(cat_condition(torch.detach(x), g))
        x = self.convs(x, x_mask)
        x = self.proj(x) * x_mask

        shape = (x.size(0), 2, x.size(2))
        if noise is None:
            noise = torch.randn(shape, generator=generator, dtype=x.dtype)
        if not reverse:
            h_w = self.post_pre(w)
            h_w = self.post_convs(h_w, x_mask)
            h_w = self.post_proj(h_w) * x_mask
            e_q = noise * x_mask
            z_q = e_q
            logdet_tot_q = 0.0
            for flow in self.post_flows:
                z_q, logdet_q = flow(z_q, x_mask, g=(x + h_w))
                logdet_tot_q = logdet_tot_q + logdet_q
            z_u, z1 = torch.split(z_q, [1, 1], 1)
            u = torch.sigmoid(z_u) * x_mask
            z0 = (w - u) * x_mask
            logdet_tot_q = logdet_tot_q + torch.sum((F.logsigmoid(z_u) + F.logsigmoid(-z_u)) * x_mask, [1, 2])
            logq = torch.sum(-0.5 * (math.log(2 * math.pi) + e_q ** 2) * x_mask, [1, 2]) - logdet_tot_q

            z0, logdet_tot = self.log_flow(z0, x_mask)
            z = torch.cat([z0, z1], 1)
            for flow in self.flows:
                z, logdet = flow(z, x_mask, g=x, reverse=False)
                logdet_tot = logdet_tot + logdet
            nll = torch.sum(0.5 * (math.log(2 * math.pi) + z ** 2) * x_mask, [1, 2]) - logdet_tot
            return nll + logq

        flows = list(reversed(self.flows))
        flows = flows[:-2] + [flows[-1]]  # the first affine+flip pair only shapes the unused z1 channel
        z = noise * noise_scale
        for flow in flows:
            z = flow(z, x_mask, g=x, reverse=True)
        logw, _ = torch.split(z, [1, 1], 1)
        return logw


class Generator(nn.Module):
    """HiFi-GAN style upsampling decoder; total upsampling = prod(upsample_rates)."""

    def __init__(
        self,
        initial_channel: int,
        resblock: str,
        resblock_kernel_sizes: Sequence[int],
        resblock_dilation_sizes: Sequence[Sequence[int]],
        upsample_rates: Sequence[int],
        upsample_initial_channel: int,
        upsample_kernel_sizes: Sequence[int],
        gin_channels: int = 0,
    ):
        super().__init__()
        self.num_kernels = len(resblock_kernel_sizes)
        self.conv_pre = nn.Conv1d(initial_channel + gin_channels, upsample_initial_channel, 7, 1, padding=3)
        block = modules.ResBlock1 if str(resblock) == "1" else modules.ResBlock2
        self.ups = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        ch = upsample_initial_channel
        for u, k in zip(upsample_rates, upsample_kernel_sizes):
            self.ups.append(nn.ConvTranspose1d(ch, ch // 2, k, u, padding=(k - u) // 2))
            ch //= 2
            for rk, rd in zip(resblock_kernel_sizes, resblock_dilation_sizes):
                self.resblocks.append(block(ch, rk, tuple(rd)))
        self.conv_post = nn.Conv1d(ch, 1, 7, 1, padding=3, bias=False)

    def forward(self, x, g=None):
        x = self.conv_pre(cat_condition(x, g))
        for i, up in enumerate(self.ups):
            x = up(F.leaky_relu(x, modules.LRELU_SLOPE))
            xs = 0.0
            for j in range(self.num_kernels):
                xs = xs + self.resblocks[i * self.num_kernels + j](x)
            x = xs / self.num_kernels
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x)
