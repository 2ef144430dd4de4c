from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F


def get_padding(kernel_size: int, dilation: int = 1) -> int:
    return (kernel_size * dilation - dilation) // 2


def sequence_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def expand_condition(g: torch.Tensor, length: int) -> torch.Tensor:
    """[B, G] or [B, G, 1] -> [B, G, length]."""
    if g.dim() == 2:
        g = g.unsqueeze(-1)
    return g.expand(-1, -1, length)


def cat_condition(x: torch.Tensor, g: Optional[torch.Tensor]) -> torch.Tensor:
    """Concatenate a global condition to every frame of x [B, C, T]."""
    if g is None:
        return x
    return torch.cat([x, expand_condition(g, x.shape[-1]).to(x.dtype)], dim=1)


def slice_segments(x: torch.Tensor, ids_str: torch.Tensor, segment_size: int) -> torch.Tensor:
    """Take ``segment_size`` frames of x [B, C, T] starting at ``ids_str`` (zero beyond the end)."""
    if x.shape[-1] < int(ids_str.max()) + segment_size:
        x = F.pad(x, (0, int(ids_str.max()) + segment_size - x.shape[-1]))
    ret = torch.zeros_like(x[:, :, :segment_size])
    for i in range(x.shape[0]):
        s = int(ids_str[i])
        ret[i] = x[i, :, s:s + segment_size]
    return ret


def rand_slice_segments(
    x: torch.Tensor,
    lengths: torch.Tensor,
    segment_size: int,
    generator: Optional[torch.Generator] = None,
):
    """Random segment per item; items shorter than ``segment_size`` start at 0."""
    ids_str_max = torch.clamp(lengths - segment_size + 1, min=1)
    r = torch.rand(x.shape[0], generator=generator, device="cpu").to(x.device)
    ids_str = (r * ids_str_max.to(r.dtype)).long()
    return slice_segments(x, ids_str, segment_size), ids_str


def generate_path(duration: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Hard monotonic path from integer durations.

    duration: [B, 1, T_x]; mask: [B, 1, T_y, T_x] -> path [B, 1, T_y, T_x].
    """
    b, _, t_y, t_x = mask.shape
    cum = torch.cumsum(duration, -1).view(b * t_x)
    path = sequence_mask(cum, t_y).to(mask.dtype).view(b, t_x, t_y)
    path = path - F.pad(path, (0, 0, 1, 0, 0, 0))[:, :-1]
    return path.unsqueeze(1).transpose(2, 3) * mask


def fused_add_tanh_sigmoid_multiply(a: torch.Tensor, b: torch.Tensor, n_channels: int) -> torch.Tensor:
    x = a + b
    return torch.tanh(x[:, :n_channels]) * torch.sigmoid(x[:, n_channels:])
