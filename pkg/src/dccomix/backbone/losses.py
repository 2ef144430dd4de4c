from __future__ import annotations

import torch


def feature_loss(fmap_r, fmap_g):
    loss = 0.0
    for dr, dg in zip(fmap_r, fmap_g):
        for rl, gl in zip(dr, dg):
            loss = loss + torch.mean(torch.abs(rl.detach() - gl))
    return loss * 2


def discriminator_loss(disc_real_outputs, disc_generated_outputs):
    loss = 0.0
    for dr, dg in zip(disc_real_outputs, disc_generated_outputs):
        loss = loss + torch.mean((1 - dr) ** 2) + torch.mean(dg ** 2)
    return loss


def generator_loss(disc_outputs):
    loss = 0.0
    for dg in disc_outputs:
        loss = loss + torch.mean((1 - dg) ** 2)
    return loss


def kl_loss(z_p, logs_q, m_p, logs_p, z_mask, eps=None):
    """Single-sample estimate of KL(q(z|x) || p(z|c)) per valid frame.

    z_p is the posterior sample pushed through the (volume-preserving) flow.
    With ``eps`` (the posterior's standard-normal draw) the entropy term uses
    log q(z) exactly, -logs_q - eps^2 / 2, so identical prior and posterior give
    exactly zero. Without it the expectation -1/2 is used. The two differ only
    by a parameter-free term, so their gradients are identical.
    """
    ent = -0.5 if eps is None else -0.5 * eps ** 2
    kl = logs_p - logs_q + ent + 0.5 * ((z_p - m_p) ** 2) * torch.exp(-2.0 * logs_p)
    return torch.sum(kl * z_mask) / torch.sum(z_mask)


def masked_l1(a, b, mask):
    """Mean absolute difference over masked elements; mask broadcasts over channels."""
    mask = mask.expand_as(a)
    return torch.sum(torch.abs(a - b) * mask) / torch.clamp_min(torch.sum(mask), 1.0)
