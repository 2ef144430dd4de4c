"""Monotonic alignment search.

Given a score matrix ``value[t_y, t_x]`` (log-likelihood of frame y under token
x), find the monotonic path that assigns every frame to exactly one token,
starts at token 0, ends at the last token, never skips a token and maximises
the summed score.
"""

from __future__ import annotations

import itertools

import numpy as np
import torch

from dccomix.errors import InvalidInputError


def maximum_path_single(value: np.ndarray) -> np.ndarray:
    """Best path through one [t_y, t_x] score matrix -> 0/1 matrix of the same shape.

    When staying on a token and advancing score equally the path stays
    (the earlier token keeps the frame).
    """
    t_y, t_x = value.shape
    if t_x < 1 or t_y < t_x:
        raise InvalidInputError(f"cannot align {t_x} tokens to {t_y} frames")
    acc = np.full((t_y, t_x), -np.inf)
    acc[0, 0] = value[0, 0]
    for y in range(1, t_y):
        lo, hi = max(0, t_x + y - t_y), min(t_x, y + 1)
        stay = acc[y - 1, lo:hi]
        adv = np.full(hi - lo, -np.inf)
        if lo == 0:
            adv[1:] = acc[y - 1, 0:hi - 1]
        else:
            adv[:] = acc[y - 1, lo - 1:hi - 1]
        acc[y, lo:hi] = value[y, lo:hi] + np.maximum(stay, adv)
    path = np.zeros((t_y, t_x), dtype=np.float64)
    x = t_x - 1
    for y in range(t_y - 1, -1, -1):
        path[y, x] = 1.0
        if x > 0 and (x == y or acc[y - 1, x] < acc[y - 1, x - 1]):
            x -= 1
    return path


def maximum_path(neg_cent: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batched search. neg_cent, mask: [B, t_y, t_x] -> path [B, t_y, t_x] (same dtype)."""
    scores = neg_cent.detach().cpu().double().numpy()
    m = mask.detach().cpu().numpy() > 0
    out = np.zeros_like(scores)
    for b in range(scores.shape[0]):
        t_y = int(m[b, :, 0].sum())
        t_x = int(m[b, 0, :].sum())
        out[b, :t_y, :t_x] = maximum_path_single(scores[b, :t_y, :t_x])
    return torch.from_numpy(out).to(device=neg_cent.device, dtype=neg_cent.dtype)


def brute_force_path(value: np.ndarray) -> tuple[np.ndarray, float]:
    """Exhaustive search over all monotonic surjective paths (small instances only)."""
    t_y, t_x = value.shape
    if t_y < t_x:
        raise InvalidInputError(f"cannot align {t_x} tokens to {t_y} frames")
    best, best_score = None, -np.inf
    # a path is fixed by the frames at which the token index advances
    for steps in itertools.combinations(range(1, t_y), t_x - 1):
        token = np.zeros(t_y, dtype=int)
        for s in steps:
            token[s:] += 1
        score = float(value[np.arange(t_y), token].sum())
        if score > best_score:
            best_score = score
            best = token
    path = np.zeros((t_y, t_x))
    path[np.arange(t_y), best] = 1.0
    return path, best_score
