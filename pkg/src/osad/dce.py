"""Densely collaborative enhancement across the queries of one episode."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-8
FLAT_SPAN = 1e-6  # maps whose range is below this are treated as constant
SIMILARITIES = ("cosine", "embedded_gaussian")


def _flat(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(-2).transpose(-1, -2)  # (..., L, C)


def dense_correlation(fi: torch.Tensor, fj: torch.Tensor) -> torch.Tensor:
    """Best cosine match in ``fj`` for every position of ``fi``.

    (..., C, H, W) x2 -> (..., H, W). Zero vectors score 0 against everything.
    """
    if fi.shape != fj.shape:
        raise ValueError(f"feature shapes differ: {tuple(fi.shape)} vs {tuple(fj.shape)}")
    a = F.normalize(_flat(fi), dim=-1, eps=EPS)
    b = F.normalize(_flat(fj), dim=-1, eps=EPS)
    best = (a @ b.transpose(-1, -2)).amax(dim=-1)
    return best.view(fi.shape[:-3] + fi.shape[-2:])


def normalize_mask(c: torch.Tensor) -> torch.Tensor:
    """Min-max over the last two axes; a (numerically) constant map becomes all 0.5."""
    lo = c.amin(dim=(-2, -1), keepdim=True)
    hi = c.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    flat = span <= FLAT_SPAN
    return torch.where(flat, torch.full_like(c, 0.5), (c - lo) / torch.where(flat, torch.ones_like(span), span))


def _pair_scores(x: torch.Tensor, similarity: str, theta=None, phi=None) -> torch.Tensor:
    """x: (B, N, C, H, W) -> raw correspondence maps (B, N, N, L); [b, i, j] scores i against j."""
    b, n, c, h, w = x.shape
    if similarity == "cosine":
        f = F.normalize(_flat(x), dim=-1, eps=EPS)  # (B, N, L, C)
        sim = torch.einsum("bikc,bjlc->bijkl", f, f)
        return sim.amax(dim=-1)
    if similarity == "embedded_gaussian":
        flat = x.reshape(b * n, c, h, w)
        q = _flat(theta(flat)).reshape(b, n, h * w, -1)
        k = _flat(phi(flat)).reshape(b, n, h * w, -1)
        logits = torch.einsum("bikc,bjlc->bijkl", q, k)
        return logits.softmax(dim=-1).amax(dim=-1)
    raise ValueError(f"unknown similarity {similarity!r}; choose from {SIMILARITIES}")


def correlation_masks(x: torch.Tensor, similarity: str = "cosine", theta=None, phi=None) -> torch.Tensor:
    """Mean over the other queries of the normalized correspondence maps: (B, N, H, W)."""
    b, n, c, h, w = x.shape
    if n < 2:
        raise ValueError("collaborative enhancement needs at least two queries")
    pairs = normalize_mask(_pair_scores(x, similarity, theta, phi).view(b, n, n, h, w))
    off_diag = (1.0 - torch.eye(n, dtype=x.dtype, device=x.device)).view(1, n, n, 1, 1)
    # summing in sorted order makes the mean independent of query order, bit for bit
    return (pairs * off_diag).sort(dim=2).values.sum(dim=2) / (n - 1)


def collaborative_enhance(x: torch.Tensor, conv: nn.Module, similarity: str = "cosine",
                          theta=None, phi=None) -> torch.Tensor:
    """(B, N, C, H, W) -> (B, N, C, H, W) via ``conv([x * mask, x])``."""
    b, n, c, h, w = x.shape
    m = correlation_masks(x, similarity, theta, phi).unsqueeze(2)
    out = conv(torch.cat([x * m, x], dim=2).reshape(b * n, 2 * c, h, w))
    return out.view(b, n, -1, h, w)


class CollaborativeEnhancement(nn.Module):
    def __init__(self, channels: int, similarity: str = "cosine"):
        super().__init__()
        if similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {similarity!r}; choose from {SIMILARITIES}")
        self.similarity = similarity
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)
        if similarity == "embedded_gaussian":
            self.theta = nn.Conv2d(channels, channels, 1)
            self.phi = nn.Conv2d(channels, channels, 1)
        else:
            self.theta = self.phi = None

    def masks(self, x):
        return correlation_masks(x, self.similarity, self.theta, self.phi)

    def forward(self, x):
        return collaborative_enhance(x, self.conv, self.similarity, self.theta, self.phi)
