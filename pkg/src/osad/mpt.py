"""Mixture purpose transfer: summarize the purpose feature into K bases by
unrolled EM, then re-express every query feature in those bases."""

from __future__ import annotations

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

DEAD_BASIS_MASS = 1e-12


def init_bases(batch: int, k: int, channels: int, generator: torch.Generator | None = None,
               dtype=torch.float32, device=None) -> torch.Tensor:
    """Unit-Gaussian draw with l2-normalized rows: (B, K, C)."""
    mu = torch.randn(batch, k, channels, generator=generator, dtype=dtype, device=device)
    return F.normalize(mu, dim=-1)


def e_step(features: torch.Tensor, mu: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Responsibilities softmax(F mu^T / t): (B, L, C), (B, K, C) -> (B, L, K)."""
    return torch.softmax(features @ mu.transpose(-1, -2) / temperature, dim=-1)


def m_step(features: torch.Tensor, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Responsibility-weighted means; also returns the per-basis mass."""
    mass = z.sum(dim=-2)  # (B, K)
    mu = (z.transpose(-1, -2) @ features) / mass.clamp_min(DEAD_BASIS_MASS).unsqueeze(-1)
    return mu, mass


def _reseed_dead(mu, mass, features, generator):
    dead = mass <= DEAD_BASIS_MASS
    if not bool(dead.any()):
        return mu
    log.warning("re-seeding %d dead EM basis/bases from random feature rows", int(dead.sum()))
    mu = mu.clone()
    for b, k in dead.nonzero().tolist():
        j = int(torch.randint(features.shape[-2], (1,), generator=generator))
        mu[b, k] = features[b, j]
    return mu


def _em_round(features, mu, temperature, normalize, generator):
    z = e_step(features, mu, temperature)
    mu, mass = m_step(features, z)
    mu = _reseed_dead(mu, mass, features, generator)
    if normalize:
        mu = F.normalize(mu, dim=-1)
    return mu, z


def em_estimate_bases(features: torch.Tensor, mu0: torch.Tensor, iterations: int,
                      temperature: float = 1.0, normalize: bool = True, backprop: bool = False,
                      generator: torch.Generator | None = None, return_history: bool = False):
    """Alternate E and M steps ``iterations`` times starting from ``mu0``.

    Without ``backprop`` all but the last round run without autograd and the
    last round sees the previous bases as constants, so gradients reach the
    features only through the final weighted average.
    """
    if iterations < 1:
        raise ValueError("EM needs at least one iteration")
    squeeze = features.ndim == 2
    if squeeze:
        features, mu0 = features.unsqueeze(0), mu0.unsqueeze(0)
    if features.shape[-1] != mu0.shape[-1]:
        raise ValueError(f"basis width {mu0.shape[-1]} != feature width {features.shape[-1]}")
    if not torch.isfinite(mu0).all():
        raise ValueError("initial bases must be finite")

    history = []
    mu = mu0
    for t in range(iterations):
        last = t == iterations - 1
        if backprop:
            mu, z = _em_round(features, mu, temperature, normalize, generator)
        elif last:
            mu, z = _em_round(features, mu.detach(), temperature, normalize, generator)
        else:
            with torch.no_grad():
                mu, z = _em_round(features.detach(), mu, temperature, normalize, generator)
        if return_history:
            history.append(z.detach())
    if squeeze:
        mu = mu.squeeze(0)
        history = [z.squeeze(0) for z in history]
    return (mu, history) if return_history else mu


def reconstruct_query(x: torch.Tensor, mu: torch.Tensor, temperature: float = 1.0):
    """``(Z mu, Z)`` with ``Z = softmax(x mu^T)``; x: (..., L, C), mu: (..., K, C)."""
    if x.shape[-1] != mu.shape[-1]:
        raise ValueError(f"query width {x.shape[-1]} != basis width {mu.shape[-1]}")
    z = torch.softmax(x @ mu.transpose(-1, -2) / temperature, dim=-1)
    return z @ mu, z


class MixturePurposeTransfer(nn.Module):
    def __init__(self, channels: int, bases: int = 64, iterations: int = 5,
                 temperature: float = 1.0, backprop_em: bool = False):
        super().__init__()
        self.bases = bases
        self.iterations = iterations
        self.temperature = temperature
        self.backprop_em = backprop_em
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def estimate(self, purpose: torch.Tensor, generator=None) -> torch.Tensor:
        b, c, h, w = purpose.shape
        flat = purpose.flatten(2).transpose(1, 2)  # (B, L, C)
        mu0 = init_bases(b, self.bases, c, generator, dtype=purpose.dtype, device=purpose.device)
        return em_estimate_bases(flat, mu0, self.iterations, self.temperature,
                                 backprop=self.backprop_em, generator=generator)

    def transfer(self, queries: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
        """queries: (B, N, C, H, W); mu: (B, K, C) -> (B, N, C, H, W)."""
        b, n, c, h, w = queries.shape
        flat = queries.flatten(3).transpose(2, 3)  # (B, N, L, C)
        recon, _ = reconstruct_query(flat, mu.unsqueeze(1), self.temperature)
        recon = recon.transpose(2, 3).reshape(b * n, c, h, w)
        out = self.conv(torch.cat([queries.reshape(b * n, c, h, w), recon], dim=1))
        return out.view(b, n, c, h, w)

    def forward(self, purpose, queries, generator=None):
        return self.transfer(queries, self.estimate(purpose, generator))
