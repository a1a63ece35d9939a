"""Top-down decoder with a prediction head per stage, and the summed loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from osad.errors import NonBinaryMaskError

N_SIDE_OUTPUTS = 5


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class Decoder(nn.Module):
    """``P5 = conv(F)``, ``P_m = conv(conv(X_m) + up(P_{m+1}))``, ``D_m = conv(P_m)``."""

    def __init__(self, in_channels: int, skip_channels, width: int = 32):
        super().__init__()
        skip_channels = tuple(skip_channels)
        if len(skip_channels) != N_SIDE_OUTPUTS - 1:
            raise ValueError("decoder expects four skip stages")
        self.top = nn.Conv2d(in_channels, width, 3, padding=1)
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 3, padding=1) for c in skip_channels)
        self.merge = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in skip_channels)
        self.heads = nn.ModuleList(nn.Conv2d(width, 1, 1) for _ in range(N_SIDE_OUTPUTS))

    def forward(self, feature: torch.Tensor, skips) -> list[torch.Tensor]:
        """feature: (B, C, h, w); skips: four (B, C_m, H_m, W_m), shallowest first.

        Returns five logit maps ordered from stage 1 (finest) to stage 5.
        """
        if len(skips) != N_SIDE_OUTPUTS - 1:
            raise ValueError("decoder expects four skip stages")
        for s in skips:
            if s.shape[0] != feature.shape[0]:
                raise ValueError("skip batch size differs from feature batch size")
        p = F.relu(self.top(feature))
        levels = [p]
        for m in reversed(range(N_SIDE_OUTPUTS - 1)):
            lateral = self.lateral[m](skips[m])
            p = F.relu(self.merge[m](lateral + upsample(p, lateral.shape[-2:])))
            levels.append(p)
        levels.reverse()
        return [head(level) for head, level in zip(self.heads, levels)]


@dataclass
class LossReport:
    total: torch.Tensor
    per_stage: torch.Tensor  # (N, 5)
    positives: torch.Tensor  # (N,) pixel counts of the affordance region
    negatives: torch.Tensor

    def check_decomposition(self, tol: float = 1e-6) -> bool:
        return abs(float(self.total) - float(self.per_stage.sum())) <= tol


def deep_supervision_loss(side_outputs, masks: torch.Tensor) -> LossReport:
    """Sum over queries and stages of mean per-pixel binary cross-entropy.

    side_outputs: five (N, 1, h_m, w_m) logit maps; masks: (N, H, W) in {0, 1}.
    Each side output is bilinearly resized to the mask grid first.
    """
    masks = masks.to(side_outputs[0].dtype)
    if not bool(((masks == 0) | (masks == 1)).all()):
        raise NonBinaryMaskError("loss masks must be binary")
    size = masks.shape[-2:]
    per_stage = torch.stack([
        F.binary_cross_entropy_with_logits(
            upsample(d, size).squeeze(1), masks, reduction="none").mean(dim=(-2, -1))
        for d in side_outputs
    ], dim=1)
    positives = masks.sum(dim=(-2, -1))
    return LossReport(
        total=per_stage.sum(),
        per_stage=per_stage,
        positives=positives,
        negatives=masks[0].numel() - positives,
    )


def probability_map(side_outputs, size) -> torch.Tensor:
    """Stage-1 prediction resized to ``size`` and squashed: (N, H, W)."""
    return torch.sigmoid(upsample(side_outputs[0], size)).squeeze(1)
