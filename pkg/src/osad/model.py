"""The full one-shot affordance network and its ablation variants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from osad.apl import ActionPurpose
from osad.backbone import Backbone, BackboneConfig
from osad.dce import CollaborativeEnhancement
from osad.decoder import Decoder, probability_map
from osad.errors import ConfigError
from osad.mpt import MixturePurposeTransfer


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    channels: int = 32
    decoder_width: int = 16
    bases: int = 8
    iterations: int = 3
    temperature: float = 1.0
    backprop_em: bool = False
    similarity: str = "cosine"
    use_apl: bool = True
    use_mpt: bool = True
    use_dce: bool = True

    def __post_init__(self):
        if self.use_mpt and not self.use_apl:
            raise ConfigError("the MPT module needs the APL module")
        if self.bases < 1 or self.iterations < 1:
            raise ConfigError("mpt.bases and mpt.iterations must be >= 1")


class PooledTransfer(nn.Module):
    """Stand-in for MPT: average-pool the purpose feature, tile it over each
    query grid, concatenate and convolve."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def forward(self, purpose, queries, generator=None):
        b, n, c, h, w = queries.shape
        pooled = purpose.mean(dim=(-2, -1)).view(b, 1, c, 1, 1).expand(b, n, c, h, w)
        out = self.conv(torch.cat([queries, pooled], dim=2).reshape(b * n, 2 * c, h, w))
        return out.view(b, n, c, h, w)


class OSADNet(nn.Module):
    def __init__(self, config: ModelConfig, adjacency):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone)
        c = config.channels
        self.project = nn.Conv2d(self.backbone.widths[-1], c, 1)
        self.apl = ActionPurpose(c, np.asarray(adjacency)) if config.use_apl else None
        if config.use_mpt:
            self.transfer = MixturePurposeTransfer(c, config.bases, config.iterations,
                                                   config.temperature, config.backprop_em)
        else:
            self.transfer = PooledTransfer(c)
        self.dce = CollaborativeEnhancement(c, config.similarity) if config.use_dce else None
        self.decoder = Decoder(c, self.backbone.widths, config.decoder_width)

    @property
    def side_strides(self) -> tuple[int, ...]:
        s = self.backbone.strides
        return (*s, s[-1])

    def head(self, support_feat, human_boxes, object_boxes, pose, query_feat, query_skips, generator=None):
        """Everything after the backbone.

        support_feat: (B, C_b, h, w) deepest support stage; query_feat:
        (B, N, C_b, h, w) deepest query stage; query_skips: four
        (B * N, C_m, H_m, W_m) stage outputs. Returns five (B, N, 1, H_m, W_m)
        logit maps, finest first.
        """
        b, n = query_feat.shape[:2]
        xs = self.project(support_feat)
        xq = self.project(query_feat.flatten(0, 1))
        xq = xq.view(b, n, *xq.shape[1:])
        purpose = self.apl(xs, human_boxes, object_boxes, pose) if self.apl is not None else xs
        fq = self.transfer(purpose, xq, generator)
        if self.dce is not None:
            fq = self.dce(fq)
        sides = self.decoder(fq.flatten(0, 1), query_skips)
        return [d.view(b, n, *d.shape[1:]) for d in sides]

    def forward(self, support, human_boxes, object_boxes, pose, queries, generator=None):
        """support: (B, 3, H, W); queries: (B, N, 3, H, W), both normalized."""
        b, n = queries.shape[:2]
        if support.shape[-2:] != queries.shape[-2:]:
            raise ValueError("support and query images must share one size")
        feats = self.backbone(torch.cat([support, queries.flatten(0, 1)], dim=0))
        deepest = feats[-1]
        query_deep = deepest[b:].view(b, n, *deepest.shape[1:])
        skips = [f[b:] for f in feats]
        return self.head(deepest[:b], human_boxes, object_boxes, pose, query_deep, skips, generator)

    @torch.no_grad()
    def predict(self, support, human_boxes, object_boxes, pose, queries, generator=None):
        """Probability maps (B, N, H, W) at the input resolution."""
        sides = self.forward(support, human_boxes, object_boxes, pose, queries, generator)
        b, n = queries.shape[:2]
        first = sides[0].flatten(0, 1)
        return probability_map([first], queries.shape[-2:]).view(b, n, *queries.shape[-2:])
