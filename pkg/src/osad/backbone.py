"""Multi-scale image feature extractors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from osad.errors import ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class FeatureMap:
    tensor: torch.Tensor  # (B, C, H, W)
    stride: int
    stage: int


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "tiny-conv"
    frozen_stages: int = 0
    output_stages: tuple[int, ...] = (1, 2, 3, 4)
    widths: tuple[int, ...] = (16, 24, 32, 48)
    pretrained: bool = False


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(math.gcd(4, cout), cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(math.gcd(4, cout), cout), nn.ReLU(inplace=True),
    )


class TinyConv(nn.Module):
    """Four conv stages at strides 1, 2, 4, 8.

    Downsampling is 2x2 max pooling rather than strided convolution so that
    the network commutes with horizontal flips once its kernels are symmetric.
    """

    strides = (1, 2, 4, 8)

    def __init__(self, widths=(16, 24, 32, 48)):
        super().__init__()
        if len(widths) != 4:
            raise ConfigError("tiny-conv needs four stage widths")
        self.widths = tuple(widths)
        chans = (3,) + self.widths
        self.stages = nn.ModuleList()
        for i in range(4):
            pool = [nn.MaxPool2d(2)] if i > 0 else []
            self.stages.append(nn.Sequential(*pool, _conv_block(chans[i], chans[i + 1])))

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNet50(nn.Module):
    strides = (4, 8, 16, 32)
    widths = (256, 512, 1024, 2048)

    def __init__(self, pretrained: bool = False):
        super().__init__()
        try:
            import torchvision
        except ImportError as exc:  # optional dependency
            raise ConfigError("deep-residual-50 needs torchvision (pip install artifact[resnet])") from exc
        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
        net = torchvision.models.resnet50(weights=weights)
        self.stages = nn.ModuleList([
            nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1),
            net.layer2, net.layer3, net.layer4,
        ])

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


VARIANTS = ("tiny-conv", "deep-residual-50")


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        if config.variant == "tiny-conv":
            self.net = TinyConv(config.widths)
        elif config.variant == "deep-residual-50":
            self.net = ResNet50(config.pretrained)
        else:
            raise ConfigError(f"unknown backbone variant {config.variant!r}; choose from {VARIANTS}")
        n_stages = len(self.net.stages)
        if not 0 <= config.frozen_stages <= n_stages:
            raise ConfigError(f"frozen_stages must lie in [0, {n_stages}]")
        if any(s < 1 or s > n_stages for s in config.output_stages):
            raise ConfigError(f"output_stages must lie in [1, {n_stages}]")
        self.config = config
        self.freeze(config.frozen_stages)

    @property
    def strides(self) -> tuple[int, ...]:
        return self.net.strides

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.net.widths)

    def freeze(self, n: int) -> None:
        for i, stage in enumerate(self.net.stages):
            for p in stage.parameters():
                p.requires_grad_(i >= n)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen ResNet stages keep their batch-norm statistics
        for stage in self.net.stages[: self.config.frozen_stages]:
            stage.eval()
        return self

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.net(images)


def normalize_images(images: torch.Tensor, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """uint8-range or [0, 1] RGB batch -> standardized float tensor."""
    if images.dtype == torch.uint8:
        images = images.float() / 255.0
    m = torch.as_tensor(mean, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)
    s = torch.as_tensor(std, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)
    return (images - m) / s


def extract_features(images, backbone: Backbone) -> list[FeatureMap]:
    """Run ``backbone`` over one batch and wrap the configured stages."""
    if isinstance(images, (list, tuple)):
        shapes = {tuple(im.shape) for im in images}
        if len(shapes) != 1:
            raise ValueError(f"mismatched image sizes in batch: {sorted(shapes)}")
        images = torch.stack(list(images))
    feats = backbone(images)
    return [FeatureMap(feats[s - 1], backbone.strides[s - 1], s) for s in backbone.config.output_stages]
