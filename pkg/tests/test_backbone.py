import hashlib

import pytest
import torch

from osad.backbone import Backbone, BackboneConfig, extract_features, normalize_images
from osad.errors import ConfigError


def digest(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def test_tiny_conv_strides_and_deepest_grid():
    bb = Backbone(BackboneConfig())
    feats = extract_features(torch.zeros(2, 3, 64, 64), bb)
    assert [f.stride for f in feats] == [1, 2, 4, 8]
    deepest = feats[-1]
    assert deepest.tensor.shape[-2:] == (8, 8)
    for f in feats:
        assert f.tensor.shape[-1] * f.stride == 64


def test_tiny_conv_parameter_budget():
    bb = Backbone(BackboneConfig())
    assert sum(p.numel() for p in bb.parameters()) <= 100_000


def test_zero_images_give_finite_features():
    for f in Backbone()(torch.zeros(1, 3, 32, 32)):
        assert torch.isfinite(f).all()


def test_fully_convolutional():
    bb = Backbone()
    a = bb(torch.randn(1, 3, 32, 32))
    b = bb(torch.randn(1, 3, 64, 32))
    for fa, fb in zip(a, b):
        assert fb.shape[-2] == 2 * fa.shape[-2]
        assert fb.shape[-1] == fa.shape[-1]


def test_fully_frozen_backbone_does_not_move():
    torch.manual_seed(0)
    bb = Backbone(BackboneConfig(frozen_stages=4))
    head = torch.nn.Conv2d(48, 1, 1)
    params = [p for p in list(bb.parameters()) + list(head.parameters()) if p.requires_grad]
    opt = torch.optim.Adam(params, lr=0.1)
    before = digest(bb)
    loss = head(bb(torch.randn(2, 3, 32, 32))[-1]).mean()
    loss.backward()
    opt.step()
    assert digest(bb) == before


def test_partially_frozen_backbone():
    bb = Backbone(BackboneConfig(frozen_stages=2))
    flags = [all(p.requires_grad for p in s.parameters()) for s in bb.net.stages]
    assert flags == [False, False, True, True]


def test_config_validation():
    with pytest.raises(ConfigError):
        Backbone(BackboneConfig(variant="vgg"))
    with pytest.raises(ConfigError):
        Backbone(BackboneConfig(frozen_stages=5))
    with pytest.raises(ConfigError):
        Backbone(BackboneConfig(output_stages=(0,)))


def test_mismatched_batch_rejected():
    with pytest.raises(ValueError):
        extract_features([torch.zeros(3, 8, 8), torch.zeros(3, 16, 16)], Backbone())


def test_normalize_images():
    x = torch.full((1, 3, 2, 2), 255, dtype=torch.uint8)
    out = normalize_images(x)
    assert torch.allclose(out[0, 0], torch.full((2, 2), (1 - 0.485) / 0.229))


def test_resnet50_shapes():
    pytest.importorskip("torchvision")
    bb = Backbone(BackboneConfig(variant="deep-residual-50", frozen_stages=3))
    bb.eval()
    with torch.no_grad():
        feats = extract_features(torch.zeros(1, 3, 320, 320), bb)
    assert feats[-1].stride == 32
    assert feats[-1].tensor.shape == (1, 2048, 10, 10)
    assert [f.stride for f in feats] == [4, 8, 16, 32]
