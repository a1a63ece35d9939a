import pytest
import torch

from osad.backbone import BackboneConfig
from osad.data import builtin_schemas
from osad.errors import ConfigError
from osad.model import ModelConfig, OSADNet, PooledTransfer

STAR = builtin_schemas()["star5"].adjacency()


def inputs(b=2, n=3, size=32):
    torch.manual_seed(0)
    return (torch.randn(b, 3, size, size),
            torch.tensor([[0.1, 0.1, 0.6, 0.9]] * b),
            torch.tensor([[0.4, 0.5, 0.9, 0.9]] * b),
            torch.rand(b, 5, 3),
            torch.randn(b, n, 3, size, size))


@pytest.mark.parametrize("toggles", [
    dict(), dict(use_dce=False), dict(use_mpt=False), dict(use_apl=False, use_mpt=False),
    dict(use_apl=False, use_mpt=False, use_dce=False),
])
def test_variants_produce_five_side_outputs(toggles):
    net = OSADNet(ModelConfig(**toggles), STAR)
    sides = net(*inputs())
    assert len(sides) == 5
    assert [32 // s.shape[-1] for s in sides] == list(net.side_strides)
    assert all(s.shape[:3] == (2, 3, 1) for s in sides)


def test_mpt_without_apl_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(use_apl=False)


def test_no_mpt_variant_uses_pooled_transfer():
    net = OSADNet(ModelConfig(use_mpt=False), STAR)
    assert isinstance(net.transfer, PooledTransfer)


def test_predict_probabilities_in_unit_interval():
    net = OSADNet(ModelConfig(), STAR).eval()
    p = net.predict(*inputs(b=1, n=2), generator=torch.Generator().manual_seed(0))
    assert p.shape == (1, 2, 32, 32)
    assert torch.all((p >= 0) & (p <= 1))


def test_same_generator_same_output():
    net = OSADNet(ModelConfig(), STAR).eval()
    x = inputs()
    a = net.predict(*x, generator=torch.Generator().manual_seed(4))
    b = net.predict(*x, generator=torch.Generator().manual_seed(4))
    assert torch.equal(a, b)


def test_size_mismatch_rejected():
    s, h, o, p, q = inputs()
    with pytest.raises(ValueError):
        OSADNet(ModelConfig(), STAR)(s[..., :16], h, o, p, q)


def test_swapping_query_order_swaps_outputs():
    net = OSADNet(ModelConfig(backbone=BackboneConfig()), STAR).eval()
    s, h, o, p, q = inputs(b=1, n=3)
    a = net.predict(s, h, o, p, q, torch.Generator().manual_seed(0))
    b = net.predict(s, h, o, p, q[:, [2, 0, 1]], torch.Generator().manual_seed(0))
    assert torch.allclose(a[:, [2, 0, 1]], b, atol=1e-5)
