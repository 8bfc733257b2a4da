import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY, directional_check
from qair.errors import ConfigError, ContractError
from qair.restorer import (
    GDFN,
    MDTA,
    PGCA,
    EnhancedTransformerBlock,
    RestorationBranch,
    RestorerConfig,
    TransformerBlock,
)


def seeded(shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_default_config_matches_published_layout():
    cfg = RestorerConfig()
    assert cfg.channels == [48, 96, 192, 384]
    assert cfg.blocks == [4, 6, 6, 8]
    assert cfg.heads == [1, 2, 4, 8]


def test_config_validation():
    with pytest.raises(ConfigError):
        RestorerConfig(blocks=[1, 1, 1])
    with pytest.raises(ConfigError):
        RestorerConfig(base_channels=6, heads=[4, 4, 4, 4])


def test_mdta_attention_shape_and_rows():
    m = MDTA(48, 4)
    m.record_attention = True
    for hw in (8, 16):
        out = m(seeded((2, 48, hw, hw)))
        assert out.shape == (2, 48, hw, hw)
        assert m.last_attention.shape == (2, 4, 12, 12)
        assert torch.allclose(m.last_attention.sum(-1), torch.ones(2, 4, 12), atol=1e-5)


def test_gdfn_shape_and_zero_input():
    g = GDFN(16)
    assert g(seeded((1, 16, 8, 8))).shape == (1, 16, 8, 8)
    assert torch.equal(g(torch.zeros(1, 16, 8, 8)), torch.zeros(1, 16, 8, 8))
    gb = GDFN(16, bias=True)
    assert torch.isfinite(gb(torch.zeros(1, 16, 8, 8))).all()


def test_gdfn_gradient():
    g = GDFN(8).double()
    x = seeded((1, 8, 6, 6), 1, torch.float64).requires_grad_(True)
    assert directional_check(lambda: g(x).pow(2).sum(), [x] + list(g.parameters())) <= 1e-4


def test_pgca_contract_and_sensitivity():
    torch.manual_seed(0)
    p = PGCA(16, 2)
    x, y = seeded((1, 16, 8, 8), 1), seeded((1, 16, 8, 8), 2)
    assert p(x, x).shape == x.shape
    p.record_attention = True
    out = p(x, y)
    assert torch.allclose(p.last_attention.sum(-1), torch.ones(1, 2, 8), atol=1e-5)
    assert (p(x, y + 0.1 * seeded(y.shape, 3)) - out).norm() > 0
    with pytest.raises(ContractError):
        p(x, seeded((1, 16, 4, 4)))


def test_etb_queries_guidance_once_per_block():
    blk = EnhancedTransformerBlock(16, 2)
    calls = []

    def guide(x):
        calls.append(x.shape)
        return x * 2

    seen = {}
    blk.attn.cross_attention = (lambda orig: (lambda y, x: seen.setdefault("y", y) is not None and orig(y, x)))(
        blk.attn.cross_attention
    )
    x = seeded((1, 16, 8, 8))
    blk(x, guide)
    assert len(calls) == 1
    assert torch.equal(seen["y"], x * 2)


def test_branch_block_counts():
    net = RestorationBranch(RestorerConfig())
    assert [len(e) for e in net.encoders] == [4, 6, 6]
    assert len(net.latent) == 8
    assert [len(d) for d in net.decoders] == [4, 6, 6]
    assert all(isinstance(b, TransformerBlock) for e in net.encoders for b in e)
    assert all(isinstance(b, EnhancedTransformerBlock) for d in net.decoders for b in d)


def test_full_width_latent_shape_and_attention_rows():
    torch.manual_seed(0)
    net = RestorationBranch(RestorerConfig())
    for m in net.attention_modules():
        m.record_attention = True
    with torch.no_grad():
        out, feats = net(seeded((1, 3, 128, 128)), return_features=True)
    assert out.shape == (1, 3, 128, 128)
    assert feats["latent"].shape == (1, 384, 16, 16)
    for m in net.attention_modules():
        a = m.last_attention
        assert torch.allclose(a.sum(-1), torch.ones_like(a.sum(-1)), atol=1e-5)


def test_global_residual_identity():
    net = RestorationBranch(TINY)
    with torch.no_grad():
        net.output.weight.zero_()
    x = seeded((1, 3, 32, 32))
    assert torch.equal(net(x), x)


def test_first_forward_deterministic():
    x = seeded((1, 3, 32, 32))
    outs = []
    for _ in range(2):
        torch.manual_seed(11)
        outs.append(RestorationBranch(TINY)(x))
    assert torch.equal(outs[0], outs[1])


def test_rejects_indivisible_size():
    with pytest.raises(ContractError):
        RestorationBranch(TINY)(seeded((1, 3, 30, 32)))


def test_tiny_restorer_gradient():
    torch.manual_seed(0)
    net = RestorationBranch(TINY).double()
    x = seeded((1, 3, 16, 16), 4, torch.float64).requires_grad_(True)
    target = seeded((1, 3, 16, 16), 5, torch.float64)
    params = [x] + [p for p in net.parameters()]
    assert directional_check(lambda: (net(x) - target).pow(2).mean(), params) <= 1e-4


@settings(max_examples=8, deadline=None)
@given(h=st.integers(1, 5), w=st.integers(1, 5), b=st.integers(1, 2))
def test_shape_preserved_for_valid_sizes(h, w, b):
    torch.manual_seed(0)
    net = RestorationBranch(TINY)
    x = seeded((b, 3, 8 * h, 8 * w))
    with torch.no_grad():
        assert net(x).shape == x.shape
