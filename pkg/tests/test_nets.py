import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flowsynth.errors import ConfigError, DataError
from flowsynth.nets import (FULL_SCALE, DiscConfig, NetConfig, count_parameters, forward,
                            init_discriminator, init_network, patchgan_forward, receptive_field,
                            time_embed)

from conftest import TOY


def _inputs(shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(shape, generator=g) for _ in range(3)]


def _perturbed(net, seed=0):
    # a copy with a non-zero output layer so forward passes carry signal
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        net.conv_out.weight.copy_(0.1 * torch.randn(net.conv_out.weight.shape, generator=g))
    return net


def test_config_defaults_and_validation():
    cfg = NetConfig()
    assert cfg.levels == 3 and cfg.attention_levels == (False, False, True)
    assert (cfg.in_channels, cfg.out_channels) == (3, 1)
    assert FULL_SCALE.channel_widths == (256, 256, 512)
    with pytest.raises(ConfigError):
        NetConfig(in_channels=2)
    with pytest.raises(ConfigError):
        NetConfig(channel_widths=(8, 8), attention_levels=(False, False, True))
    with pytest.raises(ConfigError):
        NetConfig(channel_widths=(10, 10, 20), norm_groups=4)


def test_time_embed_examples():
    np.testing.assert_allclose(time_embed(0.0, 8)[0].numpy(), [0, 1, 0, 1, 0, 1, 0, 1], atol=0)
    assert torch.isfinite(time_embed(0.0, 128)).all()
    assert torch.linalg.norm(time_embed(0.0, 64) - time_embed(1.0, 64)) > 0
    with pytest.raises(DataError):
        time_embed(1.5, 8)
    with pytest.raises(DataError):
        time_embed(-0.1, 8)


def test_time_embed_injective_on_grid():
    emb = time_embed(torch.linspace(0, 1, 1001, dtype=torch.float64), 128).numpy()
    d = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1e-3


def test_init_deterministic_and_zero_output():
    a, b = init_network(TOY, 3), init_network(TOY, 3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = init_network(TOY, 4)
    assert any(not torch.equal(va, vc) for va, vc in zip(a.state_dict().values(), c.state_dict().values()))
    x = _inputs((2, 1, 16, 16))
    out = a(*x, torch.tensor([0.2, 0.7]))
    assert torch.equal(out, torch.zeros_like(out))


def test_init_leaves_global_rng_untouched():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    init_network(TOY, 5)
    init_discriminator(DiscConfig(widths=(8, 16, 16, 16)), 5)
    assert torch.equal(torch.rand(3), expected)


def test_desk_parameter_count():
    assert count_parameters(init_network(NetConfig(), 0)) < 5_000_000


@pytest.mark.parametrize("hw", [(64, 64), (16, 24), (32, 16)])
def test_shape_preservation(hw):
    net = _perturbed(init_network(TOY, 0))
    x = _inputs((1, 1, *hw))
    out = forward(net, *x, torch.tensor([0.5]))
    assert out.shape == (1, 1, *hw) and torch.isfinite(out).all()


def test_forward_errors():
    net = init_network(TOY, 0)
    a, b, c = _inputs((1, 1, 16, 16))
    with pytest.raises(DataError):
        forward(net, a, b, c[:, :, :8], torch.tensor([0.5]))
    with pytest.raises(DataError):
        forward(net, *_inputs((1, 1, 18, 16)), torch.tensor([0.5]))


def test_determinism_and_zero_time_baseline():
    net = _perturbed(init_network(TOY, 1)).eval()
    x = _inputs((2, 1, 16, 16))
    t1, t9 = torch.full((2,), 0.1), torch.full((2,), 0.9)
    assert torch.equal(net(*x, t1), net(*x, t1))
    assert not torch.allclose(net(*x, t1), net(*x, t9))
    assert torch.equal(net(*x, t1, zero_time=True), net(*x, t9, zero_time=True))


def test_patchgan_geometry():
    assert receptive_field() == 70
    disc = init_discriminator(DiscConfig(), 0)
    cond, cand = torch.randn(1, 1, 256, 256), torch.randn(1, 1, 256, 256)
    logits = patchgan_forward(disc, cond, cand)
    assert logits.shape == (1, 1, 30, 30) and torch.isfinite(logits).all()
    assert torch.equal(logits, patchgan_forward(disc, cond, cand))
    with pytest.raises(DataError):
        patchgan_forward(disc, cond, cand[:, :, :128])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 2))
def test_shape_preservation_property(h4, w4, b):
    net = _perturbed(init_network(TOY, 0))
    x = _inputs((b, 1, 4 * h4, 4 * w4))
    out = net(*x, torch.rand(b))
    assert out.shape == x[0].shape
