import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flowsynth.artifacts import AugmentPolicy
from flowsynth.errors import ConfigError, DataError, NumericError
from flowsynth.nets import DiscConfig, init_discriminator, init_network
from flowsynth.phantom import make_pair
from flowsynth.training import (Batch, LossReport, SliceDataset, TrainConfig, collate, draw_flow_noise,
                                fm_loss, interpolate, pix2pix_losses, regression_output, target_velocity,
                                train, unet_regression_loss)

from conftest import TOY

SMALL_DISC = DiscConfig(widths=(8, 16, 16, 16))
FAST = TrainConfig(epochs=1, batch_size=8, lr_generator=1e-3, crop_size=16, augment=False)


@pytest.fixture(scope="module")
def pairs():
    return [make_pair(s, (16, 16, 16)) for s in range(2)]


def _f(loss):
    return float(loss.detach())


def _batch(b=4, hw=16, seed=0, x1=None):
    g = torch.Generator().manual_seed(seed)
    if x1 is None:
        x1 = torch.randn(b, 1, hw, hw, generator=g)
    b, hw = x1.shape[0], x1.shape[-1]
    return Batch(x1, torch.randn(b, 1, hw, hw, generator=g), torch.randn(b, 1, hw, hw, generator=g))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_generator=0)
    with pytest.raises(ConfigError):
        TrainConfig(sigma_pert=-1)
    with pytest.raises(ConfigError):
        TrainConfig(ar_dropout=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(model_kind="vae")
    with pytest.raises(ConfigError, match="crop_size"):
        TrainConfig(model_kind="pix2pix", crop_size=16)
    assert TrainConfig(model_kind="pix2pix", crop_size=24).crop_size == 24


def test_interpolate_examples():
    x0, x1 = torch.randn(2, 1, 4, 4, dtype=torch.float64), torch.randn(2, 1, 4, 4, dtype=torch.float64)
    assert torch.equal(interpolate(x0, x1, 0.0), x0)
    assert torch.equal(interpolate(x0, x1, 1.0), x1)
    mid = interpolate(torch.zeros(3, 3), torch.full((3, 3), 2.0), 0.5)
    assert torch.equal(mid, torch.ones(3, 3))
    with pytest.raises(DataError):
        interpolate(x0, x1[:, :, :2], 0.5)
    with pytest.raises(DataError):
        interpolate(x0, x1, 1.5)


def test_interpolate_per_sample_t_and_perturbation():
    x0, x1 = torch.zeros(2, 1, 2, 2), torch.ones(2, 1, 2, 2)
    out = interpolate(x0, x1, torch.tensor([0.25, 0.75]))
    assert torch.allclose(out[0], torch.full((1, 2, 2), 0.25)) and torch.allclose(out[1], torch.full((1, 2, 2), 0.75))
    eps = torch.ones_like(x0)
    assert torch.allclose(interpolate(x0, x1, 0.5, 0.01, eps), torch.full_like(x0, 0.51))


def test_target_velocity_examples():
    a = torch.randn(2, 1, 3, 3)
    assert torch.equal(target_velocity(a, a), torch.zeros_like(a))
    assert torch.equal(target_velocity(torch.zeros(2, 2), torch.full((2, 2), 2.0)), torch.full((2, 2), 2.0))
    b = torch.randn(2, 1, 3, 3)
    assert torch.equal(target_velocity(a, b), -target_velocity(b, a))


def test_fm_loss_oracles():
    batch = _batch()
    g = torch.Generator().manual_seed(1)
    noise = draw_flow_noise(batch.x1, g)
    def oracle(xt, xc, xar, t):
        return batch.x1 - noise.x0
    assert _f(fm_loss(oracle, batch, noise=noise)) == 0.0
    off = fm_loss(lambda *a: batch.x1 - noise.x0 + 1.0, batch, noise=noise)
    assert _f(off) == pytest.approx(1.0, abs=1e-6)


def test_fm_loss_zero_model_unit_variance():
    b = _batch(b=64, hw=32, x1=torch.zeros(64, 1, 32, 32))
    net = init_network(TOY, 0)
    loss = _f(fm_loss(net, b, torch.Generator().manual_seed(0)))
    assert loss == pytest.approx(1.0, abs=0.05)


def test_unet_regression_loss_examples():
    b = _batch(x1=torch.ones(2, 1, 16, 16))
    assert _f(unet_regression_loss(lambda xt, xc, xar, t, zero_time: b.x1, b)) == 0.0
    net = init_network(TOY, 0)
    assert _f(unet_regression_loss(net, b)) == pytest.approx(1.0)


def test_regression_independent_of_t():
    net = init_network(TOY, 2)
    with torch.no_grad():
        net.conv_out.weight.normal_(0, 0.1)
    b = _batch()
    assert torch.equal(regression_output(net, b, 0.1), regression_output(net, b, 0.9))
    assert _f(unet_regression_loss(net, b, 0.1)) == _f(unet_regression_loss(net, b, 0.9))


def test_pix2pix_losses_warmup_boundary():
    gen, disc = init_network(TOY, 0), init_discriminator(SMALL_DISC, 0)
    b = _batch(hw=32)
    g0, d0 = pix2pix_losses(gen, disc, b, epoch=0, warmup_epochs=10)
    assert d0 is None and _f(g0) == _f(unet_regression_loss(gen, b))
    g10, d10 = pix2pix_losses(gen, disc, b, epoch=10, warmup_epochs=10)
    assert d10 is not None and torch.isfinite(d10)
    g_plain, _ = pix2pix_losses(gen, disc, b, epoch=12, lambda_adv=0.0)
    assert _f(g_plain) == _f(unet_regression_loss(gen, b))


def test_teacher_forcing_and_first_slice(pairs):
    ds = SliceDataset(pairs)
    for k in range(len(ds)):
        v, i = ds.index[k]
        s = ds.sample(k)
        np.testing.assert_array_equal(s.x1, pairs[v].target.voxels[:, :, i])
        np.testing.assert_array_equal(s.xc, pairs[v].source.voxels[:, :, i])
        if i == 0:
            assert not s.xar.any()
        else:
            np.testing.assert_array_equal(s.xar, pairs[v].target.voxels[:, :, i - 1])


def test_augmentation_touches_conditioning_only(pairs):
    pol = AugmentPolicy(1, 1, 1, 1)
    plain, aug = SliceDataset(pairs, crop_size=12), SliceDataset(pairs, crop_size=12, policy=pol)
    for k in (0, 5, 17):
        a = plain.sample(k, np.random.default_rng(k))
        b = aug.sample(k, np.random.default_rng(k))
        np.testing.assert_array_equal(a.x1, b.x1)
        np.testing.assert_array_equal(a.xar, b.xar)
        assert not np.array_equal(a.xc, b.xc)


def test_ar_dropout_zeroes_previous(pairs):
    ds = SliceDataset(pairs, ar_dropout=1.0)
    assert not ds.sample(5, np.random.default_rng(0)).xar.any()


def test_empty_dataset():
    with pytest.raises(DataError):
        train(FAST, [], TOY)


def test_zero_epochs_returns_init(pairs):
    from flowsynth.training import _seeds

    model, reports = train(dataclasses.replace(FAST, epochs=0), pairs, TOY)
    assert reports == []
    ref = init_network(TOY, _seeds(FAST.seed)[2])
    for a, b in zip(model.state_dict().values(), ref.state_dict().values()):
        assert torch.equal(a, b)


def test_same_seed_identical(pairs):
    _, r1 = train(FAST, pairs, TOY, max_steps=3)
    _, r2 = train(FAST, pairs, TOY, max_steps=3)
    assert r1[-1].mean_train_loss == r2[-1].mean_train_loss
    assert r1[-1].mean_val_loss == r2[-1].mean_val_loss


def test_replicas_match_single_worker(pairs):
    cfg = dataclasses.replace(FAST, batch_size=8)
    m1, _ = train(cfg, pairs, TOY, max_steps=2)
    m2, _ = train(dataclasses.replace(cfg, replicas=2), pairs, TOY, max_steps=2)
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        torch.testing.assert_close(a, b, rtol=1e-4, atol=1e-6)


def test_non_finite_loss_aborts(pairs, monkeypatch):
    import flowsynth.training as tr

    monkeypatch.setattr(tr, "fm_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(NumericError, match="non-finite"):
        train(FAST, pairs, TOY, max_steps=1)


@pytest.mark.parametrize("kind", ["unet_mse", "pix2pix"])
def test_baselines_train(kind):
    pairs32 = [make_pair(0, (32, 32, 16))]
    cfg = dataclasses.replace(FAST, model_kind=kind, disc_warmup_epochs=0, crop_size=24)
    _, reports = train(cfg, pairs32, TOY, disc_config=SMALL_DISC, max_steps=2)
    assert np.isfinite(reports[0].mean_train_loss)


def test_sigma_pert_runs(pairs):
    _, reports = train(dataclasses.replace(FAST, sigma_pert=0.01), pairs, TOY, max_steps=2)
    assert np.isfinite(reports[0].mean_train_loss) and reports[0].mean_train_loss >= 0


def test_loss_report_row():
    r = LossReport(3, 0.5, 0.25, 1.23456)
    assert LossReport.CSV_HEADER == "epoch,mean_train_loss,mean_val_loss,wall_seconds"
    assert r.csv_row() == "3,0.5,0.25,1.235"


def test_collate_shapes():
    from flowsynth.training import TrainSample
    s = TrainSample(np.zeros((4, 4), np.float32), np.ones((4, 4), np.float32), np.zeros((4, 4), np.float32))
    b = collate([s, s])
    assert b.x1.shape == (2, 1, 4, 4) and len(b) == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_fm_loss_nonnegative_property(seed, scale):
    b = _batch(b=2, hw=8, seed=seed)
    loss = fm_loss(lambda xt, *a: scale * xt, b, torch.Generator().manual_seed(seed))
    assert float(loss) >= 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_interpolation_is_affine_property(seed, t):
    g = torch.Generator().manual_seed(seed)
    x0, x1 = torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64), torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64)
    xt = interpolate(x0, x1, t)
    torch.testing.assert_close(xt - x0, t * target_velocity(x0, x1), rtol=0, atol=1e-12)
