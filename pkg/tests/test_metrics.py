import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage
from skimage.metrics import structural_similarity

from flowsynth.errors import DataError
from flowsynth.metrics import MetricParams, MetricReport, flicker_index, fsim, metrics_report, ssim, ssim_map
from flowsynth.phantom import make_pair
from flowsynth.volume import Mask, Volume

from fsim_reference import fsim_reference


def random_pair(seed, n=128):
    g = np.random.default_rng(seed)
    a = ndimage.gaussian_filter(g.random((n, n)), 1.5)
    b = np.clip(a + 0.05 * ndimage.gaussian_filter(g.standard_normal((n, n)), 1.0), 0, None)
    return a, b


def test_ssim_identical_and_constant_closed_form():
    x = np.random.default_rng(0).random((32, 32))
    assert ssim(x, x, data_range=1.0) == pytest.approx(1.0, abs=1e-6)
    a, b = np.full((32, 32), 0.5), np.full((32, 32), 0.25)
    expected = (2 * 0.5 * 0.25 + 1e-4) / (0.5 ** 2 + 0.25 ** 2 + 1e-4)
    assert ssim(a, b, data_range=1.0) == pytest.approx(expected, abs=1e-10)
    assert expected == pytest.approx(0.8001, abs=1e-4)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    a, b = random_pair(seed, 48)
    ours = ssim(a, b, data_range=1.0)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ours == pytest.approx(ref, abs=1e-10)


def test_ssim_errors_and_range_default():
    with pytest.raises(DataError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(DataError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), data_range=1.0)
    with pytest.raises(DataError):
        ssim(np.ones((16, 16)), np.ones((16, 16)))  # zero range from reference
    a, b = random_pair(3, 32)
    assert ssim(a, b) == ssim(a, b, data_range=float(b.max() - b.min()))
    assert ssim(a, b, MetricParams(dynamic_range=2.0)) == ssim(a, b, data_range=2.0)


def test_fsim_identity_symmetry_and_reference():
    a, b = random_pair(11)
    assert fsim(a, a, data_range=1.0) == pytest.approx(1.0, abs=1e-6)
    assert fsim(a, b, data_range=1.0) == pytest.approx(fsim(b, a, data_range=1.0), abs=1e-12)
    assert fsim(a, b, data_range=1.0) == pytest.approx(fsim_reference(a, b, 1.0), abs=1e-4)
    odd_a, odd_b = random_pair(12, 37)
    assert fsim(odd_a, odd_b, data_range=1.0) == pytest.approx(fsim_reference(odd_a, odd_b, 1.0), abs=1e-4)


def test_fsim_flat_images_and_small_error():
    flat = np.full((32, 32), 0.3)
    assert fsim(flat, flat, data_range=1.0) == pytest.approx(1.0)
    with pytest.raises(DataError, match="too small"):
        fsim(np.zeros((8, 8)), np.zeros((8, 8)), data_range=1.0)


def test_fsim_decreases_with_distortion():
    a, _ = random_pair(4)
    g = np.random.default_rng(4)
    mild = a + 0.02 * g.standard_normal(a.shape)
    strong = a + 0.2 * g.standard_normal(a.shape)
    assert fsim(a, mild, data_range=1.0) > fsim(a, strong, data_range=1.0)


def test_flicker_hand_cases():
    assert flicker_index(np.full((4, 4, 5), 3.0)) == 0.0
    alt = np.stack([np.full((3, 3), v) for v in (0, 2, 0, 2)], axis=-1)
    assert abs(flicker_index(alt) - 2.0) < 1e-12
    stack = [np.full((2, 2), v) for v in (1.0, 1.0, 2.0)]
    assert abs(flicker_index(stack) - 0.375) < 1e-12
    assert flicker_index(Volume(alt)) == flicker_index(alt)


def test_flicker_errors():
    with pytest.raises(DataError):
        flicker_index(np.ones((3, 3, 1)))
    with pytest.raises(DataError):
        flicker_index(np.zeros((3, 3, 4)))


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_flicker_scale_invariance(c):
    x = np.random.default_rng(0).random((8, 8, 6)) + 0.1
    assert flicker_index(c * x) == pytest.approx(flicker_index(x), rel=1e-12)


def test_flicker_increases_with_slice_noise():
    smooth = make_pair(0, (32, 32, 20)).target.voxels.astype(np.float64) + 0.1
    base = flicker_index(smooth)
    for seed in range(20):
        g = np.random.default_rng(seed)
        noisy = smooth + 0.05 * g.standard_normal((1, 1, smooth.shape[2]))
        assert flicker_index(noisy) > base


def test_metrics_report_identity_and_errors():
    p = make_pair(1, (32, 32, 20))
    rep = metrics_report(p.target, p.target, p.mask, subject_id="s1")
    assert rep.ssim == pytest.approx(1.0, abs=1e-9) and rep.fsim == pytest.approx(1.0, abs=1e-9)
    assert rep.subject_id == "s1" and rep.flicker_index > 0
    with pytest.raises(DataError, match="empty mask"):
        metrics_report(p.target, p.target, Mask(np.zeros(p.target.shape, np.uint8)))
    with pytest.raises(DataError):
        metrics_report(p.source, Volume(np.zeros((32, 32, 19))), p.mask)


def test_metrics_report_ignores_outside_mask():
    p = make_pair(2, (32, 32, 20))
    m = p.mask.voxels.astype(bool)
    vox = p.source.voxels.copy()
    vox[~m] = 5.0
    a = metrics_report(p.source, p.target, p.mask)
    b = metrics_report(p.source.with_voxels(vox), p.target, p.mask)
    assert (a.ssim, a.fsim, a.flicker_index) == (b.ssim, b.fsim, b.flicker_index)


def test_metrics_report_small_mask_box_widened():
    v = Volume(np.random.default_rng(0).random((32, 32, 4)).astype(np.float32))
    mvox = np.zeros((32, 32, 4), np.uint8)
    mvox[14:18, 14:18, :] = 1
    rep = metrics_report(v, v, Mask(mvox))
    assert rep.ssim == pytest.approx(1.0)


def test_report_row():
    r = MetricReport("s", 0.5, 0.25, 0.125, "")
    assert MetricReport.CSV_HEADER == "subject_id,ssim,fsim,flicker_index"
    assert r.csv_row() == "s,0.5,0.25,0.125"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_ssim_bounds_and_symmetry_property(seed):
    g = np.random.default_rng(seed)
    a, b = g.random((16, 16)), g.random((16, 16))
    smap = ssim_map(a, b, data_range=1.0)
    assert np.all(smap >= -1 - 1e-12) and np.all(smap <= 1 + 1e-12)
    assert ssim(a, b, data_range=1.0) == pytest.approx(ssim(b, a, data_range=1.0), abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 100_000))
def test_fsim_bounds_and_symmetry_property(seed):
    a, b = random_pair(seed, 24)
    v = fsim(a, b, data_range=1.0)
    assert 0 <= v <= 1 + 1e-12
    assert v == pytest.approx(fsim(b, a, data_range=1.0), abs=1e-12)
