"""Full-reference fidelity (SSIM, FSIM) and inter-slice flicker.

SSIM uses an 11-tap Gaussian window (sigma 1.5) with population
covariances and averages the map over the region not touched by the
window border. FSIM follows the reference FeatureSIM code: log-Gabor phase
congruency (4 scales x 4 orientations, Kovesi noise compensation) and
Scharr gradient magnitude, combined and pooled by ``max(PC1, PC2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .errors import DataError
from .volume import Mask, Volume


@dataclass(frozen=True)
class MetricParams:
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    K1: float = 0.01
    K2: float = 0.03
    dynamic_range: float | None = None
    fsim_scales: int = 4
    fsim_orientations: int = 4
    fsim_T1: float = 0.85
    fsim_T2: float = 160.0

    def __post_init__(self):
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise DataError("ssim_window must be a positive odd integer")
        if self.K1 <= 0 or self.K2 <= 0:
            raise DataError("K1 and K2 must be positive")
        if self.fsim_scales < 1 or self.fsim_orientations < 1:
            raise DataError("fsim_scales and fsim_orientations must be >= 1")


@dataclass
class MetricReport:
    subject_id: str
    ssim: float
    fsim: float
    flicker_index: float
    notes: str = ""

    CSV_HEADER = "subject_id,ssim,fsim,flicker_index"

    def csv_row(self) -> str:
        return f"{self.subject_id},{self.ssim!r},{self.fsim!r},{self.flicker_index!r}"


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise DataError(f"expected 2D images, got {a.ndim}D")
    return a, b


def _range(b, params: MetricParams, data_range):
    L = data_range if data_range is not None else params.dynamic_range
    if L is None:
        L = float(b.max() - b.min())
    if not L > 0:
        raise DataError("dynamic range must be > 0")
    return float(L)


def ssim_map(a, b, params: MetricParams = MetricParams(), data_range: float | None = None) -> np.ndarray:
    a, b = _pair(a, b)
    radius = (params.ssim_window - 1) // 2
    if min(a.shape) < params.ssim_window:
        raise DataError(f"image {a.shape} smaller than the {params.ssim_window}-pixel SSIM window")
    L = _range(b, params, data_range)
    c1, c2 = (params.K1 * L) ** 2, (params.K2 * L) ** 2

    def blur(x):
        return ndimage.gaussian_filter(x, params.ssim_sigma, truncate=radius / params.ssim_sigma, mode="reflect")

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    smap = num / den
    return smap[radius:smap.shape[0] - radius, radius:smap.shape[1] - radius]


def ssim(a, b, params: MetricParams = MetricParams(), data_range: float | None = None) -> float:
    """Mean local SSIM. ``data_range`` overrides ``params.dynamic_range``;
    when both are None the range of ``b`` is used."""
    return float(ssim_map(a, b, params, data_range).mean())


# -- FSIM ----------------------------------------------------------------------

_MIN_WAVELENGTH = 6.0
_MULT = 2.0
_SIGMA_ON_F = 0.55
_D_THETA_ON_SIGMA = 1.2
_NOISE_K = 2.0
_EPS = 1e-4
FSIM_MIN_SIZE = 12
_SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]]) / 16.0
_SCHARR_Y = np.array([[3, 10, 3], [0, 0, 0], [-3, -10, -3]]) / 16.0


def _freq_grid(n: int) -> np.ndarray:
    if n % 2:
        return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
    return np.arange(-n / 2, n / 2) / n


def _lowpass(rows: int, cols: int, cutoff: float = 0.45, order: int = 15) -> np.ndarray:
    x, y = np.meshgrid(_freq_grid(cols), _freq_grid(rows))
    radius = np.sqrt(x ** 2 + y ** 2)
    return np.fft.ifftshift(1.0 / (1.0 + (radius / cutoff) ** (2 * order)))


def phase_congruency(img: np.ndarray, n_scales: int = 4, n_orient: int = 4) -> np.ndarray:
    """Kovesi phase congruency as used by FSIM (sum over orientations)."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    spectrum = np.fft.fft2(img)
    x, y = np.meshgrid(_freq_grid(cols), _freq_grid(rows))
    radius = np.fft.ifftshift(np.sqrt(x ** 2 + y ** 2))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lp = _lowpass(rows, cols)

    log_gabor = []
    for s in range(n_scales):
        fo = 1.0 / (_MIN_WAVELENGTH * _MULT ** s)
        g = np.exp(-(np.log(radius / fo)) ** 2 / (2 * math.log(_SIGMA_ON_F) ** 2)) * lp
        g[0, 0] = 0.0
        log_gabor.append(g)

    theta_sigma = math.pi / n_orient / _D_THETA_ON_SIGMA
    energy_all = np.zeros((rows, cols))
    amp_all = np.zeros((rows, cols))
    for o in range(n_orient):
        angle = o * math.pi / n_orient
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        spread = np.exp(-np.arctan2(ds, dc) ** 2 / (2 * theta_sigma ** 2))

        responses, spatial = [], []
        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        em_n = 0.0
        for s in range(n_scales):
            filt = log_gabor[s] * spread
            spatial.append(np.real(np.fft.ifft2(filt)) * math.sqrt(rows * cols))
            eo = np.fft.ifft2(spectrum * filt)
            responses.append(eo)
            sum_an += np.abs(eo)
            sum_e += eo.real
            sum_o += eo.imag
            if s == 0:
                em_n = float(np.sum(filt ** 2))
        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + _EPS
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for eo in responses:
            e, od = eo.real, eo.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        # noise threshold from the smallest-scale response (Rayleigh model)
        median_e2n = np.median(np.abs(responses[0]) ** 2)
        noise_power = (-median_e2n / math.log(0.5)) / em_n
        est_sum_an2 = sum(f ** 2 for f in spatial)
        est_sum_aiaj = np.zeros((rows, cols))
        for i in range(n_scales - 1):
            for j in range(i + 1, n_scales):
                est_sum_aiaj += spatial[i] * spatial[j]
        noise_energy2 = 2 * noise_power * est_sum_an2.sum() + 4 * noise_power * est_sum_aiaj.sum()
        tau = math.sqrt(noise_energy2 / 2)
        threshold = (tau * math.sqrt(math.pi / 2) + _NOISE_K * math.sqrt((2 - math.pi / 2) * tau ** 2)) / 1.7
        energy_all += np.maximum(energy - threshold, 0.0)
        amp_all += sum_an
    out = np.zeros_like(energy_all)
    np.divide(energy_all, amp_all, out=out, where=amp_all > 0)
    return out


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gx = signal.convolve2d(img, _SCHARR_X, mode="same")
    gy = signal.convolve2d(img, _SCHARR_Y, mode="same")
    return np.sqrt(gx ** 2 + gy ** 2)


def fsim(a, b, params: MetricParams = MetricParams(), data_range: float | None = None) -> float:
    """Feature similarity of two grayscale images.

    Both images are scaled by ``255 / dynamic_range`` so the published
    stability constants apply. Images larger than 256 pixels on the short
    side are box-filtered and decimated as in the reference procedure.
    """
    a, b = _pair(a, b)
    if min(a.shape) < FSIM_MIN_SIZE:
        raise DataError(f"image {a.shape} too small for the FSIM filter bank (min {FSIM_MIN_SIZE})")
    L = _range(b, params, data_range)
    a = a * (255.0 / L)
    b = b * (255.0 / L)
    f = max(1, int(np.floor(min(a.shape) / 256 + 0.5)))  # half away from zero, as MATLAB round
    if f > 1:
        kernel = np.full((f, f), 1.0 / f ** 2)
        a = signal.convolve2d(a, kernel, mode="same")[::f, ::f]
        b = signal.convolve2d(b, kernel, mode="same")[::f, ::f]
    pc1 = phase_congruency(a, params.fsim_scales, params.fsim_orientations)
    pc2 = phase_congruency(b, params.fsim_scales, params.fsim_orientations)
    g1, g2 = gradient_magnitude(a), gradient_magnitude(b)
    s_pc = (2 * pc1 * pc2 + params.fsim_T1) / (pc1 ** 2 + pc2 ** 2 + params.fsim_T1)
    s_g = (2 * g1 * g2 + params.fsim_T2) / (g1 ** 2 + g2 ** 2 + params.fsim_T2)
    pc_m = np.maximum(pc1, pc2)
    denom = pc_m.sum()
    if denom <= 0:
        # no phase structure in either image: similarity is the gradient term alone
        return float(np.mean(s_g))
    return float(np.sum(s_pc * s_g * pc_m) / denom)


# -- inter-slice continuity ------------------------------------------------------

def flicker_index(stack) -> float:
    """Mean absolute adjacent-slice difference over the stack mean.

    ``stack`` is a sequence of equally shaped 2D slices or an ``(H, W, S)``
    array with slices on the last axis.
    """
    if isinstance(stack, Volume):
        arr = stack.voxels
    elif isinstance(stack, np.ndarray):
        arr = stack
    else:
        arr = np.stack([np.asarray(s) for s in stack], axis=-1)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] < 2:
        raise DataError("flicker index needs at least 2 slices")
    mu = arr.mean()
    if mu == 0:
        raise DataError("flicker index undefined for a zero-mean stack")
    return float(np.abs(np.diff(arr, axis=-1)).mean() / mu)


def _bbox(mask: np.ndarray, min_in_plane: int = 0):
    """Bounding box of ``mask``, widened in-plane to ``min_in_plane`` where the grid allows."""
    idx = np.nonzero(mask)
    box = []
    for axis, i in enumerate(idx):
        lo, hi = int(i.min()), int(i.max()) + 1
        if axis < 2 and hi - lo < min_in_plane:
            size = min(min_in_plane, mask.shape[axis])
            lo = max(0, min(lo - (size - (hi - lo)) // 2, mask.shape[axis] - size))
            hi = lo + size
        box.append(slice(lo, hi))
    return tuple(box)


def metrics_report(pred: Volume, ref: Volume, mask: Mask, params: MetricParams = MetricParams(),
                   subject_id: str = "") -> MetricReport:
    """Masked SSIM/FSIM (mean over slices touching the mask) and flicker index.

    Both volumes are zeroed outside ``mask`` and cropped to the mask's
    bounding box; the flicker index is taken on the masked prediction.
    """
    if pred.shape != ref.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    mask.check_companion(ref)
    m = mask.voxels
    if not m.any():
        raise DataError("empty mask")
    box = _bbox(m, max(params.ssim_window, FSIM_MIN_SIZE))
    mb = m[box]
    p = np.where(mb, pred.voxels[box], 0.0).astype(np.float64)
    r = np.where(mb, ref.voxels[box], 0.0).astype(np.float64)
    L = params.dynamic_range
    if L is None:
        L = float(ref.voxels[m].max() - ref.voxels[m].min())
    if not L > 0:
        raise DataError("reference has zero dynamic range inside the mask")
    ssims, fsims = [], []
    for i in range(p.shape[2]):
        if not mb[:, :, i].any():
            continue
        ssims.append(ssim(p[:, :, i], r[:, :, i], params, data_range=L))
        fsims.append(fsim(p[:, :, i], r[:, :, i], params, data_range=L))
    notes = f"slices={len(ssims)} box={tuple(s.stop - s.start for s in box)}"
    fi = flicker_index(p) if p.shape[2] >= 2 else float("nan")
    return MetricReport(subject_id, float(np.mean(ssims)), float(np.mean(fsims)), fi, notes)
