"""Deterministic paired-contrast phantoms with shared anatomy.

A phantom is a label map (five bulk tissue classes plus a three-layer
concentric "laminar" body inside an ellipsoidal head) with a smooth
texture field. Two contrast functions render it with different class
orderings; the source rendering is additionally resolution-degraded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume import Mask, Volume

N_BULK = 5
LAMINAR_LABELS = (6, 7, 8)  # outer, middle, core
N_LABELS = N_BULK + len(LAMINAR_LABELS)
MIN_SIZE = 16
DEFAULT_SIZE = (64, 64, 40)
DEFAULT_SPACING = (0.4, 0.4, 1.5)

# Per-label base intensity, index 0 is background.
# Bulk pairs (1,2) and (4,5) swap order between the contrasts, as do
# laminar (6,7) and (7,8); the overall relation stays positively correlated.
_BASE = {
    "source_like": np.array([0.0, 0.30, 0.42, 0.56, 0.70, 0.82, 0.48, 0.64, 0.88]),
    "target_like": np.array([0.0, 0.40, 0.26, 0.55, 0.86, 0.72, 0.80, 0.38, 0.62]),
}
_TEXTURE_AMPLITUDE = {"source_like": 0.10, "target_like": 0.14}


@dataclass(frozen=True)
class TissueMap:
    labels: np.ndarray
    texture: np.ndarray


@dataclass(frozen=True)
class PhantomPair:
    source: Volume
    target: Volume
    mask: Mask
    seed: int


def _smooth_field(rng: np.random.Generator, size, sigma) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(size), sigma, mode="wrap")
    field -= field.mean()
    sd = field.std()
    return field / sd if sd > 0 else field


def _grid(size):
    h, w, d = size
    return np.meshgrid(
        np.linspace(-1, 1, h), np.linspace(-1, 1, w), np.linspace(-1, 1, d), indexing="ij"
    )


def generate_tissue_map(seed: int, size=DEFAULT_SIZE) -> TissueMap:
    """Build a label map and texture deterministically from ``seed``.

    Raises
    ------
    DataError
        If any dimension is below 16 voxels.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < MIN_SIZE:
        raise DataError(f"phantom size must be 3 dims >= {MIN_SIZE} to host the laminar body, got {size}")
    rng = np.random.default_rng(seed)
    x, y, z = _grid(size)

    # head: slightly wobbly ellipsoid
    head_r = np.sqrt((x / 0.92) ** 2 + (y / 0.88) ** 2 + (z / 1.3) ** 2)
    head_r = head_r + 0.05 * _smooth_field(rng, size, min(size) / 6)
    head = head_r < 1.0

    bulk_field = _smooth_field(rng, size, min(size) / 7)
    labels = np.zeros(size, dtype=np.int16)
    inside = bulk_field[head]
    edges = np.quantile(inside, np.linspace(0, 1, N_BULK + 1)[1:-1])
    labels[head] = 1 + np.searchsorted(edges, inside)

    # laminar body: concentric shells around a jittered center
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    ax, ay = rng.uniform(0.34, 0.44, size=2)
    az = rng.uniform(0.8, 1.0)
    r = np.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + (z / az) ** 2)
    r = r + 0.06 * _smooth_field(rng, size, min(size) / 8)
    shells = ((r < 1.0, LAMINAR_LABELS[0]), (r < 0.72, LAMINAR_LABELS[1]), (r < 0.45, LAMINAR_LABELS[2]))
    for region, label in shells:
        labels[region & head] = label

    texture = _smooth_field(rng, size, 1.5)
    texture = (texture - texture.min()) / max(np.ptp(texture), 1e-12)
    texture[~head] = 0.0
    return TissueMap(labels=labels, texture=texture)


def render_contrast(tissue: TissueMap, which: str, spacing=DEFAULT_SPACING) -> Volume:
    if which not in _BASE:
        raise DataError(f"which must be one of {tuple(_BASE)}, got {which!r}")
    img = _BASE[which][tissue.labels] + _TEXTURE_AMPLITUDE[which] * tissue.texture
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Volume(img, spacing, "coronal")


def degrade_resolution(volume: Volume, factor: int) -> Volume:
    """Block-average in-plane by ``factor`` then linearly upsample back."""
    factor = int(factor)
    if factor < 1:
        raise DataError(f"degrade factor must be >= 1, got {factor}")
    if factor == 1:
        return volume
    h, w, d = volume.shape
    if h % factor or w % factor:
        raise DataError(f"in-plane dims {(h, w)} not divisible by factor {factor}")
    vox = volume.voxels.astype(np.float64)
    low = vox.reshape(h // factor, factor, w // factor, factor, d).mean(axis=(1, 3))
    up = ndimage.zoom(low, (factor, factor, 1), order=1, mode="nearest", grid_mode=True)
    return volume.with_voxels(up.astype(np.float32))


def make_pair(seed: int, size=DEFAULT_SIZE, degrade_factor: int = 2) -> PhantomPair:
    tissue = generate_tissue_map(seed, size)
    source = degrade_resolution(render_contrast(tissue, "source_like"), degrade_factor)
    target = render_contrast(tissue, "target_like")
    mask = Mask((tissue.labels != 0).astype(np.uint8))
    return PhantomPair(source=source, target=target, mask=mask, seed=int(seed))
