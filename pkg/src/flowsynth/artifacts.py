"""Acquisition-artifact augmentation for conditioning inputs.

All transforms accept a 2D slice ``(H, W)`` or a stack ``(H, W, S)`` as a
numpy array (or a :class:`~flowsynth.volume.Volume`, returned as one) and
treat the two leading axes as the image plane. k-space operations run per
slice.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import ndimage

from .errors import DataError
from .volume import Volume


@dataclass(frozen=True)
class AugmentPolicy:
    ghost_prob: float = 0.2
    motion_prob: float = 0.2
    bias_prob: float = 0.2
    noise_prob: float = 0.2
    ghost_intensity: float = 0.3
    max_ghosts: int = 8
    motion_max_rot: float = 5.0
    motion_max_trans: float = 3.0
    motion_transforms: int = 2
    bias_order: int = 3
    bias_coeff_range: float = 0.3
    noise_std: float = 0.05

    def __post_init__(self):
        for name in ("ghost_prob", "motion_prob", "bias_prob", "noise_prob", "ghost_intensity"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {value}")
        if self.noise_std < 0:
            raise DataError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.bias_order < 0:
            raise DataError(f"bias_order must be >= 0, got {self.bias_order}")
        if self.max_ghosts < 2 or self.motion_transforms < 1:
            raise DataError("max_ghosts must be >= 2 and motion_transforms >= 1")


def _unwrap(data):
    if isinstance(data, Volume):
        return data.voxels, data
    arr = np.asarray(data)
    if arr.ndim not in (2, 3):
        raise DataError(f"expected a 2D slice or 3D stack, got shape {arr.shape}")
    return arr, None


def _wrap(arr, like: Volume | None, dtype):
    arr = arr.astype(dtype, copy=False)
    return like.with_voxels(arr) if like is not None else arr


def _out_dtype(arr):
    return arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64


def add_ghosting(data, num_ghosts: int, intensity: float, axis: int = 0, rng=None):
    """Attenuate every ``num_ghosts``-th k-space line along ``axis``.

    A comb of period ``n`` in k-space replicates the image at offsets of
    ``FOV / n``. ``rng`` is accepted for a uniform transform signature; the
    transform itself is deterministic.
    """
    arr, like = _unwrap(data)
    if num_ghosts < 1:
        raise DataError(f"num_ghosts must be >= 1, got {num_ghosts}")
    if not 0.0 <= intensity <= 1.0:
        raise DataError(f"ghost intensity must lie in [0, 1], got {intensity}")
    if axis not in (0, 1):
        raise DataError(f"ghosting axis must be an in-plane axis (0 or 1), got {axis}")
    if intensity == 0:
        return _wrap(arr.copy(), like, _out_dtype(arr))
    k = np.fft.fft(arr.astype(np.float64), axis=axis)
    weights = np.ones(arr.shape[axis])
    weights[::num_ghosts] = 1.0 - intensity
    shape = [1] * arr.ndim
    shape[axis] = -1
    out = np.fft.ifft(k * weights.reshape(shape), axis=axis).real
    return _wrap(out, like, _out_dtype(arr))


def _rigid_resample(img2d: np.ndarray, rot_deg: float, trans) -> np.ndarray:
    if rot_deg == 0 and trans[0] == 0 and trans[1] == 0:
        return img2d
    theta = np.deg2rad(rot_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    center = (np.array(img2d.shape) - 1) / 2.0
    # output coordinate o samples input at R^-1 (o - c - t) + c
    inv = rot.T
    offset = center - inv @ (center + np.asarray(trans, dtype=np.float64))
    return ndimage.affine_transform(img2d, inv, offset=offset, order=1, mode="constant", cval=0.0)


def motion_from_transforms(data, transforms, boundaries, axis: int = 0):
    """Composite k-space from rigidly transformed copies.

    Parameters
    ----------
    transforms : sequence of (rotation_degrees, (dy, dx))
    boundaries : increasing k-space line indices, ``len(transforms) - 1`` of them.
        Lines ``[b_{i-1}, b_i)`` along ``axis`` are taken from copy ``i``.
    """
    arr, like = _unwrap(data)
    stack = arr[..., None] if arr.ndim == 2 else arr
    n_lines = stack.shape[axis]
    edges = [0, *[int(b) for b in boundaries], n_lines]
    if len(edges) != len(transforms) + 1 or any(b > a for a, b in zip(edges[1:], edges[:-1])):
        raise DataError("boundaries must be non-decreasing and number len(transforms) - 1")
    out = np.empty(stack.shape, dtype=np.float64)
    for s in range(stack.shape[2]):
        img = stack[:, :, s].astype(np.float64)
        composite = np.zeros(img.shape, dtype=np.complex128)
        for (rot, trans), lo, hi in zip(transforms, edges[:-1], edges[1:]):
            if hi <= lo:
                continue
            k = np.fft.fft2(_rigid_resample(img, rot, trans))
            index = [slice(None), slice(None)]
            index[axis] = slice(lo, hi)
            composite[tuple(index)] = k[tuple(index)]
        out[:, :, s] = np.fft.ifft2(composite).real
    if arr.ndim == 2:
        out = out[:, :, 0]
    return _wrap(out, like, _out_dtype(arr))


def add_motion(data, num_transforms: int, max_rot: float, max_trans: float, rng: np.random.Generator,
               axis: int = 0):
    """Simulate inter-segment rigid motion during k-space filling.

    ``num_transforms`` in-plane rigid transforms are drawn (rotation
    uniform in ``±max_rot`` degrees, translation uniform in ``±max_trans``
    voxels per axis) and each fills one contiguous block of k-space lines
    along ``axis``; block boundaries are uniform random cut points.
    """
    arr, like = _unwrap(data)
    if num_transforms < 1:
        raise DataError(f"num_transforms must be >= 1, got {num_transforms}")
    rots = rng.uniform(-max_rot, max_rot, size=num_transforms)
    trans = rng.uniform(-max_trans, max_trans, size=(num_transforms, 2))
    cuts = np.sort(rng.integers(0, arr.shape[axis] + 1, size=num_transforms - 1))
    if max_rot == 0 and max_trans == 0:
        return _wrap(arr.copy(), like, _out_dtype(arr))
    transforms = [(float(r), (float(t[0]), float(t[1]))) for r, t in zip(rots, trans)]
    return motion_from_transforms(data, transforms, cuts, axis=axis)


def _monomials(order: int, ndim: int):
    return [e for e in product(range(order + 1), repeat=ndim) if sum(e) <= order]


def bias_field(shape, order: int, coefficients) -> np.ndarray:
    """exp of a polynomial in coordinates normalized to [-1, 1].

    ``coefficients`` follow the order of ``product(range(order+1), repeat=ndim)``
    filtered to total degree <= ``order``.
    """
    ndim = len(shape)
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    terms = _monomials(order, ndim)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (len(terms),):
        raise DataError(f"expected {len(terms)} coefficients for order {order} in {ndim}D")
    poly = np.zeros(shape, dtype=np.float64)
    for c, exps in zip(coefficients, terms):
        term = np.full(shape, c)
        for g, e in zip(grids, exps):
            if e:
                term = term * g ** e
        poly += term
    return np.exp(poly)


def add_bias_field(data, order: int, coeff_range: float, rng: np.random.Generator):
    arr, like = _unwrap(data)
    if order < 0:
        raise DataError(f"bias order must be >= 0, got {order}")
    n_terms = len(_monomials(order, arr.ndim))
    coeffs = rng.uniform(-coeff_range, coeff_range, size=n_terms)
    if coeff_range == 0:
        return _wrap(arr.copy(), like, _out_dtype(arr))
    return _wrap(arr * bias_field(arr.shape, order, coeffs), like, _out_dtype(arr))


def add_noise(data, std: float, rng: np.random.Generator):
    arr, like = _unwrap(data)
    if std < 0:
        raise DataError(f"noise std must be >= 0, got {std}")
    noise = rng.normal(0.0, std, size=arr.shape) if std > 0 else 0.0
    return _wrap(arr + noise, like, _out_dtype(arr))


def augment(data, policy: AugmentPolicy, rng: np.random.Generator):
    """Apply ghosting, motion, bias field and noise, each with its probability.

    The order is fixed. Every draw is made whether or not a transform
    fires, so the random stream consumed per call does not depend on the
    outcome of earlier coin flips. Output is clipped to [0, 2].
    """
    arr, like = _unwrap(data)
    dtype = _out_dtype(arr)
    out = arr.astype(np.float64)
    fire = rng.random(4) < np.array([policy.ghost_prob, policy.motion_prob, policy.bias_prob, policy.noise_prob])
    child = rng.spawn(4)
    if fire[0]:
        n = int(child[0].integers(2, policy.max_ghosts + 1))
        axis = int(child[0].integers(0, 2))
        out = add_ghosting(out, n, policy.ghost_intensity, axis=axis)
    if fire[1]:
        out = add_motion(out, policy.motion_transforms, policy.motion_max_rot, policy.motion_max_trans, child[1])
    if fire[2]:
        out = add_bias_field(out, policy.bias_order, policy.bias_coeff_range, child[2])
    if fire[3]:
        out = add_noise(out, policy.noise_std, child[3])
    if fire.any():
        out = np.clip(out, 0.0, 2.0)
    return _wrap(out, like, dtype)
