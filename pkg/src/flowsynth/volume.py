"""Volume data model, NIfTI I/O, intensity normalization and slicing.

Array convention: ``Volume.voxels`` has shape ``(H, W, S)``. The two leading
axes are in-plane and the last axis stacks slices along ``slice_axis``.
``spacing`` is given in the same axis order as ``voxels``.

On disk, volumes are stored in RAS+ order with a diagonal affine. The
slice axis is recorded in the header ``descrip`` field so that a
save/load round trip restores the in-memory axis order exactly.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np

from .errors import DataError

SLICE_AXES = ("axial", "coronal", "sagittal")
# RAS axis index that each stacking direction runs along.
_RAS_AXIS = {"sagittal": 0, "coronal": 1, "axial": 2}
_DESCRIP_PREFIX = "flowsynth:slice_axis="


def _check_axis(slice_axis: str) -> str:
    if slice_axis not in SLICE_AXES:
        raise DataError(f"slice_axis must be one of {SLICE_AXES}, got {slice_axis!r}")
    return slice_axis


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    slice_axis: str = "coronal"

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise DataError(f"non-3D data: volume must be 3D, got shape {vox.shape}")
        if min(vox.shape) < 1:
            raise DataError(f"empty volume dimension in shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise DataError("volume contains non-finite voxels")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        _check_axis(self.slice_axis)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[2]

    def with_voxels(self, voxels: np.ndarray) -> "Volume":
        return Volume(voxels, self.spacing, self.slice_axis)


@dataclass(frozen=True)
class Mask:
    voxels: np.ndarray = field(repr=False)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise DataError(f"non-3D data: mask must be 3D, got shape {vox.shape}")
        if not np.all(np.isin(vox, (0, 1))):
            raise DataError("mask values must be 0 or 1")
        object.__setattr__(self, "voxels", vox.astype(bool))

    @property
    def shape(self):
        return self.voxels.shape

    def check_companion(self, volume: Volume) -> None:
        if self.shape != volume.shape:
            raise DataError(f"mask shape {self.shape} != volume shape {volume.shape}")


def _to_ras_order(voxels: np.ndarray, spacing, slice_axis):
    # in-memory (inplane0, inplane1, slice) -> RAS axis order
    target = _RAS_AXIS[slice_axis]
    arr = np.moveaxis(voxels, 2, target)
    sp = list(spacing[:2])
    sp.insert(target, spacing[2])
    return arr, tuple(sp)


def save_volume(volume: Volume, path: str | os.PathLike) -> Path:
    """Write ``volume`` as float32 NIfTI-1 (``.nii`` or ``.nii.gz``), atomically."""
    from .io_utils import atomic_path

    path = Path(path)
    arr, sp = _to_ras_order(volume.voxels.astype(np.float32), volume.spacing, volume.slice_axis)
    img = nib.Nifti1Image(np.ascontiguousarray(arr), np.diag([*sp, 1.0]))
    img.header.set_data_dtype(np.float32)
    img.header["descrip"] = (_DESCRIP_PREFIX + volume.slice_axis).encode()
    img.header.set_xyzt_units("mm")
    with atomic_path(path) as tmp:
        nib.save(img, str(tmp))
    return path


def save_mask(mask: Mask, path: str | os.PathLike, spacing=(1.0, 1.0, 1.0), slice_axis="coronal") -> Path:
    return save_volume(Volume(mask.voxels.astype(np.float32), spacing, slice_axis), path)


def load_volume(path: str | os.PathLike, slice_axis: str | None = None) -> Volume:
    """Read a NIfTI-1 file into a canonical-orientation :class:`Volume`.

    The image is reoriented to the closest RAS+ orientation and the axis
    named by ``slice_axis`` is moved last. When ``slice_axis`` is None the
    value stored by :func:`save_volume` is used, falling back to coronal.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise DataError(f"malformed header in {path}: {exc}") from exc
    if len(img.shape) != 3:
        raise DataError(f"non-3D data: {path} has shape {img.shape}")
    if slice_axis is None:
        descrip = bytes(img.header.get("descrip", b"")).split(b"\x00")[0].decode(errors="ignore")
        if descrip.startswith(_DESCRIP_PREFIX):
            slice_axis = descrip[len(_DESCRIP_PREFIX):]
        else:
            slice_axis = "coronal"
    _check_axis(slice_axis)
    img = nib.as_closest_canonical(img)
    try:
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:
        raise DataError(f"could not read voxel data from {path}: {exc}") from exc
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    target = _RAS_AXIS[slice_axis]
    voxels = np.moveaxis(data, target, 2)
    sp = [z for i, z in enumerate(zooms) if i != target] + [zooms[target]]
    return Volume(np.ascontiguousarray(voxels), tuple(sp), slice_axis)


def load_mask(path: str | os.PathLike, slice_axis: str | None = None) -> Mask:
    vol = load_volume(path, slice_axis)
    return Mask((vol.voxels > 0.5).astype(np.uint8))


def normalize_intensity(volume: Volume, p_high: float = 99.5) -> Volume:
    """Divide by the ``p_high`` percentile and clip to [0, 1].

    Volumes whose percentile is not positive fall back to the maximum; a
    volume with no positive values maps to zeros.
    """
    if not 0 < p_high <= 100:
        raise DataError(f"p_high must lie in (0, 100], got {p_high}")
    vox = volume.voxels.astype(np.float64)
    scale = np.percentile(vox, p_high)
    if scale <= 0:
        scale = vox.max()
    if scale <= 0:
        return volume.with_voxels(np.zeros_like(volume.voxels, dtype=np.float32))
    out = np.clip(vox / scale, 0.0, 1.0).astype(np.float32)
    return volume.with_voxels(out)


def _fit_axis(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    size = arr.shape[axis]
    diff = target - size
    if diff == 0:
        return arr
    if diff > 0:
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (diff // 2, diff - diff // 2)
        return np.pad(arr, pad)
    excess = -diff
    start = excess // 2
    index = [slice(None)] * arr.ndim
    index[axis] = slice(start, start + target)
    return arr[tuple(index)]


def crop_or_pad(volume: Volume, target_in_plane: tuple[int, int]) -> Volume:
    """Center-crop or zero-pad the in-plane dimensions to ``target_in_plane``.

    For odd size differences the extra voxel goes to the high-index side,
    both for padding and for cropping.
    """
    h, w = (int(x) for x in target_in_plane)
    if h < 1 or w < 1:
        raise DataError(f"target in-plane size must be >= 1, got {target_in_plane}")
    arr = _fit_axis(volume.voxels, 0, h)
    arr = _fit_axis(arr, 1, w)
    return volume.with_voxels(np.ascontiguousarray(arr))


def random_crop_offsets(shape: Sequence[int], size: Sequence[int], rng: np.random.Generator) -> tuple[int, int]:
    H, W = shape[:2]
    h, w = size
    if h > H or w > W:
        raise DataError(f"crop size {tuple(size)} exceeds slice dims {(H, W)}")
    return int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))


def random_crop(slice_: np.ndarray, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Crop a window of ``size`` at a uniformly drawn offset."""
    oy, ox = random_crop_offsets(slice_.shape, size, rng)
    return slice_[oy:oy + size[0], ox:ox + size[1]]


def extract_slices(volume: Volume) -> list[np.ndarray]:
    return [volume.voxels[:, :, i] for i in range(volume.n_slices)]


def assemble_volume(slices: Sequence[np.ndarray], spacing=(1.0, 1.0, 1.0), slice_axis: str = "coronal") -> Volume:
    if len(slices) == 0:
        raise DataError("cannot assemble a volume from an empty slice list")
    shapes = {np.shape(s) for s in slices}
    if len(shapes) != 1:
        raise DataError(f"heterogeneous slice shapes: {sorted(shapes)}")
    return Volume(np.stack([np.asarray(s) for s in slices], axis=-1), spacing, slice_axis)
