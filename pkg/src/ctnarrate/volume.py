"""CT volume loading, resampling, windowing, and axial slicing.

Canonical axis convention
-------------------------
Volumes are reoriented at load time so that voxel index axes (i, j, k) run
along the patient's right (+x), anterior (+y), and superior (+z) directions,
i.e. RAS+. All downstream modules assume this convention. Residual
obliqueness after reorientation is dropped: the grid is modeled as
axis-aligned with ``position = origin + index * spacing``.

Axial slices are rendered in the conventional feet-first view: image top is
anterior, image left is the patient's right. Concretely, for a slice at
index k, ``pixels[row, col] = window(voxels[nx-1-col, ny-1-row, k])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import nifti
from .errors import (
    DegenerateSpacing,
    MalformedHeader,
    SliceOutOfRange,
    UnsupportedDimensionality,
)

HU_MIN = -1024.0
HU_MAX = 3071.0

CANONICAL_ORIENTATION = ("R", "A", "S")

DEFAULT_TARGET_SPACING = (1.0, 1.0, 3.0)


@dataclass(frozen=True)
class WindowPreset:
    """A display window: linear HU ramp of ``width`` centred on ``center``."""

    name: str
    center: float
    width: float

    def __post_init__(self):
        if self.width <= 0:
            raise DegenerateSpacing(f"window {self.name!r} has width {self.width}")


SOFT_TISSUE_WINDOW = WindowPreset("soft_tissue", 40.0, 400.0)
LUNG_WINDOW = WindowPreset("lung", -600.0, 1500.0)
BONE_WINDOW = WindowPreset("bone", 400.0, 1800.0)


@dataclass(frozen=True)
class GrayImage:
    """A 2D intensity image with values in [0, 1], shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"GrayImage needs a 2D array, got ndim={px.ndim}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("GrayImage pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class CtVolume:
    """An immutable 3D grid of Hounsfield units on an axis-aligned RAS grid.

    ``voxels`` is float32 with shape (nx, ny, nz); values are clamped to the
    CT 12-bit range [-1024, 3071] at construction.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    source_id: str = ""
    orientation: tuple[str, str, str] = field(default=CANONICAL_ORIENTATION)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise UnsupportedDimensionality(
                f"expected a 3D volume, got {vox.ndim} axes"
            )
        if any(n < 1 for n in vox.shape):
            raise UnsupportedDimensionality(f"degenerate dims {vox.shape}")
        if any(s <= 0 for s in self.spacing):
            raise DegenerateSpacing(f"spacing must be positive, got {self.spacing}")
        vox = np.nan_to_num(
            vox.astype(np.float32), nan=HU_MIN, posinf=HU_MAX, neginf=HU_MIN
        )
        vox = np.clip(vox, HU_MIN, HU_MAX)
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical size of the grid, counting each voxel as a full cell."""
        return tuple(n * s for n, s in zip(self.dims, self.spacing))


def _orientation_transform(affine: np.ndarray) -> list[tuple[int, int]]:
    """Greedy closest-canonical mapping: input axis j -> (output axis, sign)."""
    directions = affine[:3, :3].astype(float).copy()
    norms = np.linalg.norm(directions, axis=0)
    if np.any(norms == 0):
        raise MalformedHeader("affine has a zero-length axis")
    directions /= norms
    mapping: list[tuple[int, int]] = []
    used: set[int] = set()
    for j in range(3):
        weights = np.abs(directions[:, j])
        order = np.argsort(-weights)
        out_axis = next(int(i) for i in order if int(i) not in used)
        used.add(out_axis)
        sign = 1 if directions[out_axis, j] >= 0 else -1
        mapping.append((out_axis, sign))
    return mapping


def canonicalize(data: np.ndarray, affine: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reorient ``data`` to the RAS+ convention.

    Returns (data, spacing, origin) with any residual obliqueness dropped.
    """
    affine = affine.astype(float).copy()
    mapping = _orientation_transform(affine)
    for j, (_, sign) in enumerate(mapping):
        if sign < 0:
            data = np.flip(data, axis=j)
            affine[:, 3] += affine[:, j] * (data.shape[j] - 1)
            affine[:, j] = -affine[:, j]
    perm = [0, 0, 0]
    for j, (out_axis, _) in enumerate(mapping):
        perm[out_axis] = j
    data = np.transpose(data, perm)
    affine[:, :3] = affine[:, perm]
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    origin = affine[:3, 3]
    return np.ascontiguousarray(data), spacing, origin


def load_volume(path) -> CtVolume:
    """Load a NIfTI-1 CT volume, canonicalize orientation, and clamp HU.

    Trailing singleton dimensions are tolerated (a 64x64x40x1 series is a
    volume); anything else non-3D is rejected.
    """
    data, affine = nifti.read_nifti(path)
    if data.ndim > 3:
        if all(n == 1 for n in data.shape[3:]):
            data = data.reshape(data.shape[:3])
        else:
            raise UnsupportedDimensionality(
                f"{path}: {data.ndim}D image with shape {data.shape}"
            )
    if data.ndim != 3:
        raise UnsupportedDimensionality(f"{path}: {data.ndim}D image")
    data, spacing, origin = canonicalize(data, affine)
    return CtVolume(
        voxels=data,
        spacing=tuple(spacing),
        origin=tuple(origin),
        source_id=str(path),
    )


def save_volume(path, vol: CtVolume) -> None:
    """Write a CtVolume back to NIfTI-1 (float32, axis-aligned sform)."""
    nifti.write_nifti(
        path, np.asarray(vol.voxels, dtype=np.float32),
        spacing=vol.spacing, origin=vol.origin,
    )


def resample(vol: CtVolume, target_spacing=DEFAULT_TARGET_SPACING) -> CtVolume:
    """Trilinearly resample onto a grid covering the same physical extent.

    Output dims are ``ceil(extent / target_spacing)``; samples outside the
    source grid take the nearest edge value, so a constant volume stays
    constant and values never leave [min, max] of the input.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise DegenerateSpacing(f"target spacing {target_spacing}")
    if target_spacing == vol.spacing:
        return CtVolume(vol.voxels, vol.spacing, vol.origin, vol.source_id)

    out_dims = tuple(
        int(np.ceil(ext / s)) for ext, s in zip(vol.extent_mm, target_spacing)
    )
    scale = [t / s for t, s in zip(target_spacing, vol.spacing)]
    gx, gy = np.meshgrid(
        np.arange(out_dims[0]) * scale[0],
        np.arange(out_dims[1]) * scale[1],
        indexing="ij",
    )
    coords = np.empty((3, gx.size), dtype=np.float64)
    coords[0] = gx.ravel()
    coords[1] = gy.ravel()
    out = np.empty(out_dims, dtype=np.float32)
    for k in range(out_dims[2]):  # slab-wise to bound memory on large scans
        coords[2] = k * scale[2]
        out[:, :, k] = ndimage.map_coordinates(
            vol.voxels, coords, order=1, mode="nearest"
        ).reshape(out_dims[:2])
    return CtVolume(
        voxels=out,
        spacing=target_spacing,
        origin=vol.origin,
        source_id=vol.source_id,
    )


def window_value(hu, preset: WindowPreset):
    """Map HU to display intensity: clamp((hu - center)/width + 0.5, 0, 1)."""
    hu = np.asarray(hu, dtype=np.float32)
    out = np.clip((hu - preset.center) / preset.width + 0.5, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def axial_slice(vol: CtVolume, z: int, preset: WindowPreset) -> GrayImage:
    """Windowed axial slice at index ``z`` in the documented display frame."""
    nx, ny, nz = vol.dims
    if not 0 <= z < nz:
        raise SliceOutOfRange(f"slice {z} outside 0..{nz - 1}")
    slab = vol.voxels[:, :, z]
    pixels = window_value(np.flip(slab, axis=(0, 1)).T, preset)
    return GrayImage(pixels=pixels)
