"""Rigid alignment of the healthy-reference scan to the query scan.

The transform maps moving-volume physical coordinates to fixed-volume
physical coordinates: ``T(p) = R (p - center) + center + translation`` with
``R = Rz(rz) @ Ry(ry) @ Rx(rx)`` (radians, millimetres). Optimization is
deterministic multi-resolution coordinate descent (default pyramid
x4/x2/x1) on a mean-squared-HU metric over the in-extent overlap, with
both volumes pre-clamped to the soft-tissue window so bone does not
dominate. No stochastic sampling anywhere: same inputs, same transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateGrid, GridMismatch, NoOverlap
from .segmentation import OrganMask
from .volume import CtVolume

FILL_HU = -1024.0

# soft-tissue pre-window for the registration metric (center 40, width 400)
METRIC_CLAMP = (-160.0, 240.0)


@dataclass(frozen=True)
class GridSpec:
    """An axis-aligned sampling grid: dims, spacing (mm), origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(int(n) < 1 for n in self.dims):
            raise DegenerateGrid(f"dims {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise DegenerateGrid(f"spacing {self.spacing}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def from_volume(cls, vol: CtVolume) -> "GridSpec":
        return cls(dims=vol.dims, spacing=vol.spacing, origin=vol.origin)


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass(frozen=True)
class RigidTransform:
    """6-DOF rigid map from moving to fixed physical space."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = tuple(float(a) for a in self.rotation)
        tr = tuple(float(t) for t in self.translation)
        if not all(math.isfinite(v) for v in rot + tr):
            raise ValueError("transform parameters must be finite")
        if any(a <= -math.pi or a > math.pi for a in rot):
            raise ValueError(f"rotation angles must lie in (-pi, pi]: {rot}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def matrix(self) -> np.ndarray:
        rx, ry, rz = self.rotation
        return _rot_z(rz) @ _rot_y(ry) @ _rot_x(rx)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) moving-space points to fixed space."""
        pts = np.asarray(points, dtype=float)
        c = np.asarray(self.center)
        t = np.asarray(self.translation)
        return (pts - c) @ self.matrix.T + c + t

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) fixed-space points back to moving space."""
        pts = np.asarray(points, dtype=float)
        c = np.asarray(self.center)
        t = np.asarray(self.translation)
        return (pts - c - t) @ self.matrix + c

    def inverse(self) -> "RigidTransform":
        """The analytic inverse, in the same parameterization and center."""
        rot_t = self.matrix.T
        rx, ry, rz = _euler_from_matrix(rot_t)
        t_inv = -(rot_t @ np.asarray(self.translation))
        return RigidTransform(
            rotation=(rx, ry, rz), translation=tuple(t_inv), center=self.center
        )

    def as_dict(self) -> dict:
        return {
            "rotation_rad": list(self.rotation),
            "translation_mm": list(self.translation),
            "center_mm": list(self.center),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "RigidTransform":
        return cls(
            rotation=tuple(record["rotation_rad"]),
            translation=tuple(record["translation_mm"]),
            center=tuple(record.get("center_mm", (0.0, 0.0, 0.0))),
        )


def _euler_from_matrix(rot: np.ndarray) -> tuple[float, float, float]:
    """Angles (rx, ry, rz) with rot = Rz @ Ry @ Rx; gimbal lock falls to rz=0."""
    sy = -rot[2, 0]
    sy = min(1.0, max(-1.0, sy))
    ry = math.asin(sy)
    if abs(sy) < 1.0 - 1e-9:
        rx = math.atan2(rot[2, 1], rot[2, 2])
        rz = math.atan2(rot[1, 0], rot[0, 0])
    else:
        rx = math.atan2(-rot[1, 2], rot[1, 1])
        rz = 0.0
    return rx, ry, rz


@dataclass(frozen=True)
class RegistrationConfig:
    """Schedules for the multi-resolution coordinate-descent optimizer."""

    levels: tuple[int, ...] = (4, 2, 1)
    rot_step_rad: float = 0.02
    trans_step_mm: float = 2.0
    rot_step_min: float = 0.0005
    trans_step_min: float = 0.05
    max_sweeps_per_level: int = 80
    metric_max_samples: int = 200_000
    smoothing_sigma: float = 0.7  # voxels, applied at every pyramid level

    def __post_init__(self):
        if not self.levels or any(f < 1 for f in self.levels):
            raise DegenerateGrid(f"pyramid levels {self.levels}")


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    final_metric: float
    initial_metric: float
    trace: tuple[tuple[float, ...], ...]  # best-so-far metric per sweep, per level
    converged: bool

    def __iter__(self):
        # allows: transform, metric = register_rigid(...)
        return iter((self.transform, self.final_metric))


def _physical_center(vol: CtVolume) -> tuple[float, float, float]:
    return tuple(
        o + (n - 1) * s / 2.0
        for o, s, n in zip(vol.origin, vol.spacing, vol.dims)
    )


def _extent_interval(vol: CtVolume):
    lo = np.asarray(vol.origin)
    hi = lo + (np.asarray(vol.dims) - 1) * np.asarray(vol.spacing)
    return lo, hi


def _pyramid_level(vol: CtVolume, factor: int, smoothing_sigma: float) -> CtVolume:
    """Block-mean pooling plus a light Gaussian blur.

    Trailing voxels that do not fill a block are cropped. The blur keeps the
    metric smooth against interpolation artifacts at every level.
    """
    if factor > 1:
        dims = tuple((n // factor) * factor for n in vol.dims)
        if all(n > 0 for n in dims):
            vox = vol.voxels[: dims[0], : dims[1], : dims[2]]
            shape = []
            for n in dims:
                shape.extend([n // factor, factor])
            pooled = vox.reshape(shape).mean(axis=(1, 3, 5))
            origin = tuple(
                o + (factor - 1) * s / 2.0 for o, s in zip(vol.origin, vol.spacing)
            )
            vol = CtVolume(
                voxels=pooled,
                spacing=tuple(s * factor for s in vol.spacing),
                origin=origin,
                source_id=vol.source_id,
            )
    if smoothing_sigma > 0:
        smoothed = ndimage.gaussian_filter(
            vol.voxels, sigma=smoothing_sigma, mode="nearest"
        )
        vol = CtVolume(
            voxels=smoothed, spacing=vol.spacing, origin=vol.origin,
            source_id=vol.source_id,
        )
    return vol


def _sample_through(moving: CtVolume, transform: RigidTransform, target: GridSpec,
                    order: int, cval: float) -> np.ndarray:
    """Sample ``moving`` at target grid positions pulled back through T."""
    grids = np.meshgrid(
        *[np.arange(n, dtype=np.float64) for n in target.dims], indexing="ij"
    )
    pts = np.stack([g.ravel() for g in grids], axis=1)
    pts = pts * np.asarray(target.spacing) + np.asarray(target.origin)
    moving_pts = transform.apply_inverse(pts)
    idx = (moving_pts - np.asarray(moving.origin)) / np.asarray(moving.spacing)
    sampled = ndimage.map_coordinates(
        moving.voxels, idx.T, order=order, mode="constant", cval=cval
    )
    return sampled.reshape(target.dims)


def apply_transform(vol: CtVolume, transform: RigidTransform, target: GridSpec,
                    interpolation: str = "trilinear",
                    fill_value: float = FILL_HU) -> CtVolume:
    """Resample ``vol`` through ``transform`` onto ``target``.

    ``interpolation`` is ``trilinear`` or ``nearest``; out-of-extent samples
    take ``fill_value`` (default air).
    """
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    order = 1 if interpolation == "trilinear" else 0
    data = _sample_through(vol, transform, target, order=order, cval=fill_value)
    return CtVolume(
        voxels=data.astype(np.float32),
        spacing=target.spacing,
        origin=target.origin,
        source_id=vol.source_id,
    )


def transform_mask(mask: OrganMask, transform: RigidTransform, target: GridSpec,
                   source_grid: GridSpec | None = None) -> OrganMask:
    """Nearest-neighbour resampling of a binary mask onto ``target``.

    ``source_grid`` describes the grid the mask lives on; it defaults to a
    unit-spacing grid at the origin, which suits masks bound to volumes
    whose grid equals the target. Raises EmptyMask when no foreground
    voxel lands inside the target grid.
    """
    src = source_grid or GridSpec(dims=mask.dims, spacing=(1, 1, 1))
    grids = np.meshgrid(
        *[np.arange(n, dtype=np.float64) for n in target.dims], indexing="ij"
    )
    pts = np.stack([g.ravel() for g in grids], axis=1)
    pts = pts * np.asarray(target.spacing) + np.asarray(target.origin)
    moving_pts = transform.apply_inverse(pts)
    idx = (moving_pts - np.asarray(src.origin)) / np.asarray(src.spacing)
    sampled = ndimage.map_coordinates(
        mask.voxels.astype(np.float32), idx.T, order=0, mode="constant", cval=0.0
    ).reshape(target.dims)
    return OrganMask(organ=mask.organ, voxels=sampled > 0.5,
                     volume_ref=mask.volume_ref)


def similarity_mse(a: CtVolume, b: CtVolume) -> float:
    """Mean squared HU difference on an identical grid."""
    if a.dims != b.dims:
        raise GridMismatch(f"dims {a.dims} != {b.dims}")
    if not np.allclose(a.spacing, b.spacing) or not np.allclose(a.origin, b.origin):
        raise GridMismatch("volumes are not on the same physical grid")
    diff = a.voxels.astype(np.float64) - b.voxels.astype(np.float64)
    return float(np.mean(diff * diff))


def _metric(fixed: CtVolume, moving: CtVolume, transform: RigidTransform) -> float:
    """Masked MSE of pre-windowed HU over the in-extent overlap (NaN fill)."""
    sampled = _sample_through(
        moving, transform, GridSpec.from_volume(fixed), order=1, cval=np.nan
    )
    valid = np.isfinite(sampled)
    if not valid.any():
        return float("inf")
    diff = fixed.voxels[valid].astype(np.float64) - sampled[valid]
    return float(np.mean(diff * diff))


def _prewindow(vol: CtVolume) -> CtVolume:
    return CtVolume(
        voxels=np.clip(vol.voxels, *METRIC_CLAMP),
        spacing=vol.spacing,
        origin=vol.origin,
        source_id=vol.source_id,
    )


def register_rigid(fixed: CtVolume, moving: CtVolume,
                   cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Find the rigid transform aligning ``moving`` onto ``fixed``.

    Deterministic coordinate descent over (rx, ry, rz, tx, ty, tz) with
    halving step sizes, coarse to fine. The best-so-far metric is
    nonincreasing within each level by construction; the result carries the
    per-sweep trace so that property is checkable. A run that exhausts the
    sweep budget before the step floors is flagged ``converged=False`` and
    still returns the best transform found.
    """
    cfg = cfg or RegistrationConfig()
    lo_f, hi_f = _extent_interval(fixed)
    lo_m, hi_m = _extent_interval(moving)
    if np.any(hi_m < lo_f) or np.any(hi_f < lo_m):
        raise NoOverlap("fixed and moving physical extents are disjoint")

    center = _physical_center(fixed)
    fixed_w = _prewindow(fixed)
    moving_w = _prewindow(moving)

    params = np.zeros(6, dtype=float)
    trace: list[tuple[float, ...]] = []
    initial_metric = float("nan")
    best = float("inf")
    converged = True

    for level_index, factor in enumerate(cfg.levels):
        fixed_l = _pyramid_level(fixed_w, factor, cfg.smoothing_sigma)
        moving_l = _pyramid_level(moving_w, factor, cfg.smoothing_sigma)

        # fixed-grid sample points are precomputed once per level; a
        # deterministic stride caps the per-evaluation cost on big scans
        grids = np.meshgrid(
            *[np.arange(n, dtype=np.float64) for n in fixed_l.dims], indexing="ij"
        )
        pts = np.stack([g.ravel() for g in grids], axis=1)
        pts = pts * np.asarray(fixed_l.spacing) + np.asarray(fixed_l.origin)
        fvals = fixed_l.voxels.ravel().astype(np.float64)
        if pts.shape[0] > cfg.metric_max_samples:
            stride = int(np.ceil(pts.shape[0] / cfg.metric_max_samples))
            pts = pts[::stride]
            fvals = fvals[::stride]
        m_origin = np.asarray(moving_l.origin)
        m_spacing = np.asarray(moving_l.spacing)

        def metric_at(vec):
            if any(a <= -math.pi or a > math.pi for a in vec[:3]):
                return float("inf")
            t = RigidTransform(
                rotation=tuple(vec[:3]), translation=tuple(vec[3:]), center=center
            )
            idx = (t.apply_inverse(pts) - m_origin) / m_spacing
            sampled = ndimage.map_coordinates(
                moving_l.voxels, idx.T, order=1, mode="constant", cval=np.nan
            )
            valid = np.isfinite(sampled)
            if not valid.any():
                return float("inf")
            diff = fvals[valid] - sampled[valid]
            return float(np.mean(diff * diff))

        best = metric_at(params)
        if level_index == 0:
            initial_metric = best
        level_trace = [best]
        steps = np.array(
            [cfg.rot_step_rad * factor] * 3 + [cfg.trans_step_mm * factor] * 3
        )
        # floors scale with the level so coarse levels stop early and the
        # finest level does the precision work
        floors = np.array(
            [cfg.rot_step_min * factor] * 3 + [cfg.trans_step_min * factor] * 3
        )
        # translations before rotations: gross offsets must be corrected
        # before rotation is allowed to trade against them
        param_order = (3, 4, 5, 0, 1, 2)

        sweeps = 0
        while np.any(steps > floors):
            sweeps += 1
            if sweeps > cfg.max_sweeps_per_level:
                converged = False
                break
            improved = False
            for p in param_order:
                if steps[p] <= floors[p]:
                    continue
                while True:  # line search along this parameter
                    plus = params.copy()
                    plus[p] += steps[p]
                    minus = params.copy()
                    minus[p] -= steps[p]
                    candidates = [(metric_at(plus), tuple(plus), plus),
                                  (metric_at(minus), tuple(minus), minus)]
                    candidates.sort(key=lambda c: (c[0], c[1]))
                    value, _, candidate = candidates[0]
                    if value < best:
                        best, params = value, candidate
                        improved = True
                        continue
                    if value == best and tuple(candidate) < tuple(params):
                        best, params = value, candidate
                    break
            level_trace.append(best)
            if not improved:
                steps = steps / 2.0
        trace.append(tuple(level_trace))

    transform = RigidTransform(
        rotation=tuple(params[:3]), translation=tuple(params[3:]), center=center
    )
    final_metric = _metric(fixed_w, moving_w, transform)
    return RegistrationResult(
        transform=transform,
        final_metric=final_metric,
        initial_metric=initial_metric,
        trace=tuple(trace),
        converged=converged,
    )
