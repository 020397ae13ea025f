"""Organ masks, bounding boxes, and pluggable segmentation backends.

A mask is always bound to the grid of the volume it annotates. Providers
come in three flavours: a deterministic phantom (tests and dry runs), a
directory of pre-computed NIfTI masks, and a remote HTTP service speaking
the documented multipart contract. Remote responses are cached by
(volume content hash, organ) so reruns are reproducible and cheap.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nifti
from .errors import DimsMismatch, EmptyMask, ProviderFailure
from .volume import CtVolume


@dataclass(frozen=True)
class BoundingBox3D:
    """Axis-aligned voxel-index extent, inclusive at both ends."""

    min: tuple[int, int, int]
    max: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min)
        hi = tuple(int(v) for v in self.max)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box min {lo} exceeds max {hi}")
        if any(a < 0 for a in lo):
            raise ValueError(f"box min {lo} has negative components")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def as_dict(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}


@dataclass(frozen=True)
class OrganMask:
    """Binary voxel mask for one organ, bound to a CtVolume grid.

    Construction rejects empty masks: an organ the provider could not find
    is an explicit EmptyMask condition, not a silent all-zero annotation.
    """

    organ: str
    voxels: np.ndarray
    volume_ref: str = ""

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3:
            raise DimsMismatch(f"mask for {self.organ!r} is {vox.ndim}D")
        vox = vox != 0
        if not vox.any():
            raise EmptyMask(f"mask for {self.organ!r} has no foreground voxels")
        vox.setflags(write=False)
        object.__setattr__(self, "voxels", vox)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def foreground_count(self) -> int:
        return int(self.voxels.sum())


def bounding_box(mask: OrganMask) -> BoundingBox3D:
    """Tightest axis-aligned box containing every foreground voxel."""
    idx = np.nonzero(mask.voxels)
    if idx[0].size == 0:  # unreachable given the OrganMask invariant
        raise EmptyMask(f"mask for {mask.organ!r} is empty")
    lo = tuple(int(ax.min()) for ax in idx)
    hi = tuple(int(ax.max()) for ax in idx)
    return BoundingBox3D(min=lo, max=hi)


def union_box(boxes: list[BoundingBox3D]) -> BoundingBox3D:
    """Componentwise hull of one or more boxes."""
    if not boxes:
        raise ValueError("union_box needs at least one box")
    lo = tuple(min(b.min[a] for b in boxes) for a in range(3))
    hi = tuple(max(b.max[a] for b in boxes) for a in range(3))
    return BoundingBox3D(min=lo, max=hi)


def segment(vol: CtVolume, organ: str, provider) -> OrganMask:
    """Ask ``provider`` for the organ mask and validate it against ``vol``."""
    mask = provider.segment(vol, organ)
    if mask.dims != vol.dims:
        raise DimsMismatch(
            f"provider mask dims {mask.dims} != volume dims {vol.dims} for {organ!r}"
        )
    if mask.volume_ref and vol.source_id and mask.volume_ref != vol.source_id:
        raise DimsMismatch(
            f"mask bound to {mask.volume_ref!r}, expected {vol.source_id!r}"
        )
    return OrganMask(organ=organ, voxels=mask.voxels, volume_ref=vol.source_id)


def load_mask_file(path, vol: CtVolume) -> OrganMask:
    """Load a NIfTI mask aligned to ``vol``; any nonzero voxel is foreground."""
    data, _ = nifti.read_nifti(path)
    if data.ndim > 3 and all(n == 1 for n in data.shape[3:]):
        data = data.reshape(data.shape[:3])
    if data.shape != vol.dims:
        raise DimsMismatch(f"{path}: mask dims {data.shape} != volume {vol.dims}")
    return OrganMask(organ=Path(path).stem, voxels=data, volume_ref=vol.source_id)


def save_mask(path, mask: OrganMask, vol: CtVolume) -> None:
    """Write a mask as uint8 NIfTI on the bound volume's grid."""
    nifti.write_nifti(
        path, mask.voxels.astype(np.uint8), spacing=vol.spacing, origin=vol.origin
    )


def sanitize_label(organ: str) -> str:
    """Filesystem-safe form of an organ label: ``left lung`` -> ``left_lung``."""
    return re.sub(r"[^a-z0-9]+", "_", organ.lower()).strip("_")


def volume_content_hash(vol: CtVolume) -> str:
    """Hash of the volume's grid and voxel content (not its file encoding)."""
    h = hashlib.sha256()
    h.update(repr((vol.dims, vol.spacing, vol.origin)).encode())
    h.update(np.ascontiguousarray(vol.voxels).tobytes())
    return h.hexdigest()


class PhantomSegmentationProvider:
    """Deterministic synthetic masks: a cuboid near the volume centre.

    The cuboid side is about one sixth of each dimension and its position
    is nudged per organ label, so distinct organs get distinct but
    reproducible regions. Used by tests and ``--provider seg=phantom``.
    """

    def segment(self, vol: CtVolume, organ: str) -> OrganMask:
        dims = vol.dims
        digest = hashlib.sha256(organ.encode()).digest()
        vox = np.zeros(dims, dtype=bool)
        slices = []
        for axis, n in enumerate(dims):
            half = max(1, n // 12)
            center = n // 2 + (digest[axis] % 5) - 2
            lo = min(max(0, center - half), n - 1)
            hi = max(lo + 1, min(n, center + half))
            slices.append(slice(lo, hi))
        vox[tuple(slices)] = True
        return OrganMask(organ=organ, voxels=vox, volume_ref=vol.source_id)


class FileMaskProvider:
    """Masks from a directory of ``<sanitized organ label>.nii.gz`` files."""

    def __init__(self, mask_dir):
        self.mask_dir = Path(mask_dir)

    def _path_for(self, organ: str) -> Path:
        stem = sanitize_label(organ)
        for suffix in (".nii.gz", ".nii"):
            candidate = self.mask_dir / f"{stem}{suffix}"
            if candidate.exists():
                return candidate
        raise ProviderFailure(
            f"no mask file for {organ!r} under {self.mask_dir} (expected {stem}.nii.gz)"
        )

    def segment(self, vol: CtVolume, organ: str) -> OrganMask:
        mask = load_mask_file(self._path_for(organ), vol)
        return OrganMask(organ=organ, voxels=mask.voxels, volume_ref=vol.source_id)


class HttpSegmentationProvider:
    """Client for the remote text-prompted segmentation contract.

    Request: ``POST {base_url}/segment`` multipart with a ``volume`` file
    part (NIfTI bytes) and an ``organ`` text field. Response: NIfTI mask
    bytes on success, or a JSON error body ``{code, message}``.
    """

    def __init__(self, base_url: str, cache_dir=None, timeout: float = 120.0,
                 session=None):
        import requests

        self.base_url = base_url.rstrip("/")
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.timeout = timeout
        self.session = session or requests.Session()

    def _cache_path(self, key: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / "segment" / f"{key}.nii.gz"

    def segment(self, vol: CtVolume, organ: str) -> OrganMask:
        key = hashlib.sha256(
            (volume_content_hash(vol) + "\x00" + organ).encode()
        ).hexdigest()
        cached = self._cache_path(key)
        if cached is not None and cached.exists():
            return self._mask_from_bytes(cached.read_bytes(), vol, organ)

        payload = nifti.encode_nifti(
            vol.voxels.astype(np.float32), spacing=vol.spacing, origin=vol.origin
        )
        try:
            resp = self.session.post(
                f"{self.base_url}/segment",
                files={"volume": ("volume.nii", payload, "application/octet-stream")},
                data={"organ": organ},
                timeout=self.timeout,
            )
        except Exception as exc:
            raise ProviderFailure(f"segmentation service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderFailure(self._error_text(resp))
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            cached.write_bytes(resp.content)
        return self._mask_from_bytes(resp.content, vol, organ)

    @staticmethod
    def _error_text(resp) -> str:
        try:
            body = resp.json()
            return f"segmentation service error {resp.status_code}: " \
                   f"{body.get('code')}: {body.get('message')}"
        except (ValueError, json.JSONDecodeError):
            return f"segmentation service error {resp.status_code}"

    @staticmethod
    def _mask_from_bytes(content: bytes, vol: CtVolume, organ: str) -> OrganMask:
        data, _ = nifti.decode_nifti(content, name=f"segment({organ})")
        if data.shape != vol.dims:
            raise DimsMismatch(
                f"service mask dims {data.shape} != volume dims {vol.dims}"
            )
        return OrganMask(organ=organ, voxels=data, volume_ref=vol.source_id)
