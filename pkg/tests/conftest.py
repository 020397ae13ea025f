"""Shared phantom builders used across the suite."""

import numpy as np
import pytest

from ctnarrate.volume import CtVolume


def gaussian_blob(dims, center, sigma, amplitude):
    """A smooth 3D Gaussian bump; ``sigma`` may be scalar or per-axis."""
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (3,))
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    r2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center, sig))
    return amplitude * np.exp(-r2 / 2.0)


def blob_phantom(dims=(64, 64, 40), spacing=(1.0, 1.0, 3.0), seed=7) -> CtVolume:
    """Air background, a smooth anisotropic "body" around 0 HU, and internal
    soft-tissue bumps. Rich enough in the soft-tissue window that rigid
    alignment is well determined in all six parameters."""
    rng = np.random.default_rng(seed)
    field = np.full(dims, -1000.0)
    body_sigma = (0.30 * dims[0], 0.24 * dims[1], 0.36 * dims[2])
    body_center = [(n - 1) / 2 for n in dims]
    field += gaussian_blob(dims, body_center, body_sigma, 1000.0)
    for _ in range(8):
        center = [rng.uniform(0.3 * n, 0.7 * n) for n in dims]
        sigma = rng.uniform(3.0, 6.0)
        field += gaussian_blob(
            dims, center, sigma, rng.choice([-1.0, 1.0]) * rng.uniform(120.0, 220.0)
        )
    return CtVolume(voxels=field, spacing=spacing, source_id="phantom")


def constant_volume(value, dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0)) -> CtVolume:
    return CtVolume(voxels=np.full(dims, float(value)), spacing=spacing)


@pytest.fixture
def phantom() -> CtVolume:
    return blob_phantom()
