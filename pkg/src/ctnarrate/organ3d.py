"""Organ surface extraction and turntable rendering.

Surfaces come from marching cubes at iso-level 0.5 on the binary mask,
padded by one empty voxel layer so solid masks always close up watertight.
Rendering is a deterministic software rasterizer: perspective projection,
per-pixel z-buffer on interpolated inverse depth, and Lambertian shading
with normals interpolated across each triangle. The light direction is
expressed in camera coordinates (x right, y up, z into the screen) so
shading stays fixed while the camera orbits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import DegenerateMesh, EmptyMask
from .segmentation import OrganMask
from .volume import GrayImage

AMBIENT = 0.15
DIFFUSE = 0.85
TURNTABLE_ELEVATION = math.radians(20.0)
# distance = this multiple of the bounding-sphere radius: long focal length,
# little perspective distortion
DISTANCE_RADII = 4.0
FRAME_FILL = 0.8  # bounding sphere fills this fraction of frame height
DEFAULT_LIGHT_CAM = (0.25, -0.4, 1.0)


@dataclass(frozen=True)
class Mesh:
    """Triangle surface in volume physical space (mm) with vertex normals."""

    vertices: np.ndarray  # (n, 3) float
    triangles: np.ndarray  # (m, 3) int
    normals: np.ndarray  # (n, 3) unit vectors

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        norms = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if norms.shape != verts.shape:
            raise ValueError("one normal per vertex required")
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle index out of range")
        for arr in (verts, tris, norms):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "normals", norms)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)


@dataclass(frozen=True)
class Camera:
    """Orbit camera: position derived from azimuth/elevation/distance."""

    azimuth: float
    elevation: float
    distance: float
    target: tuple[float, float, float]
    image_size: tuple[int, int]  # (width, height) pixels
    focal_px: float

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")
        if self.focal_px <= 0:
            raise ValueError("camera focal length must be positive")

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Returns (position, world-to-camera rotation matrix rows x/y/z)."""
        ca, sa = math.cos(self.azimuth), math.sin(self.azimuth)
        ce, se = math.cos(self.elevation), math.sin(self.elevation)
        offset = np.array([ce * ca, ce * sa, se])
        target = np.asarray(self.target, dtype=float)
        position = target + self.distance * offset
        forward = target - position
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0])
        if abs(float(forward @ up)) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        rot = np.stack([right, true_up, forward])
        return position, rot


def mesh_volume(mesh: Mesh) -> float:
    """Signed enclosed volume via the divergence theorem (mm^3)."""
    v = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def mesh_surface_area(mesh: Mesh) -> float:
    v = mesh.vertices[mesh.triangles]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return float(np.linalg.norm(cross, axis=1).sum() / 2.0)


def marching_cubes(mask: OrganMask, spacing=(1.0, 1.0, 1.0)) -> Mesh:
    """Extract the iso-0.5 surface of a binary mask, in physical mm.

    The mask is padded by one empty voxel layer so foreground touching the
    grid boundary still yields a closed surface; triangle winding is
    normalized to outward (positive signed volume for solid masks).
    """
    if not mask.voxels.any():
        raise EmptyMask(f"mask for {mask.organ!r} is empty")
    spacing = tuple(float(s) for s in spacing)
    padded = np.pad(mask.voxels.astype(np.float32), 1)
    verts, faces, normals, _ = measure.marching_cubes(
        padded, level=0.5, spacing=spacing
    )
    verts = verts - np.asarray(spacing)  # undo the pad offset
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    lengths[lengths == 0] = 1.0
    normals = normals / lengths
    mesh = Mesh(vertices=verts, triangles=faces, normals=normals)
    if mesh_volume(mesh) < 0:
        mesh = Mesh(
            vertices=verts, triangles=faces[:, [0, 2, 1]], normals=normals
        )
    return mesh


def render_shaded(mesh: Mesh, cam: Camera,
                  light_dir=DEFAULT_LIGHT_CAM) -> tuple[GrayImage, np.ndarray]:
    """Rasterize the mesh; returns (image, coverage mask).

    ``light_dir`` is the light's propagation direction in camera
    coordinates; a surface whose normal points straight back along it gets
    the full diffuse term. Intensity = 0.15 + 0.85 * max(0, n . -light).
    """
    if mesh.triangle_count == 0:
        raise DegenerateMesh("mesh has no triangles")
    width, height = cam.image_size
    position, rot = cam.basis()
    light = np.asarray(light_dir, dtype=float)
    light = light / np.linalg.norm(light)

    cam_verts = (mesh.vertices - position) @ rot.T
    cam_normals = mesh.normals @ rot.T

    zbuf = np.zeros((height, width), dtype=np.float64)  # stores 1/z
    image = np.zeros((height, width), dtype=np.float32)
    coverage = np.zeros((height, width), dtype=bool)

    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    near = 1e-3

    z = cam_verts[:, 2]
    u = cam.focal_px * cam_verts[:, 0] / np.maximum(z, near) + cx
    v = cy - cam.focal_px * cam_verts[:, 1] / np.maximum(z, near)

    for tri in mesh.triangles:
        tz = z[tri]
        if np.any(tz <= near):
            continue
        tu, tv = u[tri], v[tri]
        x_lo = max(0, int(math.floor(tu.min())))
        x_hi = min(width - 1, int(math.ceil(tu.max())))
        y_lo = max(0, int(math.floor(tv.min())))
        y_hi = min(height - 1, int(math.ceil(tv.max())))
        if x_lo > x_hi or y_lo > y_hi:
            continue
        area = (tu[1] - tu[0]) * (tv[2] - tv[0]) - (tu[2] - tu[0]) * (tv[1] - tv[0])
        if area == 0.0:
            continue
        px, py = np.meshgrid(
            np.arange(x_lo, x_hi + 1, dtype=np.float64),
            np.arange(y_lo, y_hi + 1, dtype=np.float64),
        )
        w0 = ((tu[1] - px) * (tv[2] - py) - (tu[2] - px) * (tv[1] - py)) / area
        w1 = ((tu[2] - px) * (tv[0] - py) - (tu[0] - px) * (tv[2] - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv_z = w0 / tz[0] + w1 / tz[1] + w2 / tz[2]
        rows = py.astype(int)
        cols = px.astype(int)
        closer = inside & (inv_z > zbuf[rows, cols])
        if not closer.any():
            continue
        n = (
            w0[..., None] * cam_normals[tri[0]]
            + w1[..., None] * cam_normals[tri[1]]
            + w2[..., None] * cam_normals[tri[2]]
        )
        norm = np.linalg.norm(n, axis=-1)
        norm[norm == 0] = 1.0
        lambert = np.maximum(0.0, -(n @ light) / norm)
        shade = np.clip(AMBIENT + DIFFUSE * lambert, 0.0, 1.0)
        r_sel, c_sel = rows[closer], cols[closer]
        zbuf[r_sel, c_sel] = inv_z[closer]
        image[r_sel, c_sel] = shade[closer]
        coverage[r_sel, c_sel] = True

    return GrayImage(pixels=image), coverage


def bounding_sphere(mesh: Mesh) -> tuple[np.ndarray, float]:
    """Centre and radius of a bounding sphere around the AABB centre."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    return center, max(radius, 1e-6)


def fit_camera(mesh: Mesh, azimuth: float, image_size) -> Camera:
    """Orbit camera at the standard elevation, auto-fit to the mesh."""
    center, radius = bounding_sphere(mesh)
    distance = DISTANCE_RADII * radius
    width, height = image_size
    focal = FRAME_FILL / 2.0 * height * distance / radius
    return Camera(
        azimuth=azimuth,
        elevation=TURNTABLE_ELEVATION,
        distance=distance,
        target=tuple(center),
        image_size=(int(width), int(height)),
        focal_px=focal,
    )


def turntable(mesh: Mesh, n_frames: int, size=(320, 320)) -> list[GrayImage]:
    """Frames at azimuths 2*pi*k/n, fixed elevation, camera-fixed light."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    frames = []
    for k in range(n_frames):
        cam = fit_camera(mesh, azimuth=2.0 * math.pi * k / n_frames, image_size=size)
        img, _ = render_shaded(mesh, cam)
        frames.append(img)
    return frames


def export_stl(mesh: Mesh, path, name: str = "organ") -> None:
    """ASCII STL dump for debugging in external viewers."""
    v = mesh.vertices[mesh.triangles]
    face_normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    lengths = np.linalg.norm(face_normals, axis=1, keepdims=True)
    lengths[lengths == 0] = 1.0
    face_normals = face_normals / lengths
    with open(path, "w") as fh:
        fh.write(f"solid {name}\n")
        for tri, normal in zip(v, face_normals):
            fh.write(f"  facet normal {normal[0]:.6e} {normal[1]:.6e} {normal[2]:.6e}\n")
            fh.write("    outer loop\n")
            for vertex in tri:
                fh.write(
                    f"      vertex {vertex[0]:.6e} {vertex[1]:.6e} {vertex[2]:.6e}\n"
                )
            fh.write("    endloop\n")
            fh.write("  endfacet\n")
        fh.write(f"endsolid {name}\n")
