import hashlib
import math

import numpy as np
import pytest

from ctnarrate.errors import DegenerateMesh, EmptyMask
from ctnarrate.organ3d import (
    Camera,
    Mesh,
    export_stl,
    marching_cubes,
    mesh_surface_area,
    mesh_volume,
    render_shaded,
    turntable,
)
from ctnarrate.segmentation import OrganMask


def solid_cube_mask(side=10, dims=(14, 14, 14), offset=2):
    vox = np.zeros(dims, dtype=bool)
    vox[offset:offset + side, offset:offset + side, offset:offset + side] = True
    return OrganMask(organ="cube", voxels=vox)


def digitized_sphere_mask(radius=12, dims=(32, 32, 32)):
    grids = np.indices(dims).astype(float)
    center = [(n - 1) / 2 for n in dims]
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return OrganMask(organ="sphere", voxels=r2 <= radius**2)


def uv_sphere(radius=10.0, slices=96, stacks=48) -> Mesh:
    """Analytic sphere tessellation with exact normals.

    Azimuthally periodic every 2*pi/slices, so orbits by multiples of that
    angle see identical geometry.
    """
    verts = []
    norms = []
    for i in range(stacks + 1):
        theta = math.pi * i / stacks
        for j in range(slices):
            phi = 2.0 * math.pi * j / slices
            n = (
                math.sin(theta) * math.cos(phi),
                math.sin(theta) * math.sin(phi),
                math.cos(theta),
            )
            verts.append(tuple(radius * c for c in n))
            norms.append(n)
    tris = []
    for i in range(stacks):
        for j in range(slices):
            a = i * slices + j
            b = i * slices + (j + 1) % slices
            c = (i + 1) * slices + j
            d = (i + 1) * slices + (j + 1) % slices
            tris.append((a, b, d))
            tris.append((a, d, c))
    return Mesh(vertices=np.array(verts), triangles=np.array(tris),
                normals=np.array(norms))


def edge_share_counts(mesh: Mesh):
    counts = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return set(counts.values())


def frame_hash(img):
    return hashlib.sha256(img.pixels.tobytes()).hexdigest()


def facing_camera_setup():
    """Camera on +x axis looking at the origin; light into the screen."""
    cam = Camera(azimuth=0.0, elevation=0.0, distance=20.0,
                 target=(0.0, 0.0, 0.0), image_size=(64, 64), focal_px=100.0)
    light_cam = (0.0, 0.0, 1.0)
    return cam, light_cam


class TestMarchingCubes:
    def test_cube_watertight_and_volume(self):
        mesh = marching_cubes(solid_cube_mask())
        assert edge_share_counts(mesh) == {2}
        volume = mesh_volume(mesh)
        assert volume > 0
        assert abs(volume - 1000.0) / 1000.0 < 0.05

    def test_sphere_area_vs_analytic(self):
        mesh = marching_cubes(digitized_sphere_mask())
        analytic = 4.0 * math.pi * 12.0**2
        assert abs(mesh_surface_area(mesh) - analytic) / analytic < 0.10

    def test_single_voxel(self):
        vox = np.zeros((3, 3, 3), dtype=bool)
        vox[1, 1, 1] = True
        mesh = marching_cubes(OrganMask(organ="dot", voxels=vox))
        assert edge_share_counts(mesh) == {2}
        assert 0.0 < mesh_volume(mesh) <= 1.0

    def test_boundary_touching_mask_still_closed(self):
        vox = np.ones((4, 4, 4), dtype=bool)
        mesh = marching_cubes(OrganMask(organ="block", voxels=vox))
        assert edge_share_counts(mesh) == {2}
        assert mesh_volume(mesh) > 0

    def test_spacing_scales_physical_size(self):
        mesh = marching_cubes(solid_cube_mask(), spacing=(1.0, 1.0, 3.0))
        assert abs(mesh_volume(mesh) - 3000.0) / 3000.0 < 0.05

    def test_normals_point_outward(self):
        mesh = marching_cubes(solid_cube_mask())
        center = mesh.vertices.mean(axis=0)
        outward = mesh.vertices - center
        agreement = np.einsum("ij,ij->i", mesh.normals, outward)
        assert (agreement > 0).mean() > 0.99

    def test_volume_error_shrinks_as_sphere_grows(self):
        rel_err = []
        for radius, dims in ((6, (16, 16, 16)), (12, (32, 32, 32))):
            mask = digitized_sphere_mask(radius, dims)
            mesh = marching_cubes(mask)
            voxel_volume = float(mask.voxels.sum())
            rel_err.append(abs(mesh_volume(mesh) - voxel_volume) / voxel_volume)
        assert rel_err[1] < rel_err[0]

    def test_empty_mask_rejected(self):
        vox = np.zeros((3, 3, 3), dtype=bool)
        vox[1, 1, 1] = True
        mask = OrganMask(organ="dot", voxels=vox)
        object.__setattr__(mask, "voxels", np.zeros((3, 3, 3), dtype=bool))
        with pytest.raises(EmptyMask):
            marching_cubes(mask)


class TestRenderShaded:
    def test_full_lambertian_when_facing_light(self):
        cam, light = facing_camera_setup()
        # triangle in the yz-plane, normal +x (towards the camera)
        mesh = Mesh(
            vertices=np.array([[0, -5, -5], [0, 5, -5], [0, 0, 5]], dtype=float),
            triangles=np.array([[0, 1, 2]]),
            normals=np.array([[1.0, 0, 0]] * 3),
        )
        img, coverage = render_shaded(mesh, cam, light)
        assert coverage.sum() > 50
        np.testing.assert_allclose(img.pixels[coverage], 1.0, atol=1e-6)
        assert np.all(img.pixels[~coverage] == 0.0)

    def test_edge_on_triangle_is_at_most_one_pixel_wide(self):
        cam, light = facing_camera_setup()
        # triangle in the xz-plane: camera looks along -x, so it is edge-on
        mesh = Mesh(
            vertices=np.array([[-4, 0, -5], [4, 0, -5], [0, 0, 5]], dtype=float),
            triangles=np.array([[0, 1, 2]]),
            normals=np.array([[0.0, 1.0, 0]] * 3),
        )
        img, coverage = render_shaded(mesh, cam, light)
        cols = np.unique(np.nonzero(coverage)[1])
        assert len(cols) <= 1

    def test_empty_triangle_list_rejected(self):
        cam, light = facing_camera_setup()
        mesh = Mesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), int),
                    normals=np.zeros((0, 3)))
        with pytest.raises(DegenerateMesh):
            render_shaded(mesh, cam, light)

    def test_deterministic(self):
        mesh = marching_cubes(solid_cube_mask())
        cam, light = facing_camera_setup()
        a, _ = render_shaded(mesh, cam, light)
        b, _ = render_shaded(mesh, cam, light)
        assert frame_hash(a) == frame_hash(b)


class TestTurntable:
    def test_single_frame(self):
        mesh = marching_cubes(solid_cube_mask())
        frames = turntable(mesh, 1, size=(96, 96))
        assert len(frames) == 1

    def test_asymmetric_mesh_gives_distinct_frames(self):
        vox = np.zeros((20, 20, 20), dtype=bool)
        vox[2:18, 2:6, 2:6] = True
        vox[2:6, 2:14, 2:6] = True  # L shape
        mesh = marching_cubes(OrganMask(organ="L", voxels=vox))
        frames = turntable(mesh, 4, size=(96, 96))
        hashes = [frame_hash(f) for f in frames]
        assert len(set(hashes)) == 4

    def test_symmetric_sphere_frames_match(self):
        # tessellation period divides the orbit step, so geometry relative
        # to the camera is identical frame to frame
        mesh = uv_sphere(radius=10.0, slices=96, stacks=48)
        frames = turntable(mesh, 4, size=(128, 128))
        base = frames[0].pixels
        for other in frames[1:]:
            assert np.abs(other.pixels - base).max() <= 0.01

    def test_object_fills_frame(self):
        mesh = marching_cubes(digitized_sphere_mask())
        frames = turntable(mesh, 1, size=(100, 100))
        _, coverage_cols = np.nonzero(frames[0].pixels > 0)
        extent = coverage_cols.max() - coverage_cols.min()
        assert 60 <= extent <= 95  # ~80% fill


def test_stl_export(tmp_path):
    mesh = marching_cubes(solid_cube_mask(side=3, dims=(5, 5, 5), offset=1))
    path = tmp_path / "cube.stl"
    export_stl(mesh, path)
    text = path.read_text()
    assert text.startswith("solid")
    assert text.count("facet normal") == mesh.triangle_count
    assert text.rstrip().endswith("endsolid organ")
