import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctnarrate.errors import DimsMismatch, EmptyMask, ProviderFailure
from ctnarrate.segmentation import (
    BoundingBox3D,
    FileMaskProvider,
    OrganMask,
    PhantomSegmentationProvider,
    bounding_box,
    load_mask_file,
    sanitize_label,
    save_mask,
    segment,
    union_box,
)
from ctnarrate.volume import CtVolume


def brute_force_box(voxels: np.ndarray) -> BoundingBox3D:
    """Independent oracle: exhaustive scan over every voxel."""
    lo = [None, None, None]
    hi = [None, None, None]
    nx, ny, nz = voxels.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if voxels[i, j, k]:
                    for axis, v in enumerate((i, j, k)):
                        if lo[axis] is None or v < lo[axis]:
                            lo[axis] = v
                        if hi[axis] is None or v > hi[axis]:
                            hi[axis] = v
    return BoundingBox3D(min=tuple(lo), max=tuple(hi))


def random_mask(rng, max_side=32):
    dims = tuple(int(rng.integers(1, max_side + 1)) for _ in range(3))
    vox = rng.random(dims) > 0.8
    if not vox.any():
        vox[tuple(int(rng.integers(0, n)) for n in dims)] = True
    return vox


def make_vol(dims=(16, 16, 16)):
    return CtVolume(voxels=np.zeros(dims), spacing=(1, 1, 1), source_id="test-vol")


class StubProvider:
    def __init__(self, mask_or_exc):
        self.payload = mask_or_exc

    def segment(self, vol, organ):
        if isinstance(self.payload, Exception):
            raise self.payload
        if callable(self.payload):
            return self.payload(vol, organ)
        return self.payload


class TestBoundingBox:
    def test_single_voxel_degenerate_box(self):
        vox = np.zeros((8, 9, 10), dtype=bool)
        vox[3, 7, 2] = True
        mask = OrganMask(organ="x", voxels=vox)
        box = bounding_box(mask)
        assert box.min == box.max == (3, 7, 2)

    def test_two_point_hull(self):
        vox = np.zeros((6, 2, 10), dtype=bool)
        vox[0, 0, 0] = True
        vox[5, 1, 9] = True
        box = bounding_box(OrganMask(organ="x", voxels=vox))
        assert box.min == (0, 0, 0)
        assert box.max == (5, 1, 9)

    def test_matches_brute_force_on_random_masks(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            vox = random_mask(rng, max_side=16)
            got = bounding_box(OrganMask(organ="r", voxels=vox))
            assert got == brute_force_box(vox)

    def test_invalid_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox3D(min=(2, 0, 0), max=(1, 5, 5))


class TestUnionBox:
    def test_identity(self):
        box = BoundingBox3D(min=(1, 2, 3), max=(4, 5, 6))
        assert union_box([box]) == box

    def test_disjoint_hull(self):
        a = BoundingBox3D(min=(0, 0, 0), max=(1, 1, 1))
        b = BoundingBox3D(min=(5, 5, 5), max=(6, 6, 6))
        assert union_box([a, b]) == BoundingBox3D(min=(0, 0, 0), max=(6, 6, 6))

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            union_box([])

    boxes = st.builds(
        lambda lo, size: BoundingBox3D(
            min=tuple(lo), max=tuple(a + b for a, b in zip(lo, size))
        ),
        st.tuples(*[st.integers(0, 20)] * 3),
        st.tuples(*[st.integers(0, 10)] * 3),
    )

    @given(st.lists(boxes, min_size=1, max_size=8))
    @settings(max_examples=60)
    def test_fold_order_irrelevant(self, boxes):
        # associativity/commutativity: any fold equals the global hull
        forward = boxes[0]
        for b in boxes[1:]:
            forward = union_box([forward, b])
        assert forward == union_box(boxes)
        assert union_box(list(reversed(boxes))) == union_box(boxes)

    @given(boxes)
    def test_idempotent(self, box):
        assert union_box([box, box]) == box


class TestSegment:
    def test_phantom_cube(self):
        # the test's own phantom: centered 10^3 cube in a 64^3 volume
        vol = make_vol((64, 64, 64))

        def centered_cube(v, organ):
            vox = np.zeros(v.dims, dtype=bool)
            vox[27:37, 27:37, 27:37] = True
            return OrganMask(organ=organ, voxels=vox, volume_ref=v.source_id)

        mask = segment(vol, "lung", StubProvider(centered_cube))
        assert mask.foreground_count == 1000

    def test_all_zero_mask_is_empty_mask(self):
        vol = make_vol()
        with pytest.raises(EmptyMask):
            segment(vol, "lung", StubProvider(
                lambda v, o: OrganMask(organ=o, voxels=np.zeros(v.dims))
            ))

    def test_wrong_dims_rejected(self):
        vol = make_vol((16, 16, 16))
        wrong = np.zeros((8, 8, 8), dtype=bool)
        wrong[1, 1, 1] = True
        provider = StubProvider(OrganMask(organ="lung", voxels=wrong))
        with pytest.raises(DimsMismatch):
            segment(vol, "lung", provider)

    def test_builtin_phantom_provider_deterministic(self):
        vol = make_vol((64, 64, 40))
        provider = PhantomSegmentationProvider()
        a = segment(vol, "aorta", provider)
        b = segment(vol, "aorta", provider)
        np.testing.assert_array_equal(a.voxels, b.voxels)
        c = segment(vol, "left lung", provider)
        assert not np.array_equal(a.voxels, c.voxels)
        assert a.foreground_count > 0


class TestMaskFiles:
    def test_round_trip(self, tmp_path):
        vol = make_vol((12, 10, 8))
        vox = np.zeros(vol.dims, dtype=bool)
        vox[2:5, 3:6, 1:4] = True
        mask = OrganMask(organ="liver", voxels=vox, volume_ref=vol.source_id)
        path = tmp_path / "liver.nii.gz"
        save_mask(path, mask, vol)
        back = load_mask_file(path, vol)
        np.testing.assert_array_equal(back.voxels, mask.voxels)

    def test_dims_mismatch(self, tmp_path):
        from ctnarrate import nifti

        nifti.write_nifti(tmp_path / "m.nii.gz", np.ones((64, 64, 32), dtype=np.uint8))
        vol = make_vol((64, 64, 33))
        with pytest.raises(DimsMismatch):
            load_mask_file(tmp_path / "m.nii.gz", vol)

    def test_nonzero_rule(self, tmp_path):
        from ctnarrate import nifti

        data = np.zeros((6, 6, 6), dtype=np.uint8)
        data[1, 2, 3] = 7
        nifti.write_nifti(tmp_path / "seven.nii", data)
        vol = make_vol((6, 6, 6))
        mask = load_mask_file(tmp_path / "seven.nii", vol)
        assert mask.foreground_count == 1
        assert mask.voxels[1, 2, 3]

    def test_file_provider_lookup_and_missing(self, tmp_path):
        vol = make_vol((6, 6, 6))
        vox = np.zeros(vol.dims, dtype=bool)
        vox[2, 2, 2] = True
        save_mask(tmp_path / "left_lung_lower_lobe.nii.gz",
                  OrganMask(organ="x", voxels=vox), vol)
        provider = FileMaskProvider(tmp_path)
        mask = segment(vol, "left lung lower lobe", provider)
        assert mask.foreground_count == 1
        with pytest.raises(ProviderFailure):
            segment(vol, "aorta", provider)


def test_sanitize_label():
    assert sanitize_label("left lung lower lobe") == "left_lung_lower_lobe"
    assert sanitize_label("thoracic vertebrae 7 (t7)") == "thoracic_vertebrae_7_t7"
