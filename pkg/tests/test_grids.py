import numpy as np
import pytest

from weakreg import GridMeta, LabelMask, Volume, centroid, normalize_intensity
from weakreg.grids import (
    AffineParams,
    DisplacementField,
    EmptyLabelError,
    InvalidGridError,
    NonFiniteDataError,
)


class TestTypes:
    def test_meta_validation(self):
        with pytest.raises(InvalidGridError):
            GridMeta((0, 4, 4))
        with pytest.raises(InvalidGridError):
            GridMeta((4, 4, 4), (0.8, -1.0, 0.8))

    def test_default_spacing_is_isotropic_08(self):
        assert GridMeta((4, 4, 4)).spacing == (0.8, 0.8, 0.8)

    def test_volume_shape_mismatch(self):
        with pytest.raises(InvalidGridError):
            Volume(GridMeta((2, 2, 2)), np.zeros((2, 2, 3), dtype=np.float32))

    def test_volume_rejects_nonfinite(self):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteDataError):
            Volume(GridMeta((2, 2, 2)), data)

    def test_label_range_enforced(self):
        with pytest.raises(InvalidGridError):
            LabelMask(GridMeta((2, 2, 2)), np.full((2, 2, 2), 1.5, dtype=np.float32))

    def test_displacement_needs_three_channels(self):
        with pytest.raises(InvalidGridError):
            DisplacementField(GridMeta((2, 2, 2)), np.zeros((2, 2, 2, 2), dtype=np.float32))

    def test_containers_are_immutable(self):
        v = Volume(GridMeta((2, 2, 2)), np.zeros((2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_affine_identity_and_compose(self):
        p = AffineParams.identity()
        q = AffineParams(2.0 * np.eye(3), np.array([1.0, 0.0, 0.0]))
        c = q.compose(p)
        assert np.allclose(c.matrix, q.matrix)
        assert np.allclose(c.translation, q.translation)
        assert np.allclose(AffineParams.from_flat(q.to_flat()).matrix, q.matrix)


class TestNormalizeIntensity:
    def test_constant_maps_to_zeros(self):
        v = Volume(GridMeta((3, 3, 3)), np.full((3, 3, 3), 5.0, dtype=np.float32))
        out = normalize_intensity(v)
        assert np.all(out.data == 0.0)

    def test_two_values(self):
        meta = GridMeta((2, 1, 1))
        v = Volume(meta, np.array([0.0, 2.0], dtype=np.float32).reshape(2, 1, 1))
        out = normalize_intensity(v)
        assert np.allclose(out.data.ravel(), [-1.0, 1.0])

    def test_random_volume_has_unit_moments(self, rng):
        meta = GridMeta((8, 8, 8))
        v = Volume(meta, rng.normal(3.0, 2.5, meta.dims).astype(np.float32))
        out = normalize_intensity(v).data.astype(np.float64)
        # recompute the moments directly, independent of the implementation
        assert abs(out.mean()) < 1e-5
        assert abs(out.std() - 1.0) < 1e-5

    def test_idempotent(self, rng):
        meta = GridMeta((6, 5, 4))
        v = Volume(meta, rng.uniform(-4, 9, meta.dims).astype(np.float32))
        once = normalize_intensity(v)
        twice = normalize_intensity(once)
        assert np.allclose(once.data, twice.data, atol=1e-5)


class TestCentroid:
    def test_point_mass(self):
        meta = GridMeta((4, 4, 4))
        data = np.zeros(meta.dims, dtype=np.float32)
        data[1, 2, 3] = 1.0
        assert np.allclose(centroid(LabelMask(meta, data)), [0.8, 1.6, 2.4])

    def test_two_voxel_symmetry(self):
        meta = GridMeta((4, 1, 1))
        data = np.zeros(meta.dims, dtype=np.float32)
        data[0, 0, 0] = 1.0
        data[2, 0, 0] = 1.0
        assert np.isclose(centroid(LabelMask(meta, data))[0], 0.8)

    def test_matches_direct_sum_oracle(self, rng):
        meta = GridMeta((5, 6, 7), (0.8, 1.1, 0.9))
        data = rng.uniform(0, 1, meta.dims).astype(np.float32)
        got = centroid(LabelMask(meta, data))
        # brute-force weighted sum, one voxel at a time
        num = np.zeros(3)
        den = 0.0
        for i in range(5):
            for j in range(6):
                for k in range(7):
                    p = float(data[i, j, k])
                    num += p * np.array([i * 0.8, j * 1.1, k * 0.9])
                    den += p
        assert np.allclose(got, num / den, atol=1e-9)

    def test_translation_equivariance_exact(self):
        # dyadic spacing and a symmetric mask keep the arithmetic exact
        meta = GridMeta((10, 10, 10), (0.5, 0.25, 1.0))
        data = np.zeros(meta.dims, dtype=np.float32)
        data[2:5, 2:5, 2:5] = 1.0
        shift = (3, 2, 4)
        base = centroid(LabelMask(meta, data))
        shifted = centroid(LabelMask(meta, np.roll(data, shift, axis=(0, 1, 2))))
        assert np.array_equal(shifted - base, np.array(shift) * np.array(meta.spacing))

    def test_empty_mask_raises(self):
        meta = GridMeta((3, 3, 3))
        with pytest.raises(EmptyLabelError):
            centroid(LabelMask(meta, np.zeros(meta.dims, dtype=np.float32)))
