import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import vesselflow as vf
from vesselflow import OutOfDomainError, ParameterError


def small_grid(n=4, h=0.5, origin=(0.0, 0.0, 0.0)):
    return vf.VolumeGrid((n, n, n), (h, h, h), origin)


def full_field(grid, u, v, w):
    voxel_class = vf.classify_voxels(np.ones(grid.shape, dtype=bool))
    return vf.VelocityField.from_components(grid, u, v, w, voxel_class)


class TestVolumeGrid:
    def test_rejects_small_dims(self):
        with pytest.raises(ParameterError):
            vf.VolumeGrid((2, 4, 4), (1.0, 1.0, 1.0))

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ParameterError):
            vf.VolumeGrid((4, 4, 4), (1.0, 0.0, 1.0))

    def test_shape_is_zyx(self):
        grid = vf.VolumeGrid((4, 5, 6), (1.0, 1.0, 1.0))
        assert grid.shape == (6, 5, 4)
        assert grid.n_voxels == 120

    def test_linearization_is_x_fastest(self):
        grid = vf.VolumeGrid((3, 4, 5), (1.0, 1.0, 1.0))
        x, y, z = grid.meshgrid()
        flat_x = x.ravel()
        # p = i + nx*(j + ny*k): consecutive entries walk along x
        assert flat_x[0] == 0.0 and flat_x[1] == 1.0 and flat_x[2] == 2.0
        assert y.ravel()[3] == 1.0  # after nx entries, y advances


class TestTrilinear:
    def test_constant_field(self):
        grid = small_grid()
        field = full_field(grid, np.ones(grid.shape), np.zeros(grid.shape), np.zeros(grid.shape))
        value = vf.sample_trilinear(field, [0.75, 0.9, 1.1])
        assert np.allclose(value, [1.0, 0.0, 0.0])

    def test_linear_field_exact_at_node(self):
        grid = small_grid()
        x, _, _ = grid.meshgrid()
        field = full_field(grid, x, np.zeros(grid.shape), np.zeros(grid.shape))
        assert vf.sample_trilinear(field, [1.0, 0.5, 0.5])[0] == pytest.approx(1.0, abs=1e-15)

    def test_product_field_at_cell_center(self):
        # frozen oracle: mean of the 8 corner values of the enclosing cell
        grid = small_grid(n=4, h=1.0)
        x, y, _ = grid.meshgrid()
        field = full_field(grid, x * y, np.zeros(grid.shape), np.zeros(grid.shape))
        p = np.array([1.5, 2.5, 0.5])
        corners = [(i, j) for i in (1, 2) for j in (2, 3)]
        oracle = np.mean([i * j for i, j in corners])  # z-independent
        assert vf.sample_trilinear(field, p)[0] == pytest.approx(oracle, rel=1e-14)

    @given(
        st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2),
        st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
    )
    def test_affine_reproduction(self, a, bx, by, bz, px, py, pz):
        # trilinear interpolation is exact for fields affine per coordinate
        grid = small_grid(n=4, h=0.5)
        x, y, z = grid.meshgrid()
        values = a + bx * x + by * y + bz * z
        field = full_field(grid, values, values, values)
        p = np.array([px, py, pz]) * 1.5
        expect = a + bx * p[0] + by * p[1] + bz * p[2]
        assert vf.sample_trilinear(field, p)[0] == pytest.approx(expect, abs=1e-12)

    def test_outside_bounding_box_raises(self):
        grid = small_grid()
        field = full_field(grid, *(np.zeros(grid.shape),) * 3)
        with pytest.raises(OutOfDomainError):
            vf.sample_trilinear(field, [2.0, 0.5, 0.5])

    def test_exterior_contributes_zero(self):
        grid = small_grid(n=5, h=1.0)
        mask = np.zeros(grid.shape, dtype=bool)
        mask[:, :, :3] = True  # vessel is the low-x half
        voxel_class = vf.classify_voxels(mask)
        ones = np.ones(grid.shape)
        field = vf.VelocityField.from_components(grid, ones, ones, ones, voxel_class)
        # halfway between the last vessel voxel and the first exterior one
        value = vf.sample_trilinear(field, [2.5, 2.0, 2.0])
        assert value[0] == pytest.approx(0.5)


class TestClassification:
    def test_partition_is_exhaustive_and_exclusive(self):
        grid = small_grid(n=6, h=1.0)
        x, y, z = grid.meshgrid()
        mask = (x - 2.5) ** 2 + (y - 2.5) ** 2 < 4.0
        voxel_class = vf.classify_voxels(mask)
        counts = {c: int(np.count_nonzero(voxel_class == c)) for c in vf.VoxelClass}
        assert sum(counts.values()) == grid.n_voxels
        assert counts[vf.VoxelClass.EXTERIOR] == int((~mask).sum())

    def test_near_wall_has_exterior_neighbor(self):
        grid = small_grid(n=6, h=1.0)
        x, y, z = grid.meshgrid()
        mask = (x - 2.5) ** 2 + (y - 2.5) ** 2 < 4.0
        voxel_class = vf.classify_voxels(mask)
        # constructor re-validates this invariant
        vf.VelocityField.from_components(grid, x, y, z, voxel_class)

    def test_edge_voxels_are_open_boundary(self):
        grid = small_grid(n=4, h=1.0)
        mask = np.ones(grid.shape, dtype=bool)
        voxel_class = vf.classify_voxels(mask)
        assert voxel_class[0, 1, 1] == vf.VoxelClass.OPEN_BOUNDARY
        assert voxel_class[1, 1, 1] == vf.VoxelClass.INTERIOR
        assert not np.any(voxel_class == vf.VoxelClass.NEAR_WALL)


class TestVelocityField:
    def test_exterior_weight_forced_zero(self):
        grid = small_grid(n=4, h=1.0)
        mask = np.zeros(grid.shape, dtype=bool)
        mask[1:3, 1:3, 1:3] = True
        field = vf.VelocityField.from_components(
            grid, *(np.ones(grid.shape),) * 3, vf.classify_voxels(mask)
        )
        assert field.weight[~mask].max() == 0.0
        assert field.u[~mask].max() == 0.0  # exterior values zeroed

    def test_bad_weight_range_rejected(self):
        grid = small_grid(n=4, h=1.0)
        mask = np.ones(grid.shape, dtype=bool)
        weight = np.full(grid.shape, 1.5)
        with pytest.raises(ParameterError):
            vf.VelocityField.from_components(
                grid, *(np.zeros(grid.shape),) * 3, vf.classify_voxels(mask), weight
            )

    def test_arrays_frozen(self):
        grid = small_grid(n=4, h=1.0)
        field = full_field(grid, *(np.zeros(grid.shape),) * 3)
        with pytest.raises(ValueError):
            field.u[0, 0, 0] = 1.0
