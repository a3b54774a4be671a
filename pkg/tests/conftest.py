import hypothesis
import numpy as np
import pytest

import vesselflow as vf
from vesselflow.bench import PhantomKind, PhantomSpec, generate_phantom
from vesselflow.segmentation import wall_geometry_from_phi

hypothesis.settings.register_profile(
    "ci", max_examples=25, deadline=None, derandomize=True
)
hypothesis.settings.load_profile("ci")


def make_tube(n=8, radius_frac=0.34, extent=1.0, seed=None):
    """Small straight tube along z with analytic level set; random field."""
    h = extent / n
    grid = vf.VolumeGrid((n, n, n), (h, h, h))
    x, y, _ = grid.meshgrid()
    c = 0.5 * extent - 0.5 * h
    phi = np.sqrt((x - c) ** 2 + (y - c) ** 2) - radius_frac * extent
    geometry = wall_geometry_from_phi(phi, grid, with_surface=False)
    voxel_class = vf.classify_voxels(phi < 0)
    if seed is None:
        comps = [np.zeros(grid.shape)] * 3
    else:
        rng = np.random.default_rng(seed)
        comps = [rng.normal(size=grid.shape) for _ in range(3)]
    field = vf.VelocityField.from_components(grid, *comps, voxel_class)
    return field, geometry


@pytest.fixture(scope="session")
def pipe_phantom_24():
    """Shared midsize Poiseuille phantom (24^3, R = 0.01 m, U_max = 1)."""
    n = 24
    grid = vf.VolumeGrid((n, n, n), (0.03 / n,) * 3)
    return generate_phantom(PhantomSpec(PhantomKind.POISEUILLE_PIPE, grid, radius=0.01))
