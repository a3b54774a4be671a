"""Grid, field, and wall-geometry containers shared across the package.

Volumes are numpy arrays indexed ``[k, j, i]`` (shape ``(nz, ny, nx)``) so
that ``ravel()`` yields the canonical x-fastest linearization
``p = i + nx*(j + ny*k)``. Sparse operators, stacked solution vectors, and
the raw volume file format all rely on this single ordering.

All containers freeze their arrays after construction; they are safe to
share across threads and must be rebuilt (not mutated) to change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import OutOfDomainError, ParameterError

# Axis-direction enumeration used for sub-grid wall fractions:
# index d points along axis DIR_AXIS[d] with sign DIR_SIGN[d].
N_DIRECTIONS = 6
DIR_AXIS = np.array([0, 0, 1, 1, 2, 2])
DIR_SIGN = np.array([-1, 1, -1, 1, -1, 1])


class VoxelClass(IntEnum):
    """Role of a voxel in the masked vessel domain."""

    EXTERIOR = 0
    INTERIOR = 1
    NEAR_WALL = 2
    OPEN_BOUNDARY = 3


@dataclass(frozen=True)
class VolumeGrid:
    """Uniform structured grid; spacing may differ per axis.

    dims and spacing are ordered (x, y, z); voxel centers sit at
    ``origin + index * spacing``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 3 for d in self.dims):
            raise ParameterError(f"grid dims must be three integers >= 3, got {self.dims!r}")
        if len(self.spacing) != 3 or any(not (h > 0) for h in self.spacing):
            raise ParameterError(f"grid spacing must be positive, got {self.spacing!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(h) for h in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        """Numpy array shape (nz, ny, nx) for volumes on this grid."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounding box spanned by voxel centers."""
        lo = np.asarray(self.origin, dtype=float)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi

    def axis_coords(self, axis: int) -> np.ndarray:
        """Voxel-center coordinates along one axis (0=x, 1=y, 2=z)."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Voxel-center coordinate volumes (x, y, z), each of shape `shape`."""
        z, y, x = np.meshgrid(
            self.axis_coords(2), self.axis_coords(1), self.axis_coords(0), indexing="ij"
        )
        return x, y, z


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _shifted(arr: np.ndarray, np_axis: int, delta: int, fill) -> np.ndarray:
    """Array of neighbor values: out[p] = arr[p + delta] along np_axis."""
    out = np.full_like(arr, fill)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if delta > 0:
        src[np_axis] = slice(delta, None)
        dst[np_axis] = slice(None, -delta)
    elif delta < 0:
        src[np_axis] = slice(None, delta)
        dst[np_axis] = slice(-delta, None)
    else:
        return arr.copy()
    out[tuple(dst)] = arr[tuple(src)]
    return out


def neighbor_values(arr: np.ndarray, axis: int, sign: int, fill) -> np.ndarray:
    """Neighbor lookup along a physical axis (0=x, 1=y, 2=z)."""
    return _shifted(arr, 2 - axis, sign, fill)


def classify_voxels(mask: np.ndarray) -> np.ndarray:
    """Split a boolean vessel mask into the four voxel classes.

    Mask voxels on a volume boundary face are OPEN_BOUNDARY (flow crosses
    the box there, so no wall treatment applies); remaining mask voxels
    with an exterior face-neighbor are NEAR_WALL; the rest are INTERIOR.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ParameterError("mask must be a 3-D array")
    cls = np.zeros(mask.shape, dtype=np.uint8)
    cls[mask] = VoxelClass.INTERIOR

    near = np.zeros_like(mask)
    exterior = ~mask
    for axis in range(3):
        for sign in (-1, 1):
            near |= neighbor_values(exterior, axis, sign, False)
    cls[mask & near] = VoxelClass.NEAR_WALL

    edge = np.zeros_like(mask)
    for np_axis in range(3):
        sl = [slice(None)] * 3
        sl[np_axis] = 0
        edge[tuple(sl)] = True
        sl[np_axis] = -1
        edge[tuple(sl)] = True
    cls[mask & edge] = VoxelClass.OPEN_BOUNDARY
    return cls


def _as_volume(arr, shape, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    if out.shape != shape:
        raise ParameterError(f"array shape {out.shape} does not match grid shape {shape}")
    return out


@dataclass(frozen=True)
class VelocityField:
    """Three velocity components plus per-voxel class and observation weight.

    Components are zero on EXTERIOR voxels (consistent with no-slip and
    keeps interpolation total); weights are zero there as well.
    """

    grid: VolumeGrid
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    voxel_class: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        shape = self.grid.shape
        for name in ("u", "v", "w", "voxel_class", "weight"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ParameterError(f"{name} shape {arr.shape} does not match grid shape {shape}")
        if self.voxel_class.max(initial=0) > int(VoxelClass.OPEN_BOUNDARY):
            raise ParameterError("voxel_class contains values outside the enumeration")
        exterior = self.voxel_class == VoxelClass.EXTERIOR
        if self.weight[exterior].any():
            raise ParameterError("exterior voxels must carry zero weight")
        if self.weight.min(initial=0.0) < 0 or self.weight.max(initial=0.0) > 1:
            raise ParameterError("weights must lie in [0, 1]")
        nw = self.voxel_class == VoxelClass.NEAR_WALL
        if nw.any():
            has_ext = np.zeros(shape, dtype=bool)
            for axis in range(3):
                for sign in (-1, 1):
                    has_ext |= neighbor_values(exterior, axis, sign, False)
            if not has_ext[nw].all():
                raise ParameterError("near-wall voxels must have an exterior face-neighbor")

    @classmethod
    def from_components(cls, grid, u, v, w, voxel_class, weight=None):
        """Sanitizing constructor: copies arrays, zeroes exterior values."""
        shape = grid.shape
        vc = _as_volume(voxel_class, shape, dtype=np.uint8)
        vessel = vc != VoxelClass.EXTERIOR
        comps = []
        for comp in (u, v, w):
            arr = _as_volume(comp, shape)
            arr[~vessel] = 0.0
            comps.append(_freeze(arr))
        if weight is None:
            wgt = vessel.astype(np.float64)
        else:
            wgt = _as_volume(weight, shape)
            wgt[~vessel] = 0.0
        return cls(grid, comps[0], comps[1], comps[2], _freeze(vc), _freeze(wgt))

    @property
    def vessel_mask(self) -> np.ndarray:
        return self.voxel_class != VoxelClass.EXTERIOR

    def components(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.u, self.v, self.w

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u**2 + self.v**2 + self.w**2)

    def class_counts(self) -> dict:
        return {c: int(np.count_nonzero(self.voxel_class == c)) for c in VoxelClass}


@dataclass(frozen=True)
class ScalarField:
    """One scalar per voxel on a grid (distance maps, divergence maps, ...)."""

    grid: VolumeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ParameterError(
                f"values shape {self.values.shape} does not match grid shape {self.grid.shape}"
            )

    @classmethod
    def from_values(cls, grid, values):
        return cls(grid, _freeze(_as_volume(values, grid.shape)))


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangulated wall surface with outward unit vertex normals."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ParameterError("vertices must be (V, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ParameterError("triangles must be (T, 3)")
        if self.normals.shape != self.vertices.shape:
            raise ParameterError("normals must match vertices")
        lengths = np.linalg.norm(self.normals, axis=1)
        if lengths.size and np.abs(lengths - 1.0).max() > 1e-10:
            raise ParameterError("normals must be unit length")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]


@dataclass(frozen=True)
class WallGeometry:
    """Signed distance, sub-grid wall fractions, and the wall surface.

    phi is negative inside the vessel. theta has shape (6, nz, ny, nx);
    entry d holds, for a near-wall voxel whose neighbor in direction d is
    exterior, the distance to the wall along that grid line as a fraction
    of the axis spacing (NaN where the direction has no wall).
    """

    grid: VolumeGrid
    phi: np.ndarray
    theta: np.ndarray
    surface: SurfaceMesh | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phi.shape != self.grid.shape:
            raise ParameterError("phi shape does not match grid")
        if self.theta.shape != (N_DIRECTIONS,) + self.grid.shape:
            raise ParameterError("theta must have shape (6, nz, ny, nx)")
        stored = self.theta[np.isfinite(self.theta)]
        if stored.size and (stored.min() <= 0 or stored.max() > 1.0 + 1e-12):
            raise ParameterError("stored wall fractions must lie in (0, 1]")

    def phi_field(self) -> ScalarField:
        return ScalarField(self.grid, self.phi)


def _continuous_index(grid: VolumeGrid, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 3:
        raise ParameterError("points must have a trailing dimension of 3")
    origin = np.asarray(grid.origin)
    spacing = np.asarray(grid.spacing)
    c = (pts - origin) / spacing
    upper = np.asarray(grid.dims) - 1
    # tolerate float fuzz on the hull itself
    eps = 1e-9
    if np.any(c < -eps) or np.any(c > upper + eps):
        bad = pts[np.any((c < -eps) | (c > upper + eps), axis=-1)]
        raise OutOfDomainError(f"sampling position outside grid bounding box: {bad[:1]}")
    return np.clip(c, 0.0, upper)


def sample_scalar_trilinear(grid: VolumeGrid, values: np.ndarray, points) -> np.ndarray:
    """Trilinear interpolation of a scalar volume at arbitrary positions."""
    c = _continuous_index(grid, points)
    nx, ny, nz = grid.dims
    i0 = np.minimum(c.astype(np.int64), np.asarray(grid.dims) - 2)
    f = c - i0
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]

    out = np.zeros(c.shape[:-1], dtype=float)
    for dz in (0, 1):
        wz = fz if dz else 1.0 - fz
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                out += wx * wy * wz * values[iz + dz, iy + dy, ix + dx]
    return out


def sample_trilinear(field: VelocityField, points) -> np.ndarray:
    """Trilinear interpolation of the three velocity components.

    Exterior voxels contribute zero (their stored values are zero by
    construction). Returns an array shaped like points.
    """
    comps = [sample_scalar_trilinear(field.grid, comp, points) for comp in field.components()]
    return np.stack(comps, axis=-1)
