"""Wall-aware discrete divergence and smoothness operators.

Rows fall into three regimes. Interior voxels use central differences.
Near-wall voxels use three-point stencils built from the sub-grid wall
fraction theta = (distance to wall along the grid line) / (axis spacing):
with the wall value folded out under no-slip, the first derivative at the
near-wall node is

    (1/h) * [ (1-theta)/theta * u_self + theta/(1+theta) * u_next ]

and the second derivative is

    (2/h^2) * [ -u_self/theta + u_next/(1+theta) ],

both exact for quadratics. Open-boundary voxels (vessel crossing the
volume edge) use one-sided differences and receive no wall treatment.

"Traditional" mode assembles the same operators wall-unaware: exterior
neighbors are simply missing and rows degrade to one-sided differences,
which reproduces the classic smoothing baseline without no-slip handling.

Operators are assembled in grid units: lengths are scaled by the smallest
axis spacing h0, so A approximates h0 * divergence and the smoother
approximates h0^2 * Laplacian. The divergence-free constraint A u = 0 is
unaffected by the scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DataError, ParameterError
from .grid import (
    VelocityField,
    VoxelClass,
    VolumeGrid,
    WallGeometry,
    _shifted,
)

#: Sparse operators are plain CSR matrices (row-compressed storage).
SparseOperator = sp.csr_matrix

MODES = ("improved", "traditional")


# ---------------------------------------------------------------------------
# three-point stencils with a sub-grid wall offset


@dataclass(frozen=True)
class StencilCoefficients:
    """Dimensionless weights on (wall value, node value, next value).

    The derivative estimate is scale * (c0*u0 + c1*u1 + c2*u2) where u0
    sits on the wall at distance theta*h before the node, u1 at the node,
    and u2 one spacing h after it.
    """

    c0: float
    c1: float
    c2: float
    scale: float

    def apply(self, u0: float, u1: float, u2: float) -> float:
        return self.scale * (self.c0 * u0 + self.c1 * u1 + self.c2 * u2)


def _check_theta(theta) -> float:
    theta = float(theta)
    if not (0.0 < theta <= 1.0):
        raise ParameterError(f"wall fraction must lie in (0, 1], got {theta}")
    return theta


def first_derivative_stencil(theta, h) -> StencilCoefficients:
    """First-derivative stencil at a node one sub-grid offset from a wall.

    Reduces to the central difference (u2 - u0) / (2h) at theta = 1 and is
    exact for polynomials up to degree 2 for any admissible theta.
    """
    theta = _check_theta(theta)
    if h <= 0:
        raise ParameterError("spacing must be positive")
    return StencilCoefficients(
        c0=-1.0 / (theta**2 + theta),
        c1=(1.0 - theta) / theta,
        c2=theta / (1.0 + theta),
        scale=1.0 / h,
    )


def second_derivative_stencil(theta, h) -> StencilCoefficients:
    """Second-derivative stencil at a node one sub-grid offset from a wall.

    Reduces to (u0 - 2 u1 + u2) / h^2 at theta = 1; exact for quadratics.
    """
    theta = _check_theta(theta)
    if h <= 0:
        raise ParameterError("spacing must be positive")
    return StencilCoefficients(
        c0=1.0 / (theta**2 + theta),
        c1=-1.0 / theta,
        c2=1.0 / (1.0 + theta),
        scale=2.0 / h**2,
    )


# ---------------------------------------------------------------------------
# unknown layout


@dataclass(frozen=True)
class FieldLayout:
    """Mapping between grid voxels and stacked unknown / constraint vectors.

    Unknowns are the in-vessel voxels (interior, near-wall, and open
    boundary) in canonical raveled order; the solution vector stacks the
    three components block-wise, [u; v; w]. Constraint rows exist for
    interior and near-wall voxels only: one-sided divergence at open
    boundaries is unreliable, so those voxels are smoothed but not
    constrained.
    """

    grid: VolumeGrid
    voxel_class: np.ndarray
    unknown_lin: np.ndarray
    uidx: np.ndarray
    constraint_lin: np.ndarray

    @classmethod
    def from_classification(cls, grid: VolumeGrid, voxel_class: np.ndarray) -> "FieldLayout":
        vc = np.asarray(voxel_class)
        if vc.shape != grid.shape:
            raise ParameterError("voxel_class shape does not match grid")
        if vc.max(initial=0) > int(VoxelClass.OPEN_BOUNDARY):
            raise DataError("voxel classification contains values outside the enumeration")
        flat = vc.ravel()
        unknown_lin = np.flatnonzero(flat != VoxelClass.EXTERIOR)
        if unknown_lin.size == 0:
            raise DataError("empty vessel mask: no unknowns to lay out")
        uidx = np.full(flat.size, -1, dtype=np.int64)
        uidx[unknown_lin] = np.arange(unknown_lin.size)
        constrained = (flat == VoxelClass.INTERIOR) | (flat == VoxelClass.NEAR_WALL)
        constraint_lin = np.flatnonzero(constrained)
        return cls(grid, vc, unknown_lin, uidx, constraint_lin)

    @classmethod
    def from_field(cls, field: VelocityField) -> "FieldLayout":
        return cls.from_classification(field.grid, field.voxel_class)

    @property
    def n_unknown(self) -> int:
        return self.unknown_lin.size

    @property
    def n_constraint(self) -> int:
        return self.constraint_lin.size

    def pack(self, field: VelocityField) -> np.ndarray:
        """Stack the in-vessel velocity values into a 3n vector."""
        return np.concatenate(
            [comp.ravel()[self.unknown_lin] for comp in field.components()]
        )

    def pack_weights(self, field: VelocityField) -> np.ndarray:
        w = field.weight.ravel()[self.unknown_lin]
        return np.concatenate([w, w, w])

    def unpack(self, vec: np.ndarray, template: VelocityField) -> VelocityField:
        """Scatter a 3n vector back onto the grid of a template field."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (3 * self.n_unknown,):
            raise ParameterError("solution vector length does not match layout")
        comps = []
        for c in range(3):
            flat = np.zeros(self.grid.n_voxels)
            flat[self.unknown_lin] = vec[c * self.n_unknown : (c + 1) * self.n_unknown]
            comps.append(flat.reshape(self.grid.shape))
        return VelocityField.from_components(
            self.grid, comps[0], comps[1], comps[2], template.voxel_class, template.weight
        )


def reference_spacing(grid: VolumeGrid) -> float:
    """Length unit absorbed into the operators (smallest axis spacing)."""
    return min(grid.spacing)


# ---------------------------------------------------------------------------
# row assembly

_NEW_COUNTERS = (
    "near_wall_rows",
    "both_wall_rows",
    "one_sided_rows",
    "two_point_rows",
    "dropped_axis_terms",
)


class _AxisViews:
    """Neighbor lookups along one physical axis, shared by both builders."""

    def __init__(self, layout: FieldLayout, geometry: WallGeometry | None, axis: int):
        grid = layout.grid
        shape = grid.shape
        np_axis = 2 - axis
        n = grid.n_voxels
        lin = np.arange(n).reshape(shape)
        vessel = layout.voxel_class != VoxelClass.EXTERIOR
        exterior = ~vessel

        self.self_lin = lin
        self.h = grid.spacing[axis] / reference_spacing(grid)
        self.nbr = {s: _shifted(lin, np_axis, s, -1) for s in (-1, 1)}
        self.nbr2 = {s: _shifted(lin, np_axis, 2 * s, -1) for s in (-1, 1)}
        self.ves = {s: _shifted(vessel, np_axis, s, False) for s in (-1, 1)}
        self.ves2 = {s: _shifted(vessel, np_axis, 2 * s, False) for s in (-1, 1)}
        # exterior neighbor inside the volume = a wall crossing
        self.ext = {s: _shifted(exterior, np_axis, s, False) for s in (-1, 1)}
        if geometry is not None:
            self.theta = {-1: geometry.theta[2 * axis], 1: geometry.theta[2 * axis + 1]}
        else:
            self.theta = None

    def wall_fraction(self, sign: int, mask: np.ndarray) -> np.ndarray:
        if self.theta is None:
            raise DataError("wall-aware assembly requires wall geometry")
        th = self.theta[sign][mask]
        if not np.isfinite(th).all():
            raise DataError(
                "missing sub-grid wall fraction on a near-wall voxel; "
                "geometry and classification are inconsistent"
            )
        return th


def _axis_derivative_triplets(views, order, rows_mask, voxel_class, mode, counters):
    """COO triplets (row_lin, col_lin, value) for one axis derivative.

    order 1 or 2; one row per voxel in rows_mask. Values are in grid
    units (views.h is the dimensionless axis spacing).
    """
    h = views.h
    rows, cols, vals = [], [], []

    def emit(mask, col_lin, values):
        rows.append(views.self_lin[mask])
        cols.append(col_lin[mask] if isinstance(col_lin, np.ndarray) else col_lin)
        vals.append(values)

    near_wall = voxel_class == VoxelClass.NEAR_WALL
    if mode == "improved":
        wall_m = rows_mask & near_wall & views.ext[-1]
        wall_p = rows_mask & near_wall & views.ext[1]
    else:
        wall_m = np.zeros_like(rows_mask)
        wall_p = np.zeros_like(rows_mask)

    both = wall_m & wall_p
    only = {-1: wall_m & ~both, 1: wall_p & ~both}

    # near-wall rows: wall value folded out under no-slip
    for sign in (-1, 1):
        m = only[sign]
        if not m.any():
            continue
        th = views.wall_fraction(sign, m)
        if order == 1:
            s = -float(sign)  # printed form has the wall on the negative side
            emit(m, views.self_lin, s * (1.0 - th) / (th * h))
            emit(m, views.nbr[-sign], s * th / ((1.0 + th) * h))
        else:
            emit(m, views.self_lin, -2.0 / (th * h**2))
            emit(m, views.nbr[-sign], 2.0 / ((1.0 + th) * h**2))
        counters["near_wall_rows"] += int(m.sum())
    if both.any():
        # vessel one voxel thick: quadratic through the two wall points
        th_m = views.wall_fraction(-1, both)
        th_p = views.wall_fraction(1, both)
        if order == 1:
            emit(both, views.self_lin, (th_p - th_m) / (th_m * th_p * h))
        else:
            emit(both, views.self_lin, -2.0 / (th_m * th_p * h**2))
        counters["both_wall_rows"] += int(both.sum())

    plain = rows_mask & ~wall_m & ~wall_p
    central = plain & views.ves[-1] & views.ves[1]
    if central.any():
        if order == 1:
            emit(central, views.nbr[1], np.full(int(central.sum()), 1.0 / (2.0 * h)))
            emit(central, views.nbr[-1], np.full(int(central.sum()), -1.0 / (2.0 * h)))
        else:
            c = int(central.sum())
            emit(central, views.nbr[1], np.full(c, 1.0 / h**2))
            emit(central, views.self_lin, np.full(c, -2.0 / h**2))
            emit(central, views.nbr[-1], np.full(c, 1.0 / h**2))

    sided = plain & ~central
    handled = np.zeros_like(sided)
    for sign in (-1, 1):
        # one-sided second order needs two in-vessel nodes on the same side
        m3 = sided & ~handled & views.ves[sign] & views.ves2[sign]
        if m3.any():
            c = int(m3.sum())
            if order == 1:
                s = float(sign)
                emit(m3, views.self_lin, np.full(c, -3.0 * s / (2.0 * h)))
                emit(m3, views.nbr[sign], np.full(c, 4.0 * s / (2.0 * h)))
                emit(m3, views.nbr2[sign], np.full(c, -1.0 * s / (2.0 * h)))
            else:
                emit(m3, views.self_lin, np.full(c, 1.0 / h**2))
                emit(m3, views.nbr[sign], np.full(c, -2.0 / h**2))
                emit(m3, views.nbr2[sign], np.full(c, 1.0 / h**2))
            counters["one_sided_rows"] += c
            handled |= m3
    for sign in (-1, 1):
        m2 = sided & ~handled & views.ves[sign]
        if m2.any():
            c = int(m2.sum())
            if order == 1:
                s = float(sign)
                emit(m2, views.self_lin, np.full(c, -s / h))
                emit(m2, views.nbr[sign], np.full(c, s / h))
                counters["two_point_rows"] += c
            else:
                # a second derivative needs three samples; drop the term
                counters["dropped_axis_terms"] += c
            handled |= m2
    dropped = sided & ~handled
    if dropped.any():
        counters["dropped_axis_terms"] += int(dropped.sum())

    row_lin = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    col_lin = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    values = np.concatenate(vals) if vals else np.empty(0)
    return row_lin, col_lin, values


def _validate_mode(mode: str, geometry: WallGeometry | None):
    if mode not in MODES:
        raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "improved" and geometry is None:
        raise ParameterError("improved mode requires wall geometry")


def assemble_divergence(
    layout: FieldLayout,
    geometry: WallGeometry | None = None,
    mode: str = "improved",
    diagnostics: dict | None = None,
) -> SparseOperator:
    """Discrete divergence over the unknown vector, in grid units.

    One row per interior / near-wall voxel; columns span the stacked
    [u; v; w] unknowns. A @ vec approximates h0 * div(velocity).
    """
    _validate_mode(mode, geometry)
    counters = {k: 0 for k in _NEW_COUNTERS}
    n = layout.grid.n_voxels
    cidx = np.full(n, -1, dtype=np.int64)
    cidx[layout.constraint_lin] = np.arange(layout.n_constraint)
    rows_mask = (cidx >= 0).reshape(layout.grid.shape)

    blocks = []
    for axis in range(3):
        views = _AxisViews(layout, geometry, axis)
        row_lin, col_lin, values = _axis_derivative_triplets(
            views, 1, rows_mask, layout.voxel_class, mode, counters
        )
        block = sp.coo_matrix(
            (values, (cidx[row_lin], layout.uidx[col_lin])),
            shape=(layout.n_constraint, layout.n_unknown),
        )
        blocks.append(block)
    a_op = sp.hstack(blocks, format="csr")
    a_op.sum_duplicates()
    if not np.isfinite(a_op.data).all():
        raise DataError("divergence operator contains non-finite entries")
    if diagnostics is not None:
        diagnostics.update({f"divergence_{k}": v for k, v in counters.items()})
    return a_op


def assemble_smoother(
    layout: FieldLayout,
    geometry: WallGeometry | None = None,
    mode: str = "improved",
    diagnostics: dict | None = None,
) -> SparseOperator:
    """Second-derivative smoothness operator, block-diagonal per component.

    Each block is the sum of the per-axis second-derivative stencils over
    the unknown voxels (a Laplacian in grid units, wall-aware in improved
    mode). The three blocks are identical.
    """
    _validate_mode(mode, geometry)
    counters = {k: 0 for k in _NEW_COUNTERS}
    rows_mask = (layout.uidx >= 0).reshape(layout.grid.shape)

    parts = []
    for axis in range(3):
        views = _AxisViews(layout, geometry, axis)
        row_lin, col_lin, values = _axis_derivative_triplets(
            views, 2, rows_mask, layout.voxel_class, mode, counters
        )
        parts.append(
            sp.coo_matrix(
                (values, (layout.uidx[row_lin], layout.uidx[col_lin])),
                shape=(layout.n_unknown, layout.n_unknown),
            )
        )
    block = (parts[0] + parts[1] + parts[2]).tocsr()
    block.sum_duplicates()
    if not np.isfinite(block.data).all():
        raise DataError("smoothness operator contains non-finite entries")
    d_op = sp.block_diag([block, block, block], format="csr")
    if diagnostics is not None:
        diagnostics.update({f"smoother_{k}": v for k, v in counters.items()})
    return d_op


def divergence_values(field: VelocityField, a_op: SparseOperator, layout: FieldLayout) -> np.ndarray:
    """Per-constraint-row divergence of a field, in grid units."""
    vec = layout.pack(field)
    if a_op.shape != (layout.n_constraint, 3 * layout.n_unknown):
        raise ParameterError("operator shape does not match layout")
    return a_op @ vec
