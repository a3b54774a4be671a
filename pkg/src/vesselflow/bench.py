"""Analytic flow phantoms, corruption models, and diagnostic statistics.

Phantoms provide ground truth the patient data cannot: every generated
field is analytically divergence-free, satisfies no-slip at the wall, and
carries a closed-form wall shear stress. Corruption adds what real
acquisitions suffer from (noise, dead voxels, missing data) under a fixed
seed so every benchmark is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError, ParameterError
from .grid import (
    DIR_AXIS,
    DIR_SIGN,
    N_DIRECTIONS,
    VelocityField,
    VolumeGrid,
    VoxelClass,
    WallGeometry,
    classify_voxels,
    neighbor_values,
)
from .operators import FieldLayout, SparseOperator, divergence_values
from .segmentation import DEFAULT_THETA_MIN, wall_geometry_from_phi


class PhantomKind(Enum):
    POISEUILLE_PIPE = "poiseuille-pipe"
    SOLID_ROTATION = "solid-rotation"
    UNIFORM_CHANNEL = "uniform-channel"


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, flow scale, and fluid parameters of one phantom."""

    kind: PhantomKind
    grid: VolumeGrid
    radius: float  # pipe/rotation radius or channel half-height [m]
    axis: int = 2  # flow axis (0=x, 1=y, 2=z)
    u_max: float = 1.0
    rho: float = 1060.0
    mu: float = 0.0035

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ParameterError("axis must be 0, 1, or 2")
        if self.radius <= 0 or self.u_max <= 0 or self.rho <= 0 or self.mu <= 0:
            raise ParameterError("radius, u_max, rho, and mu must be positive")


@dataclass(frozen=True)
class PhantomData:
    spec: PhantomSpec
    truth: VelocityField
    geometry: WallGeometry
    wall_shear: np.ndarray  # analytic WSS magnitude per surface vertex [Pa]
    tau_wall: float


def analytic_wall_shear(spec: PhantomSpec) -> float:
    """Closed-form wall shear stress magnitude of a phantom."""
    if spec.kind is PhantomKind.SOLID_ROTATION:
        # u_theta = Omega r (1 - r^2/R^2); tau_w = 2 mu Omega
        omega = 3.0 * math.sqrt(3.0) * spec.u_max / (2.0 * spec.radius)
        return 2.0 * spec.mu * omega
    return 2.0 * spec.mu * spec.u_max / spec.radius


def generate_phantom(spec: PhantomSpec, theta_min: float = DEFAULT_THETA_MIN) -> PhantomData:
    """Build truth field, wall geometry, and analytic WSS for a phantom.

    The flow conduit spans the whole volume along the flow axis, so the
    end faces are open boundaries rather than walls.
    """
    grid = spec.grid
    if spec.radius < 4.0 * max(grid.spacing):
        raise ParameterError(
            f"phantom radius {spec.radius:g} m under-resolved: need at least "
            f"4 voxels ({4.0 * max(grid.spacing):g} m) across"
        )
    coords = grid.meshgrid()
    perp = [a for a in range(3) if a != spec.axis]
    lo, hi = grid.bounds
    comps = [np.zeros(grid.shape) for _ in range(3)]

    if spec.kind is PhantomKind.UNIFORM_CHANNEL:
        wall_axis = perp[0]
        center = 0.5 * (lo[wall_axis] + hi[wall_axis])
        d = coords[wall_axis] - center
        phi = np.abs(d) - spec.radius
        inside = phi < 0
        comps[spec.axis] = np.where(
            inside, spec.u_max * (1.0 - (d / spec.radius) ** 2), 0.0
        )
    else:
        c0 = 0.5 * (lo[perp[0]] + hi[perp[0]])
        c1 = 0.5 * (lo[perp[1]] + hi[perp[1]])
        dp = coords[perp[0]] - c0
        dq = coords[perp[1]] - c1
        r2 = dp**2 + dq**2
        phi = np.sqrt(r2) - spec.radius
        inside = phi < 0
        shape_fn = np.where(inside, 1.0 - r2 / spec.radius**2, 0.0)
        if spec.kind is PhantomKind.POISEUILLE_PIPE:
            comps[spec.axis] = spec.u_max * shape_fn
        else:  # rotation about the axis, damped to honor no-slip at the wall
            omega = 3.0 * math.sqrt(3.0) * spec.u_max / (2.0 * spec.radius)
            comps[perp[0]] = -omega * dq * shape_fn
            comps[perp[1]] = omega * dp * shape_fn

    voxel_class = classify_voxels(inside)
    geometry = wall_geometry_from_phi(phi, grid, voxel_class, theta_min)
    truth = VelocityField.from_components(
        grid, comps[0], comps[1], comps[2], voxel_class
    )
    tau = analytic_wall_shear(spec)
    wall_shear = np.full(geometry.surface.n_vertices, tau)
    return PhantomData(spec, truth, geometry, wall_shear, tau)


@dataclass(frozen=True)
class CorruptionSpec:
    """Noise / dead-voxel / missing-data model applied to a truth field."""

    gaussian_sigma: float = 0.0  # noise std as a fraction of the reference speed
    outlier_fraction: float = 0.0
    missing_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ParameterError("gaussian_sigma must be non-negative")
        for name in ("outlier_fraction", "missing_fraction"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ParameterError(f"{name} must lie in [0, 1], got {value}")


def corrupt(
    field: VelocityField, spec: CorruptionSpec, reference_speed: float | None = None
) -> VelocityField:
    """Apply the corruption model; deterministic under a fixed seed.

    Gaussian noise is added per component on in-vessel voxels, outlier
    voxels are replaced by uniform random vectors in [-2, 2] times the
    reference speed, and missing voxels get zero weight (and zero value).
    Outlier and missing voxel sets are disjoint with exact counts
    floor(fraction * n).
    """
    rng = np.random.default_rng(spec.seed)
    vessel_lin = np.flatnonzero(field.vessel_mask.ravel())
    n = vessel_lin.size
    scale = float(reference_speed) if reference_speed is not None else float(
        field.magnitude().max(initial=0.0)
    )

    comps = [np.array(c) for c in field.components()]
    weight = np.array(field.weight)
    if spec.gaussian_sigma > 0 and scale > 0:
        for comp in comps:
            flat = comp.ravel()
            flat[vessel_lin] += rng.normal(0.0, spec.gaussian_sigma * scale, n)

    n_out = int(math.floor(spec.outlier_fraction * n))
    n_miss = int(math.floor(spec.missing_fraction * n))
    perm = rng.permutation(n)
    outliers = vessel_lin[perm[:n_out]]
    missing = vessel_lin[perm[n_out : n_out + n_miss]]
    if n_out:
        bad = rng.uniform(-2.0 * scale, 2.0 * scale, (3, n_out))
        for comp, vals in zip(comps, bad):
            comp.ravel()[outliers] = vals
    if n_miss:
        for comp in comps:
            comp.ravel()[missing] = 0.0
        weight.ravel()[missing] = 0.0

    return VelocityField.from_components(
        field.grid, comps[0], comps[1], comps[2], field.voxel_class, weight
    )


# ---------------------------------------------------------------------------
# diagnostic statistics


@dataclass(frozen=True)
class DivergenceStats:
    mean_abs: float
    max_abs: float
    n_rows: int


def divergence_stats(
    field: VelocityField, a_op: SparseOperator, layout: FieldLayout
) -> DivergenceStats:
    """Mean and max |divergence| over the constrained voxels (grid units)."""
    div = divergence_values(field, a_op, layout)
    if div.size == 0:
        return DivergenceStats(0.0, 0.0, 0)
    return DivergenceStats(float(np.abs(div).mean()), float(np.abs(div).max()), div.size)


def divergence_stats_by_class(field, a_op, layout) -> dict:
    """Per-class divergence diagnostics (interior vs near-wall rows)."""
    div = np.abs(divergence_values(field, a_op, layout))
    cls = layout.voxel_class.ravel()[layout.constraint_lin]
    out = {}
    for voxel_class in (VoxelClass.INTERIOR, VoxelClass.NEAR_WALL):
        m = cls == voxel_class
        if m.any():
            out[voxel_class.name] = DivergenceStats(
                float(div[m].mean()), float(div[m].max()), int(m.sum())
            )
    return out


def divergence_table(stats: dict[str, DivergenceStats]) -> str:
    """Three-column style divergence table (plain text)."""
    names = list(stats)
    width = max(12, *(len(n) + 2 for n in names))
    header = "".ljust(10) + "".join(n.rjust(width) for n in names)
    avg_row = "Average".ljust(10) + "".join(f"{stats[n].mean_abs:.4f}".rjust(width) for n in names)
    max_row = "Maximum".ljust(10) + "".join(f"{stats[n].max_abs:.4f}".rjust(width) for n in names)
    return "\n".join([header, avg_row, max_row])


@dataclass(frozen=True)
class CorrelationStats:
    pearson_r: tuple[float, float, float]
    mean_abs_error: tuple[float, float, float]
    n_voxels: int


def plane_region(grid: VolumeGrid, axis: int, index: int) -> np.ndarray:
    """Boolean region selecting one grid plane perpendicular to an axis."""
    if axis not in (0, 1, 2):
        raise ParameterError("axis must be 0, 1, or 2")
    if not (0 <= index < grid.dims[axis]):
        raise ParameterError(f"plane index {index} outside axis extent {grid.dims[axis]}")
    region = np.zeros(grid.shape, dtype=bool)
    sl = [slice(None)] * 3
    sl[2 - axis] = index
    region[tuple(sl)] = True
    return region


def field_correlation(
    a: VelocityField, b: VelocityField, region: np.ndarray | None = None
) -> CorrelationStats:
    """Component-wise Pearson correlation and mean absolute error.

    The region defaults to the voxels inside both vessel masks. A
    zero-variance component in either input has no defined correlation
    and raises.
    """
    if a.grid.shape != b.grid.shape:
        raise ParameterError("fields live on different grids")
    if region is None:
        region = a.vessel_mask & b.vessel_mask
    else:
        region = np.asarray(region, dtype=bool)
        if region.shape != a.grid.shape:
            raise ParameterError("region shape does not match grid")
    if region.sum() < 2:
        raise DataError("correlation region needs at least two voxels")

    r_vals, errors = [], []
    for name, ca, cb in zip("uvw", a.components(), b.components()):
        x = ca[region]
        y = cb[region]
        sx = x.std()
        sy = y.std()
        if sx == 0 or sy == 0:
            raise DataError(f"undefined correlation: component {name} has zero variance")
        r_vals.append(float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy)))
        errors.append(float(np.abs(x - y).mean()))
    return CorrelationStats(tuple(r_vals), tuple(errors), int(region.sum()))


def field_correlation_partial(
    a: VelocityField, b: VelocityField, region: np.ndarray | None = None
) -> CorrelationStats:
    """As field_correlation, but zero-variance components become NaN.

    Report-friendly variant: a phantom with identically-zero cross-flow
    components has no defined correlation there, which is worth printing
    rather than refusing the whole comparison.
    """
    if region is None:
        region = a.vessel_mask & b.vessel_mask
    r_vals, errors = [], []
    for ca, cb in zip(a.components(), b.components()):
        x, y = ca[region], cb[region]
        sx, sy = x.std(), y.std()
        if sx == 0 or sy == 0:
            r_vals.append(float("nan"))
        else:
            r_vals.append(float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy)))
        errors.append(float(np.abs(x - y).mean()))
    return CorrelationStats(tuple(r_vals), tuple(errors), int(region.sum()))


def correlation_table(stats: CorrelationStats, label: str = "region") -> str:
    comp = ("u", "v", "w")

    def fmt(value):
        return "n/a" if np.isnan(value) else f"{value:.4f}"

    lines = ["".ljust(12) + "".join(f"Velocity {c}".rjust(14) for c in comp)]
    lines.append(label.ljust(12) + "".join(fmt(r).rjust(14) for r in stats.pearson_r))
    lines.append("Error (m/s)".ljust(12) + "".join(fmt(e).rjust(14) for e in stats.mean_abs_error))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# no-slip diagnostics: extrapolate the smoothed field onto the wall


def wall_speed_extrapolation(field: VelocityField, geometry: WallGeometry):
    """Velocity magnitude extrapolated to the wall at near-wall voxels.

    Along each walled grid line the three in-vessel nodes at 0, h, 2h
    define a quadratic; its value at the sub-grid wall position -theta*h
    measures how well the field honors no-slip. Per voxel the largest
    magnitude over its wall directions is reported.

    Returns (speeds, lin_indices): one entry per near-wall voxel that has
    at least one usable wall direction.
    """
    vc = field.voxel_class
    vessel = field.vessel_mask
    near_wall = vc == VoxelClass.NEAR_WALL
    best = np.full(vc.shape, -1.0)

    for d in range(N_DIRECTIONS):
        axis, sign = int(DIR_AXIS[d]), int(DIR_SIGN[d])
        theta = geometry.theta[d]
        m = near_wall & np.isfinite(theta)
        if not m.any():
            continue
        inward = -sign  # away from this wall
        has1 = neighbor_values(vessel, axis, inward, False)
        has2 = neighbor_values(neighbor_values(vessel, axis, inward, False), axis, inward, False)
        quad = m & has1 & has2
        lin = m & has1 & ~has2
        sq_sum = np.zeros(vc.shape)
        for comp in field.components():
            u1 = comp
            u2 = neighbor_values(comp, axis, inward, 0.0)
            u3 = neighbor_values(u2, axis, inward, 0.0)
            th = theta
            wall_val = np.where(
                quad,
                0.5 * (th + 1.0) * (th + 2.0) * u1 - th * (th + 2.0) * u2 + 0.5 * th * (th + 1.0) * u3,
                np.where(lin, (1.0 + th) * u1 - th * u2, 0.0),
            )
            sq_sum += wall_val**2
        speed = np.sqrt(sq_sum)
        usable = quad | lin
        best[usable] = np.maximum(best[usable], speed[usable])

    found = best >= 0
    return best[found], np.flatnonzero(found.ravel())


def noslip_pass_fraction(
    field: VelocityField, geometry: WallGeometry, u_ref: float, tol: float = 0.05
) -> float:
    """Fraction of near-wall voxels whose wall-extrapolated speed is small."""
    speeds, _ = wall_speed_extrapolation(field, geometry)
    if speeds.size == 0:
        raise DataError("no near-wall voxels with usable wall directions")
    return float(np.count_nonzero(speeds <= tol * u_ref) / speeds.size)
