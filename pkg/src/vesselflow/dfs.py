"""Constrained penalized least-squares smoothing of masked velocity fields.

The smoothed field minimizes

    (U - U_m)^T W (U - U_m) + s ||D U||^2    subject to  A U = 0,

whose stationarity conditions form the symmetric indefinite saddle-point
system

    [ W + s D^T D   A^T ] [ U ]   [ W U_m ]
    [ A             0   ] [ l ] = [ 0     ].

W is a diagonal 0/1 observation-weight matrix (missing data and flagged
outliers carry weight zero and are filled in by smoothness plus the
divergence constraint). The system is solved with preconditioned MINRES.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, ParameterError
from .grid import VelocityField, VoxelClass, WallGeometry, _shifted
from .operators import (
    FieldLayout,
    SparseOperator,
    assemble_divergence,
    assemble_smoother,
)


@dataclass
class DfsConfig:
    """Knobs of the smoothing stage; defaults match the documented method."""

    mode: str = "improved"
    s: float | None = None  # None selects s by generalized cross validation
    gcv_log10_range: tuple[float, float] = (-6.0, 6.0)
    gcv_coarse_points: int = 13
    gcv_log10_tol: float = 0.05
    spectrum_count: int = 200
    rtol: float = 1e-8
    tol_div: float = 1e-6
    maxiter_factor: float = 20.0
    outlier_prepass: bool = True
    outlier_threshold: float = 2.0
    outlier_eps: float = 0.1  # in velocity units


class DfsProblem:
    """Assembled operators, weights, and observations for one solve."""

    def __init__(self, a_op, d_op, weights, u_m, s):
        n_vel = d_op.shape[0]
        if d_op.shape != (n_vel, n_vel):
            raise ParameterError("smoothness operator must be square")
        if a_op.shape[1] != n_vel:
            raise ParameterError(
                f"divergence columns {a_op.shape[1]} do not match unknowns {n_vel}"
            )
        weights = np.asarray(weights, dtype=float)
        u_m = np.asarray(u_m, dtype=float)
        if weights.shape != (n_vel,) or u_m.shape != (n_vel,):
            raise ParameterError("weights and observations must match the unknown vector")
        if weights.min(initial=0.0) < 0 or weights.max(initial=0.0) > 1:
            raise ParameterError("weights must lie in [0, 1]")
        if s < 0:
            raise ParameterError("smoothing parameter must be non-negative")
        self.a_op = a_op.tocsr()
        self.d_op = d_op.tocsr()
        self.weights = weights
        self.u_m = u_m
        self.s = float(s)
        self._dtd = None

    @property
    def n_velocity(self) -> int:
        return self.d_op.shape[0]

    @property
    def n_constraint(self) -> int:
        return self.a_op.shape[0]

    @property
    def dtd(self) -> SparseOperator:
        if self._dtd is None:
            dtd = (self.d_op.T @ self.d_op).tocsr()
            dtd.sum_duplicates()
            self._dtd = dtd
        return self._dtd

    def with_s(self, s: float) -> "DfsProblem":
        other = DfsProblem(self.a_op, self.d_op, self.weights, self.u_m, s)
        other._dtd = self._dtd
        return other


@dataclass(frozen=True)
class KktSystem:
    """One assembled saddle-point system."""

    matrix: SparseOperator
    rhs: np.ndarray
    n_velocity: int
    n_constraint: int
    s: float


@dataclass(frozen=True)
class DfsSolution:
    u: np.ndarray
    lam: np.ndarray
    kkt_residual: float
    iterations: int
    s_used: float
    feasibility: float  # max |A u| / max |u|


def assemble_kkt(problem: DfsProblem) -> KktSystem:
    """Build the saddle-point matrix and right-hand side [W U_m; 0]."""
    h_block = sp.diags(problem.weights) + problem.s * problem.dtd
    matrix = sp.bmat([[h_block, problem.a_op.T], [problem.a_op, None]], format="csr")
    rhs = np.concatenate([problem.weights * problem.u_m, np.zeros(problem.n_constraint)])
    return KktSystem(matrix, rhs, problem.n_velocity, problem.n_constraint, problem.s)


def _block_jacobi_preconditioner(system: KktSystem):
    """Diagonal of the velocity block plus a Schur-diagonal estimate."""
    nv = system.n_velocity
    p_vel = system.matrix.diagonal()[:nv].copy()
    floor = 1e-8 * max(p_vel.max(initial=0.0), 1.0)
    p_vel = np.maximum(p_vel, floor)

    a_op = system.matrix[nv:, :nv]
    p_con = np.asarray((a_op.multiply(a_op)) @ (1.0 / p_vel)).ravel()
    p_con = np.maximum(p_con, 1e-8 * max(p_con.max(initial=0.0), 1.0))

    inv_diag = np.concatenate([1.0 / p_vel, 1.0 / p_con])
    return spla.LinearOperator(system.matrix.shape, matvec=lambda x: inv_diag * x)


def solve_kkt(
    system: KktSystem,
    rtol: float = 1e-8,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
    tol_div: float = 1e-6,
) -> DfsSolution:
    """Preconditioned MINRES solve of the saddle-point system.

    Convergence is measured by the normwise backward error
    ||K x - b|| / (||K|| ||x|| + ||b||), which stays meaningful when a
    large s makes the velocity block dominate the matrix scale. A sparse
    least-squares projection afterwards tightens the constraint block
    whenever the feasibility check max|A u| <= tol_div * max|u| is not
    already met.
    """
    nv, nc = system.n_velocity, system.n_constraint
    if max_iter is None:
        max_iter = int(20.0 * math.sqrt(nv)) + 100
    rhs_norm = np.linalg.norm(system.rhs)
    if rhs_norm == 0.0:
        zero = np.zeros(nv + nc)
        return DfsSolution(zero[:nv], zero[nv:], 0.0, 0, system.s, 0.0)
    # infinity-norm of the matrix: scale reference for the backward error
    row_sums = np.asarray(abs(system.matrix).sum(axis=1)).ravel()
    matrix_scale = float(row_sums.max(initial=0.0))

    def backward_error(vec):
        resid = system.matrix @ vec - system.rhs
        return np.linalg.norm(resid) / (matrix_scale * np.linalg.norm(vec) + rhs_norm)

    precon = _block_jacobi_preconditioner(system)
    iterations = 0
    x = x0 if x0 is not None else np.zeros(nv + nc)
    error = backward_error(x)

    budget = max_iter
    while error > rtol and budget > 0:
        counter = [0]

        def count(_xk):
            counter[0] += 1

        x, _info = spla.minres(
            system.matrix,
            system.rhs,
            x0=x,
            rtol=max(rtol * 1e-2, 1e-13),
            maxiter=budget,
            M=precon,
            callback=count,
        )
        iterations += counter[0]
        budget -= max(counter[0], 1)
        new_error = backward_error(x)
        if new_error >= error * 0.999 and new_error > rtol:
            break  # at the attainable floor
        error = new_error

    if error > rtol:
        raise ConvergenceError(
            f"KKT solver stalled at relative residual {error:.3e} "
            f"after {iterations} iterations (target {rtol:.1e})",
            residual=error,
            iterations=iterations,
        )

    u = x[:nv]
    lam = x[nv:]
    a_op = system.matrix[nv:, :nv]
    u_scale = max(np.abs(u).max(initial=0.0), 1e-300)
    feas = np.abs(a_op @ u).max(initial=0.0) / u_scale
    if feas > 0.5 * tol_div and nc > 0:
        u = _project_divergence_free(a_op, u, tol_div * u_scale)
        feas = np.abs(a_op @ u).max(initial=0.0) / max(np.abs(u).max(initial=0.0), 1e-300)
        error = backward_error(np.concatenate([u, lam]))
    return DfsSolution(u, lam, error, iterations, system.s, feas)


def _project_divergence_free(a_op, u, tol_abs):
    """Least-change correction u - A^T mu with A A^T mu = A u (via CG)."""
    gram = (a_op @ a_op.T).tocsr()
    rhs = a_op @ u
    diag = np.maximum(gram.diagonal(), 1e-30)
    precon = spla.LinearOperator(gram.shape, matvec=lambda x: x / diag)
    mu, _info = spla.cg(gram, rhs, rtol=1e-12, atol=0.01 * tol_abs, M=precon, maxiter=2000)
    return u - a_op.T @ mu


def normalized_median_outliers(
    field: VelocityField, threshold: float = 2.0, eps: float = 0.1
) -> np.ndarray:
    """Flag outlier voxels with the normalized median test.

    For every in-vessel voxel and each component, the residual to the
    median of the 26 in-vessel neighbors is normalized by the median of
    the neighbors' own residuals plus eps (in velocity units); a voxel is
    flagged when any component exceeds threshold.
    """
    if threshold <= 0 or eps <= 0:
        raise ParameterError("threshold and eps must be positive")
    vessel = field.vessel_mask
    flagged = np.zeros(vessel.shape, dtype=bool)
    offsets = [
        (dz, dy, dx)
        for dz in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
        if (dz, dy, dx) != (0, 0, 0)
    ]
    for comp in field.components():
        stack = np.empty((len(offsets),) + vessel.shape)
        for idx, (dz, dy, dx) in enumerate(offsets):
            vals = comp
            ok = vessel
            for np_axis, delta in ((0, dz), (1, dy), (2, dx)):
                if delta:
                    vals = _shifted(vals, np_axis, delta, np.nan)
                    ok = _shifted(ok, np_axis, delta, False)
            stack[idx] = np.where(ok, vals, np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices
            med = np.nanmedian(stack, axis=0)
            spread = np.nanmedian(np.abs(stack - med), axis=0)
        ratio = np.abs(comp - med) / (spread + eps)
        flagged |= vessel & np.isfinite(ratio) & (ratio > threshold)
    return flagged


@dataclass(frozen=True)
class SmoothResult:
    """Smoothed field plus everything the run reports about itself."""

    field: VelocityField
    solution: DfsSolution
    s_used: float
    s_fixed: bool
    outlier_voxels: int
    diagnostics: dict = field(default_factory=dict)


def smooth_field(
    velocity: VelocityField, geometry: WallGeometry | None, config: DfsConfig | None = None
) -> SmoothResult:
    """Full smoothing stage: assemble, flag outliers, pick s, solve.

    Returns a field with the same layout (classification and weights are
    carried over; flagged outliers keep their zeroed weight).
    """
    config = config or DfsConfig()
    layout = FieldLayout.from_field(velocity)
    diagnostics: dict = {}
    a_op = assemble_divergence(layout, geometry, config.mode, diagnostics)
    d_op = assemble_smoother(layout, geometry, config.mode, diagnostics)

    weight_volume = np.array(velocity.weight)
    n_outliers = 0
    if config.outlier_prepass:
        flagged = normalized_median_outliers(
            velocity, threshold=config.outlier_threshold, eps=config.outlier_eps
        )
        n_outliers = int(flagged.sum())
        weight_volume[flagged] = 0.0
    working = VelocityField.from_components(
        velocity.grid,
        velocity.u,
        velocity.v,
        velocity.w,
        velocity.voxel_class,
        weight_volume,
    )

    weights = layout.pack_weights(working)
    u_m = layout.pack(working)
    problem = DfsProblem(a_op, d_op, weights, u_m, 0.0)

    if config.s is None:
        from . import gcv  # deferred: gcv drives this module's solver

        model = gcv.spectrum_model(problem.dtd, m=config.spectrum_count)
        s_used = gcv.select_s(
            problem,
            model,
            search_range=config.gcv_log10_range,
            coarse_points=config.gcv_coarse_points,
            log_tol=config.gcv_log10_tol,
            rtol=config.rtol,
            tol_div=config.tol_div,
        )
        s_fixed = False
    else:
        s_used = float(config.s)
        s_fixed = True

    system = assemble_kkt(problem.with_s(s_used))
    max_iter = int(config.maxiter_factor * math.sqrt(problem.n_velocity)) + 100
    solution = solve_kkt(system, rtol=config.rtol, max_iter=max_iter, tol_div=config.tol_div)
    smoothed = layout.unpack(solution.u, working)
    diagnostics["outlier_voxels"] = n_outliers
    return SmoothResult(smoothed, solution, s_used, s_fixed, n_outliers, diagnostics)
