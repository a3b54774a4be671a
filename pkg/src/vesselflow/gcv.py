"""Automatic smoothing-strength selection by generalized cross validation.

GCV(s) = [ RSS(s) / n_obs ] / [ 1 - Tr[(I + s D^T D)^-1] / N ]^2

with N the total number of scalar unknowns and n_obs the number of
observed (positive-weight) values. RSS is the weighted misfit of the
constrained solution at s. The trace is approximated spectrally: the
largest eigenvalues of D^T D are computed exactly with a Lanczos-type
solver, the remaining spectrum is extrapolated from an exponential fit
lambda_i ~ a * exp(-b i), and the trace becomes sum_i 1/(1 + s lambda_i).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .dfs import DfsProblem, assemble_kkt, solve_kkt
from .errors import (
    ConvergenceError,
    DegenerateSpectrumError,
    NumericalError,
    ParameterError,
)

#: below this size the full spectrum is computed densely instead of fitted
DENSE_SPECTRUM_CUTOFF = 400

#: exact eigenvalues kept by default before the exponential tail takes over
DEFAULT_SPECTRUM_COUNT = 200


@dataclass(frozen=True)
class SpectrumModel:
    """Exact top eigenvalues of D^T D plus an exponential tail model."""

    exact_eigs: np.ndarray  # descending, non-negative
    fit: tuple[float, float] | None  # (a, b); None when no tail is needed
    m: int
    total: int


def top_eigenvalues(dtd, m: int, rtol: float = 1e-8) -> np.ndarray:
    """Largest m eigenvalues of a symmetric PSD sparse matrix, descending.

    Uses implicitly restarted Lanczos with reorthogonalization; small
    systems (or m close to the dimension) fall back to a dense solve.
    """
    n = dtd.shape[0]
    if dtd.shape != (n, n):
        raise ParameterError("operator must be square")
    if not (1 <= m <= n):
        raise ParameterError(f"eigenvalue count must lie in [1, {n}], got {m}")
    if n < DENSE_SPECTRUM_CUTOFF or m > n - 2:
        dense = np.asarray(dtd.todense()) if hasattr(dtd, "todense") else np.asarray(dtd)
        eigs = np.linalg.eigvalsh(dense)[::-1][:m]
    else:
        rng = np.random.default_rng(171717)  # fixed start vector: deterministic runs
        v0 = rng.standard_normal(n)
        try:
            eigs = spla.eigsh(
                dtd, k=m, which="LA", tol=rtol, maxiter=30 * m, v0=v0,
                return_eigenvectors=False,
            )
        except spla.ArpackNoConvergence as exc:
            raise ConvergenceError(
                f"eigensolver converged only {len(exc.eigenvalues)} of {m} eigenvalues",
                residual=None,
                iterations=30 * m,
            ) from exc
        eigs = np.sort(eigs)[::-1]
    eigs = np.maximum(eigs, 0.0)
    # solver noise: eigenvalues this far below the top are genuine zeros,
    # which keeps the s -> infinity trace limit at the operator's nullity
    eigs[eigs < 1e-12 * eigs.max(initial=0.0)] = 0.0
    return eigs


def fit_spectrum(exact_eigs, total: int) -> SpectrumModel:
    """Least-squares exponential fit of the computed spectrum head.

    log(lambda_i) is regressed on the 1-based rank i over the strictly
    positive eigenvalues; zeros are excluded from the fit and the
    extrapolated tail is floored at zero (exp never reaches it).
    """
    eigs = np.asarray(exact_eigs, dtype=float)
    if eigs.ndim != 1 or eigs.size == 0:
        raise ParameterError("expected a non-empty 1-D eigenvalue array")
    if np.any(np.diff(eigs) > 1e-12 * max(eigs.max(initial=0.0), 1.0)):
        raise ParameterError("eigenvalues must be sorted in descending order")
    if total < eigs.size:
        raise ParameterError("total dimension smaller than the computed head")
    positive = np.flatnonzero(eigs > 0)
    if positive.size == 0:
        raise DegenerateSpectrumError(
            "all eigenvalues are zero; the trace equals the dimension exactly"
        )
    if positive.size < 10:
        raise ParameterError("need at least 10 positive eigenvalues to fit the spectrum")
    ranks = positive + 1.0
    slope, intercept = np.polyfit(ranks, np.log(eigs[positive]), 1)
    a = float(math.exp(intercept))
    b = float(max(-slope, 0.0))
    return SpectrumModel(eigs, (a, b), int(eigs.size), int(total))


def spectrum_model(dtd, m: int = DEFAULT_SPECTRUM_COUNT, rtol: float = 1e-8) -> SpectrumModel:
    """Spectrum head plus tail fit for a smoothness Gram matrix."""
    n = dtd.shape[0]
    if n < DENSE_SPECTRUM_CUTOFF:
        m = n  # full dense spectrum, nothing to extrapolate
    m = min(m, n)
    eigs = top_eigenvalues(dtd, m, rtol=rtol)
    if m == n:
        return SpectrumModel(eigs, None, int(m), int(n))
    try:
        return fit_spectrum(eigs, n)
    except DegenerateSpectrumError:
        # zero head of a PSD matrix means the whole spectrum is zero
        return SpectrumModel(eigs, None, int(m), int(n))


def approximate_trace(model: SpectrumModel, s: float) -> float:
    """Tr[(I + s D^T D)^-1] via exact head plus fitted exponential tail."""
    if s < 0:
        raise ParameterError("smoothing parameter must be non-negative")
    head = float(np.sum(1.0 / (1.0 + s * model.exact_eigs)))
    n_tail = model.total - model.m
    if n_tail <= 0:
        return head
    if model.fit is None:
        return head + float(n_tail)  # degenerate spectrum: all-zero tail
    a, b = model.fit
    ranks = np.arange(model.m + 1, model.total + 1, dtype=float)
    lam = a * np.exp(-b * ranks)
    return head + float(np.sum(1.0 / (1.0 + s * lam)))


def gcv_value(problem: DfsProblem, model: SpectrumModel, s: float, **solver_kw) -> float:
    """GCV score at one smoothing strength (one constrained solve)."""
    value, _ = _gcv_sample(problem, model, s, **solver_kw)
    return value


def _gcv_sample(problem, model, s, x0=None, rtol=1e-8, tol_div=1e-6):
    if s <= 0:
        raise ParameterError("GCV is defined for s > 0")
    solution = solve_kkt(assemble_kkt(problem.with_s(s)), rtol=rtol, x0=x0, tol_div=tol_div)
    resid = solution.u - problem.u_m
    rss = float(resid @ (problem.weights * resid))
    n_obs = int(np.count_nonzero(problem.weights > 0))
    if n_obs == 0:
        raise ParameterError("GCV needs at least one observed value")
    total = problem.n_velocity
    denom = 1.0 - approximate_trace(model, s) / total
    if denom <= 0:
        raise NumericalError(f"GCV denominator vanished at s = {s:g}")
    return (rss / n_obs) / denom**2, solution


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def select_s(
    problem: DfsProblem,
    model: SpectrumModel,
    search_range: tuple[float, float] = (-6.0, 6.0),
    coarse_points: int = 13,
    log_tol: float = 0.05,
    rtol: float = 1e-8,
    tol_div: float = 1e-6,
) -> float:
    """Minimize GCV over log10 s: coarse bracketing then golden section.

    Returns the boundary value with a warning when no interior minimum
    exists inside the search range.
    """
    lo, hi = search_range
    if not (hi > lo) or coarse_points < 3:
        raise ParameterError("invalid search range for the smoothing parameter")

    cache: dict[float, float] = {}
    state = {"x0": None}

    def evaluate(log_s: float) -> float:
        key = round(log_s, 12)
        if key not in cache:
            value, solution = _gcv_sample(
                problem, model, 10.0**log_s, x0=state["x0"], rtol=rtol, tol_div=tol_div
            )
            state["x0"] = np.concatenate([solution.u, solution.lam])
            cache[key] = value
        return cache[key]

    grid = np.linspace(lo, hi, coarse_points)
    values = [evaluate(g) for g in grid]
    best = int(np.argmin(values))
    if best == 0 or best == coarse_points - 1:
        warnings.warn(
            f"GCV minimum at the search boundary (log10 s = {grid[best]:g}); "
            "consider widening the range",
            stacklevel=2,
        )
        return float(10.0 ** grid[best])

    a, b = grid[best - 1], grid[best + 1]
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = evaluate(x1), evaluate(x2)
    while (b - a) > log_tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = evaluate(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = evaluate(x2)
    return float(10.0 ** ((a + b) / 2.0))
