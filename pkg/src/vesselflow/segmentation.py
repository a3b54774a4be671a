"""From per-slice intensity images to mask, level set, and wall surface.

The two neighborhood denoisers operate slice by slice with window
clipping at image borders (the window population shrinks at edges).
Binarization uses Otsu's histogram threshold; the binary mask is turned
into a signed Euclidean distance field whose zero crossings place the
wall at sub-grid positions, and the wall surface itself is extracted by
marching cubes on that level set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, DegenerateHistogramError, ParameterError
from .grid import (
    DIR_AXIS,
    DIR_SIGN,
    N_DIRECTIONS,
    SurfaceMesh,
    VolumeGrid,
    VoxelClass,
    WallGeometry,
    classify_voxels,
    neighbor_values,
    sample_scalar_trilinear,
)

#: sub-grid wall fractions are clamped below at this value: the wall
#: stencils carry 1/theta factors and blow up as theta -> 0
DEFAULT_THETA_MIN = 0.05

OTSU_BINS = 256

COMBINE_STRATEGIES = ("product", "min", "mean")


@dataclass(frozen=True)
class ImageStack:
    """Per-slice signed intensity images, stored (nslices, ny, nx)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ParameterError("image stack must be 3-D (nslices, ny, nx)")

    @property
    def dims(self) -> tuple[int, int, int]:
        ns, ny, nx = self.data.shape
        return (nx, ny, ns)

    @classmethod
    def from_array(cls, data) -> "ImageStack":
        arr = np.asarray(data, dtype=float).copy()
        arr.flags.writeable = False
        return cls(arr)


def _check_window(window: int) -> int:
    window = int(window)
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"window must be an odd integer >= 3, got {window}")
    return window


def _window_sums(arr: np.ndarray, window: int) -> np.ndarray:
    size = (1, window, window)
    return ndimage.uniform_filter(arr, size=size, mode="constant", cval=0.0) * window**2


def _window_counts(shape, window: int) -> np.ndarray:
    return _window_sums(np.ones(shape), window)


def neighborhood_variance(img: ImageStack, window: int = 3) -> ImageStack:
    """Per-pixel standard deviation over a clipped square window.

    Output = sqrt( (1/count) * sum (f - mean)^2 ) per slice. The global
    mean is subtracted up front so a constant intensity shift cannot leak
    through the sum-of-squares cancellation.
    """
    window = _check_window(window)
    data = img.data - img.data.mean()  # guards the sum-of-squares cancellation
    counts = _window_counts(data.shape, window)
    mean = _window_sums(data, window) / counts
    var = _window_sums(data * data, window) / counts - mean**2
    return ImageStack.from_array(np.sqrt(np.maximum(var, 0.0)))


def neighborhood_sign(img: ImageStack, window: int = 3) -> ImageStack:
    """Squared imbalance of positive vs negative pixels in the window.

    Zero-valued pixels belong to neither count. Border windows are
    clipped, so only in-image pixels are counted.
    """
    window = _check_window(window)
    pos = _window_sums((img.data > 0).astype(float), window)
    neg = _window_sums((img.data < 0).astype(float), window)
    return ImageStack.from_array(np.round(pos - neg) ** 2)


def _normalize01(arr: np.ndarray) -> np.ndarray:
    lo = arr.min()
    hi = arr.max()
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def combine_and_median(
    var_map: ImageStack,
    sign_map: ImageStack,
    median_window: int = 3,
    strategy: str = "product",
) -> ImageStack:
    """Fuse the two denoised maps and median-filter each slice.

    Both maps are min-max normalized to [0, 1] before fusing; the fusing
    rule is selectable (product, min, or mean of the normalized maps).
    """
    median_window = _check_window(median_window)
    if strategy not in COMBINE_STRATEGIES:
        raise ParameterError(f"strategy must be one of {COMBINE_STRATEGIES}, got {strategy!r}")
    if var_map.data.shape != sign_map.data.shape:
        raise ParameterError(
            f"map shapes differ: {var_map.data.shape} vs {sign_map.data.shape}"
        )
    a = _normalize01(var_map.data)
    b = _normalize01(sign_map.data)
    if strategy == "product":
        combined = a * b
    elif strategy == "min":
        combined = np.minimum(a, b)
    else:
        combined = 0.5 * (a + b)
    filtered = ndimage.median_filter(combined, size=(1, median_window, median_window))
    return ImageStack.from_array(filtered)


def otsu_threshold(values: np.ndarray, bins: int = OTSU_BINS) -> tuple[int, float]:
    """Histogram threshold maximizing between-class variance.

    Returns (bin index k, threshold value): class 0 is bins <= k, and the
    threshold value is the upper edge of bin k. Ties pick the smallest k.
    """
    flat = np.asarray(values, dtype=float).ravel()
    lo, hi = flat.min(), flat.max()
    if not (hi > lo):
        raise DegenerateHistogramError("cannot threshold a constant image")
    hist, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    p = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    omega = np.cumsum(p)[:-1]  # mass of class 0 for k = 0 .. bins-2
    mu = np.cumsum(p * centers)[:-1]
    mu_total = float(np.sum(p * centers))
    denom = omega * (1.0 - omega)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = np.where(denom > 0, (mu_total * omega - mu) ** 2 / denom, -1.0)
    k = int(np.argmax(sigma_b))  # argmax returns the first (smallest) maximizer
    return k, float(edges[k + 1])


def quantize_to_bins(values: np.ndarray, bins: int = OTSU_BINS) -> np.ndarray:
    """Histogram bin index of every pixel (uniform bins over [min, max])."""
    flat = np.asarray(values, dtype=float)
    lo, hi = flat.min(), flat.max()
    q = np.floor((flat - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(q, 0, bins - 1)


def otsu_binarize(img: ImageStack, bins: int = OTSU_BINS) -> np.ndarray:
    """Boolean mask of pixels above the Otsu threshold."""
    k, _value = otsu_threshold(img.data, bins=bins)
    return quantize_to_bins(img.data, bins=bins) > k


# ---------------------------------------------------------------------------
# level set, sub-grid wall fractions, surface


def signed_distance_from_mask(mask: np.ndarray, grid: VolumeGrid) -> np.ndarray:
    """Signed Euclidean distance to the mask boundary, negative inside."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.shape:
        raise ParameterError("mask shape does not match grid")
    sampling = (grid.spacing[2], grid.spacing[1], grid.spacing[0])
    dist_in = ndimage.distance_transform_edt(mask, sampling=sampling)
    dist_out = ndimage.distance_transform_edt(~mask, sampling=sampling)
    return dist_out - dist_in


def wall_fractions(
    phi: np.ndarray,
    voxel_class: np.ndarray,
    theta_min: float = DEFAULT_THETA_MIN,
) -> tuple[np.ndarray, int]:
    """Sub-grid wall offsets from level-set zero crossings.

    For every near-wall voxel and each axis direction whose neighbor is
    exterior, the linear zero crossing of phi along that grid line gives
    the wall distance as a fraction of the axis spacing, clamped to
    [theta_min, 1]. Returns (theta, count clamped from below).
    """
    if not (0.0 < theta_min <= 1.0):
        raise ParameterError(f"theta_min must lie in (0, 1], got {theta_min}")
    theta = np.full((N_DIRECTIONS,) + phi.shape, np.nan)
    near_wall = voxel_class == VoxelClass.NEAR_WALL
    exterior = voxel_class == VoxelClass.EXTERIOR
    clamped = 0
    for d in range(N_DIRECTIONS):
        axis, sign = int(DIR_AXIS[d]), int(DIR_SIGN[d])
        m = near_wall & neighbor_values(exterior, axis, sign, False)
        if not m.any():
            continue
        phi1 = phi[m]
        phi2 = neighbor_values(phi, axis, sign, np.nan)[m]
        denom = phi2 - phi1
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(denom > 0, -phi1 / denom, 1.0)
        t = np.where(np.isfinite(t), t, 1.0)
        clamped += int(np.count_nonzero(t < theta_min))
        theta[d][m] = np.clip(t, theta_min, 1.0)
    return theta, clamped


def extract_surface(phi: np.ndarray, grid: VolumeGrid) -> SurfaceMesh:
    """Triangulated zero isosurface with outward normals from grad(phi)."""
    if phi.shape != grid.shape:
        raise ParameterError("phi shape does not match grid")
    if phi.min() >= 0 or phi.max() <= 0:
        raise DataError("level set does not change sign; no surface to extract")
    from skimage.measure import marching_cubes

    hz, hy, hx = grid.spacing[2], grid.spacing[1], grid.spacing[0]
    verts_zyx, faces, _, _ = marching_cubes(phi, level=0.0, spacing=(hz, hy, hx))
    vertices = verts_zyx[:, ::-1] + np.asarray(grid.origin)

    gz, gy, gx = np.gradient(phi, hz, hy, hx)
    grads = np.stack(
        [sample_scalar_trilinear(grid, g, vertices) for g in (gx, gy, gz)], axis=-1
    )
    norms = np.linalg.norm(grads, axis=1)
    fallback = norms < 1e-12
    if fallback.any():
        grads[fallback] = (0.0, 0.0, 1.0)
        norms[fallback] = 1.0
    normals = grads / norms[:, None]
    return SurfaceMesh(vertices, faces.astype(np.int64), normals)


def wall_geometry_from_phi(
    phi: np.ndarray,
    grid: VolumeGrid,
    voxel_class: np.ndarray | None = None,
    theta_min: float = DEFAULT_THETA_MIN,
    with_surface: bool = True,
) -> WallGeometry:
    """Bundle a level set into a WallGeometry (fractions plus surface)."""
    phi = np.asarray(phi, dtype=float)
    if voxel_class is None:
        voxel_class = classify_voxels(phi < 0)
    theta, clamped = wall_fractions(phi, voxel_class, theta_min)
    surface = extract_surface(phi, grid) if with_surface else None
    phi = phi.copy()
    phi.flags.writeable = False
    theta.flags.writeable = False
    return WallGeometry(
        grid,
        phi,
        theta,
        surface,
        diagnostics={"theta_min": theta_min, "theta_clamped_low": clamped},
    )


def levelset_from_mask(
    mask: np.ndarray,
    grid: VolumeGrid,
    theta_min: float = DEFAULT_THETA_MIN,
    with_surface: bool = True,
) -> WallGeometry:
    """Signed distance, wall fractions, and surface from a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("empty mask: no vessel region")
    if mask.all():
        raise DataError("mask covers the whole volume: no wall anywhere")
    phi = signed_distance_from_mask(mask, grid)
    voxel_class = classify_voxels(mask)
    return wall_geometry_from_phi(phi, grid, voxel_class, theta_min, with_surface)
