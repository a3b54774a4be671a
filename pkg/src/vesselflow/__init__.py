"""Divergence-free smoothing and wall shear stress estimation for masked
volumetric velocity fields.

The package post-processes noisy three-component velocity volumes inside
a vessel mask: wall-aware divergence-free smoothing with sub-grid no-slip
enforcement, automatic smoothing-strength selection by generalized cross
validation, and wall shear stress from a Musker-profile fit of the
near-wall velocity.
"""

from .errors import (
    ConvergenceError,
    DataError,
    DegenerateHistogramError,
    DegenerateSpectrumError,
    NumericalError,
    OutOfDomainError,
    ParameterError,
    VesselflowError,
)
from .grid import (
    ScalarField,
    SurfaceMesh,
    VelocityField,
    VolumeGrid,
    VoxelClass,
    WallGeometry,
    classify_voxels,
    sample_scalar_trilinear,
    sample_trilinear,
)
from .operators import (
    FieldLayout,
    SparseOperator,
    StencilCoefficients,
    assemble_divergence,
    assemble_smoother,
    first_derivative_stencil,
    second_derivative_stencil,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
