"""Conjugate heat equation on Ricci-flow backgrounds: solver and checks."""

from .grids import (
    ColatitudeGrid,
    FrameTensorField,
    GridMismatchError,
    PeriodicGrid1D,
    PeriodicGrid2D,
    ScalarField,
)
from .geometry import (
    CurvatureBounds,
    CurvatureFields,
    FlowBlowUpError,
    FlowTrajectory,
    GeometrySnapshot,
    Region,
    curvature_bounds,
    curvature_data,
    evolve_rotsym_surface,
    geodesic_distance,
    gradient_inner,
    gradient_sq,
    hessian_frame,
    integrate,
    laplace_beltrami,
    make_shrinking_sphere,
    make_torus,
    snapshot_at,
    volume,
)
from .conjugate import (
    ConjugateSolveError,
    PositivityLossError,
    SolutionHistory,
    pde_residual,
    solve_conjugate,
    u_time_derivative,
)

__version__ = "0.1.0"
