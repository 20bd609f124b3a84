"""Multiscale multipoint-flux mixed finite element solver for Darcy-Forchheimer flow.

The package discretizes the nonlinear Darcy-Forchheimer model

    mu kappa^-1 u + beta rho |u| u + grad p = 0,    div u = f

on rectangular fine grids with lowest-order BDM velocities and cellwise
pressures, using corner (trapezoidal) quadrature so the velocity mass matrix
decouples into per-vertex blocks.  On top of the fine discretization it
builds generalized multiscale coarse pressure spaces: per-coarse-element
snapshot solves, spectral (offline) bases, residual-selected offline updates
with the Forchheimer-corrected coefficient, and residual-driven online
enrichment under a four-color schedule.  :mod:`msforch.cli` wraps the
library in a batch driver for error and iteration studies.
"""

from .errors import (
    AssemblyError,
    ConfigurationError,
    DegenerateElementError,
    LinearSolverError,
    SingularCornerError,
    SingularSystemError,
)
from .fields import (
    SYNTHETIC_KINDS,
    ScalarCellField,
    forchheimer_coeff,
    gen_synthetic,
    load_raster,
    save_raster,
)
from .grid import (
    CoarseGrid,
    FineGrid,
    Subgrid,
    bilinear_map,
    build_coarse_grid,
    build_fine_grid,
    subgrid,
)
from .mfmfe import (
    BoundarySpec,
    VertexBlockMatrix,
    all_dirichlet_spec,
    assemble_divergence,
    assemble_rhs,
    assemble_velocity_matrix,
    corner_velocities,
    corner_velocity,
    five_spot,
    left_right_spec,
    no_flow_spec,
    piola,
    quadrature_norm_matrix,
    reference_basis,
)
from .solve import (
    FlowSolution,
    LinearizedSystem,
    NonlinearConfig,
    cell_divergence,
    nonlinear_solve,
    saddle_oracle,
    schur_solve,
    velocity_error_norm,
)
from .offline import (
    ReductionMap,
    SpectralSpace,
    assemble_reduction,
    build_offline_space,
    build_snapshots,
    build_snapshots_oversampled,
    conservation_residuals,
    load_triplets,
    save_triplets,
    select_by_fraction,
    solve_offline,
    spectral_decompose,
    update_offline,
)
from .online import (
    VARIANTS,
    EnrichmentState,
    HistoryRow,
    color_classes,
    detect_plateau,
    enrich_adaptive,
    enrich_uniform,
    error_metrics,
    init_enrichment,
    ms_solve,
    online_basis,
    online_residuals,
    solve_enriched,
    sweep_final_errors,
)

__version__ = "0.1.0"

__all__ = [
    "AssemblyError",
    "BoundarySpec",
    "CoarseGrid",
    "ConfigurationError",
    "DegenerateElementError",
    "EnrichmentState",
    "FineGrid",
    "FlowSolution",
    "HistoryRow",
    "LinearSolverError",
    "LinearizedSystem",
    "NonlinearConfig",
    "ReductionMap",
    "SYNTHETIC_KINDS",
    "ScalarCellField",
    "SingularCornerError",
    "SingularSystemError",
    "SpectralSpace",
    "Subgrid",
    "VARIANTS",
    "VertexBlockMatrix",
    "all_dirichlet_spec",
    "assemble_divergence",
    "assemble_reduction",
    "assemble_rhs",
    "assemble_velocity_matrix",
    "bilinear_map",
    "build_coarse_grid",
    "build_fine_grid",
    "build_offline_space",
    "build_snapshots",
    "build_snapshots_oversampled",
    "cell_divergence",
    "color_classes",
    "conservation_residuals",
    "corner_velocities",
    "corner_velocity",
    "detect_plateau",
    "enrich_adaptive",
    "enrich_uniform",
    "error_metrics",
    "five_spot",
    "forchheimer_coeff",
    "gen_synthetic",
    "init_enrichment",
    "left_right_spec",
    "load_raster",
    "load_triplets",
    "ms_solve",
    "no_flow_spec",
    "nonlinear_solve",
    "online_basis",
    "online_residuals",
    "piola",
    "quadrature_norm_matrix",
    "reference_basis",
    "saddle_oracle",
    "save_raster",
    "save_triplets",
    "schur_solve",
    "select_by_fraction",
    "solve_enriched",
    "solve_offline",
    "spectral_decompose",
    "subgrid",
    "sweep_final_errors",
    "update_offline",
    "velocity_error_norm",
    "__version__",
]
