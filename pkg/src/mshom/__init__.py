"""Localized multiscale bases for PDEs with rough coefficients."""

from .grid import (
    DOMAIN_DIAM,
    CoarseLattice,
    FineMesh,
    Subdomain,
    build_coarse_lattice,
    build_fine_mesh,
    buffered_subdomain,
    extract_subdomain,
    whole_mesh_subdomain,
)
from .coeff import (
    CoefficientField,
    FieldSpec,
    gen_channel,
    gen_checkerboard,
    gen_constant,
    gen_logtrig,
    gen_percolation,
    gen_trig,
    load_field,
    save_field,
)
from .fem import (
    FEFunction,
    NormReport,
    SolverConfig,
    SolverError,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    flux_norm,
    norms,
    solve_spd,
    weak_laplacian_rhs,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
