"""Reduced-basis localized orthogonal decomposition solvers.

Multiscale finite element solvers for parametrized diffusion problems
with rough coefficients: localized correctors, greedy reduced bases for
the corrector families, fast online assembly for new parameter values,
and a Newton driver for a nonlinear stationary infiltration problem.
"""

from .errors import (
    CoercivityError,
    DatabaseFormatError,
    DegeneratePatchError,
    IllConditionedBasisError,
    InconsistentDatabaseError,
    InvalidArgumentError,
    NonconvergenceError,
    RBLODError,
    SingularMatrixError,
    ZeroReferenceError,
)
from .grid import (
    Mesh,
    MeshHierarchy,
    Patch,
    build_unit_square_mesh,
    element_patch,
    node_patch_union,
    node_support,
    refine_uniform,
)

__version__ = "0.1.0"
