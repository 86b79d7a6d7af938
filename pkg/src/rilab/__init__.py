"""Desk-scale laboratory for random interlacements on Z^d.

Potential theory for the simple random walk, a window-restricted interlacement
sampler, connectivity observables, the multi-scale coarse-graining pipeline,
and a constrained Dirichlet-energy solver for the continuum rate functionals.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BaseBoxFailsError,
    BiasBudgetError,
    ConfigError,
    GeometryError,
    HaloTooSmallError,
    InfeasibleError,
    InsufficientExcursionsError,
    NoConvergenceError,
    ProjectionTooThinError,
    RilabError,
    ScalesDegenerateError,
    SingularSystemError,
    SupportViolationError,
)
from .lattice import (  # noqa: F401
    Box,
    MadicTree,
    ScaleConfig,
    centered_box,
    deep_interior,
    grid_boxes_in,
    grid_boxes_meeting,
    make_scales,
    smallest_branching,
    tower,
)
from .green import (  # noqa: F401
    CubeEquilibriumCache,
    EquilibriumData,
    GreenTable,
    capacity_mc,
    cube_orbit_equilibrium,
    equilibrium,
    far_field_constant,
    hitting_potential,
)
