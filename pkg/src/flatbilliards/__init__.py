"""Simulation and verification engine for planar semidispersing billiards
whose scatterer boundary carries four flat (zero-curvature) points.

The scatterer is a superellipse |x|^beta + |y|^beta = a^beta (beta > 2)
centered in a rectangular cell.  The package provides the rectangle and
periodic-lattice collision maps, the induced return map to the window-free
section, one-step derivatives and wavefront transport, singularity-curve and
trap classification, seeded Monte Carlo estimators for cell measures, return
tails, trapped-orbit statistics and correlations, and a discrete recursion
model for grazing motion along the flat channel.
"""

from .config import TableConfig, config_from_dict, load_config
from .geometry import Table, BoundaryPointData, boundary_at, build_table, flat_points

__all__ = [
    "TableConfig",
    "config_from_dict",
    "load_config",
    "Table",
    "BoundaryPointData",
    "boundary_at",
    "build_table",
    "flat_points",
]

__version__ = "0.1.0"
