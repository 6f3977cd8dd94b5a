"""Table construction and boundary geometry.

The scatterer is the superellipse |x|^beta + |y|^beta = a^beta centered in a
w x h rectangular cell.  Its boundary has exactly four zero-curvature points
on the axes; arclength r runs counterclockwise from the top one.  Near a flat
point the boundary graph is z(s) = -c |s|^beta + O(s^(beta+1)) with
c = 1/(beta a^(beta-1)); the curvature there grows like beta (beta-1) c
|s|^(beta-2).

Arclength is tabulated on one octant (the other seven follow by symmetry) at
2^13 Chebyshev-spaced abscissas — 2^16 nodes around the full boundary — with
cumulative 12-point Gauss-Legendre integration between nodes; queries refine
by Newton iteration against the analytic speed, so lookups round-trip to the
configured tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .config import TableConfig
from .errors import ConfigError

OCTANT_NODES = 2 ** 13  # intervals per octant; 8 octants = 2^16 boundary nodes

COMPONENT_NAMES = {
    K.COMP_SCATTERER: "Scatterer",
    K.COMP_WALL_N: "WallN",
    K.COMP_WALL_E: "WallE",
    K.COMP_WALL_S: "WallS",
    K.COMP_WALL_W: "WallW",
}


@dataclass(frozen=True)
class BoundaryPointData:
    """Local boundary data at one scatterer arclength."""

    arclength: float
    position: np.ndarray
    unit_tangent: np.ndarray
    inward_normal: np.ndarray
    curvature: float


@dataclass(frozen=True)
class Table:
    """Immutable realized billiard table.

    All queries are pure; the packed parameter vector ``gp`` plus the two
    octant lookup arrays are what the compiled kernels consume.
    """

    config: TableConfig
    gp: np.ndarray
    x_nodes: np.ndarray
    s_nodes: np.ndarray
    perimeter: float
    wall_lengths: tuple
    flat_r: tuple
    profile_coefficient: float
    tau_min: float
    channel_height: float
    channel_width: float
    mode_code: int = field(default=K.MODE_RECTANGLE)

    @property
    def beta(self) -> float:
        return self.config.beta

    @property
    def scatterer_radius(self) -> float:
        return self.config.scatterer_radius

    @property
    def width(self) -> float:
        return self.config.rect_width

    @property
    def height(self) -> float:
        return self.config.rect_height

    @property
    def total_boundary_length(self) -> float:
        """Length of the full collision space boundary in Rectangle mode."""
        return self.perimeter + 2.0 * (self.width + self.height)


def _octant_tables(beta: float, a: float):
    """Chebyshev abscissas on [0, xd] and cumulative arclengths."""
    xd = a * 2.0 ** (-1.0 / beta)
    n = OCTANT_NODES
    j = np.arange(n + 1, dtype=np.float64)
    x = xd * 0.5 * (1.0 - np.cos(np.pi * j / n))
    # cumulative 12-point Gauss-Legendre on each interval
    gl_x, gl_w = np.polynomial.legendre.leggauss(12)
    x0 = x[:-1]
    hw = 0.5 * (x[1:] - x0)
    mid = x0 + hw
    pts = mid[:, None] + hw[:, None] * gl_x[None, :]
    y = np.power(a ** beta - np.power(pts, beta), 1.0 / beta)
    yp = -np.power(pts / y, beta - 1.0)
    speed = np.sqrt(1.0 + yp * yp)
    seg = hw * (speed @ gl_w)
    s = np.empty(n + 1, dtype=np.float64)
    s[0] = 0.0
    np.cumsum(seg, out=s[1:])
    return x, s


def build_table(config: TableConfig) -> Table:
    """Realize the table for a validated configuration."""
    beta = config.beta
    a = config.scatterer_radius
    w = config.rect_width
    h = config.rect_height
    x_nodes, s_nodes = _octant_tables(beta, a)
    s_oct = float(s_nodes[-1])
    perimeter = 8.0 * s_oct
    c = 1.0 / (beta * a ** (beta - 1.0))
    tau_min = 0.5 * min(w, h) - a
    circ = a * 2.0 ** (0.5 - 1.0 / beta)
    # deepest dip of the implicit ray function that the probe grid could
    # straddle, from its curvature bound along any unit-speed line
    band = beta * (beta - 1.0) * circ ** (beta - 2.0) * (a / 32.0) ** 2 / 4.0
    gp = np.zeros(K.GP_SIZE, dtype=np.float64)
    gp[K.GP_BETA] = beta
    gp[K.GP_A] = a
    gp[K.GP_C] = c
    gp[K.GP_W] = w
    gp[K.GP_H] = h
    gp[K.GP_XD] = float(x_nodes[-1])
    gp[K.GP_SOCT] = s_oct
    gp[K.GP_LB] = perimeter
    gp[K.GP_TANTOL] = 1e-8
    gp[K.GP_NEWTON] = config.newton_tol
    gp[K.GP_TAUMIN] = tau_min
    gp[K.GP_EPS0] = config.epsilon0
    gp[K.GP_K0] = float(config.k0)
    gp[K.GP_MAXCELLS] = float(config.max_flight_cells)
    gp[K.GP_CIRCR] = circ
    gp[K.GP_BAND] = band
    gp[K.GP_GUARD] = max(1e3 * config.newton_tol, 1e-11) * a
    gp[K.GP_INVBM1] = 1.0 / (beta - 1.0)
    gp[K.GP_GPOS] = 100.0 * config.newton_tol * beta * a ** (beta - 1.0)
    # windows hold channel-aligned grazing collisions only; the angular cap
    # comfortably covers the periodic channel orbits (steepest has grazing
    # angle atan(channel/period)) while excluding frontal bounces
    gp[K.GP_PSI0H] = min(math.pi / 3.0, 1.2 * math.atan2(h - 2.0 * a, w))
    gp[K.GP_PSI0V] = min(math.pi / 3.0, 1.2 * math.atan2(w - 2.0 * a, h))
    gp.setflags(write=False)
    x_nodes.setflags(write=False)
    s_nodes.setflags(write=False)
    mode_code = K.MODE_RECTANGLE if config.mode == "Rectangle" else K.MODE_TORUS
    lq = 0.25 * perimeter
    return Table(
        config=config,
        gp=gp,
        x_nodes=x_nodes,
        s_nodes=s_nodes,
        perimeter=perimeter,
        wall_lengths=(w, h, w, h),
        flat_r=(0.0, lq, 2.0 * lq, 3.0 * lq),
        profile_coefficient=c,
        tau_min=tau_min,
        channel_height=h - 2.0 * a,
        channel_width=w - 2.0 * a,
        mode_code=mode_code,
    )


def boundary_at(table: Table, r: float) -> BoundaryPointData:
    """Scatterer boundary data at arclength r (taken mod the perimeter)."""
    px, py, tx, ty, kap = K.scat_frame(
        float(r), table.gp, table.x_nodes, table.s_nodes)
    return BoundaryPointData(
        arclength=float(r) % table.perimeter,
        position=np.array((px, py)),
        unit_tangent=np.array((tx, ty)),
        inward_normal=np.array((ty, -tx)),
        curvature=kap,
    )


def wall_at(table: Table, component: int, r: float) -> BoundaryPointData:
    """Wall boundary data (Rectangle mode components 1..4)."""
    if component == K.COMP_SCATTERER:
        return boundary_at(table, r)
    if component not in COMPONENT_NAMES:
        raise ConfigError(f"unknown boundary component {component}")
    px, py, tx, ty = K.wall_frame(
        component, float(r), table.width, table.height)
    return BoundaryPointData(
        arclength=float(r),
        position=np.array((px, py)),
        unit_tangent=np.array((tx, ty)),
        inward_normal=np.array((ty, -tx)),
        curvature=0.0,
    )


def flat_points(table: Table) -> tuple:
    """Arclengths of the four zero-curvature boundary points."""
    return table.flat_r


def arclength_of_point(table: Table, x: float, y: float) -> float:
    """Inverse lookup: arclength of a point on the scatterer boundary."""
    return float(K.r_from_point(float(x), float(y),
                                table.gp, table.x_nodes, table.s_nodes))


def curvature_profile_coefficient(table: Table) -> float:
    """Leading constant of curvature growth off a flat point.

    curvature(r) ~ beta (beta-1) c |r|^(beta-2) with c the local graph
    coefficient; returns beta (beta-1) c.
    """
    beta = table.beta
    return beta * (beta - 1.0) * table.profile_coefficient
