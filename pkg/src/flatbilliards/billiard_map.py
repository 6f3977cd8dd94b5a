"""Collision maps, derivatives and wavefront transport.

Phase points are post-collision states (component, r, phi) with
phi in [-pi/2, pi/2] measured from the inward normal toward the oriented
tangent.  Three maps act on them:

* ``full_map`` — every collision counts, walls included (Rectangle mode);
* ``scatterer_map`` — scatterer section of the periodic lattice flow
  (Torus mode), carrying the cell-crossing index of each flight;
* ``induced_map`` — first return to the window-free scatterer section
  (the arcs around the flat points, shrinking like the inverse
  (beta-1)-th root of the flight index, are excised).

The one-step derivative in (dr, dphi) coordinates has the closed form

    -1/cos(phi1) * [[tau K + cos(phi),  tau],
                    [tau K K1 + K cos(phi1) + K1 cos(phi),  tau K1 + cos(phi1)]]

with K, K1 the endpoint curvatures (zero on walls); its determinant is
cos(phi)/cos(phi1), so the invariant density is cos(phi) dr dphi.
Dispersing wavefronts transport by 1/B -> 1/B + tau across a flight and
B -> B + 2K/cos(phi) at a collision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import (ConfigError, DegenerateStart, FocusingBlowup,
                     HorizonOverflow, TangentialDerivative)
from .geometry import Table

BASES = ("FullMap", "ScattererMap")


@dataclass(frozen=True)
class PhasePoint:
    """Post-collision state on one boundary component."""

    component: int
    r: float
    phi: float

    @property
    def is_scatterer(self) -> bool:
        return self.component == K.COMP_SCATTERER


@dataclass(frozen=True)
class StepEvent:
    """One collision-to-collision step with its local derivative data."""

    start: PhasePoint
    end: PhasePoint
    tau: float
    cells_crossed: int
    tangential_hits: int
    kappa_start: float
    kappa_end: float


@dataclass(frozen=True)
class StepDerivative:
    """One-step derivative entries plus the guaranteed p-metric expansion."""

    a11: float
    a12: float
    a21: float
    a22: float
    p_expansion: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array(((self.a11, self.a12), (self.a21, self.a22)))

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21


@dataclass(frozen=True)
class InducedReturn:
    """Result of iterating to the window-free section."""

    point: PhasePoint
    steps: int
    returned: bool
    flight_index: int


@dataclass(frozen=True)
class MetricsResult:
    p_ratio: float
    euclid_ratio: float


def _raise_status(st: int, context: str) -> None:
    if st == K.ST_HORIZON:
        raise HorizonOverflow(context)
    if st == K.ST_DEGENERATE:
        raise DegenerateStart(context)
    if st == K.ST_TANGENT:
        raise TangentialDerivative(context)
    raise ConfigError(f"unexpected kernel status {st}: {context}")


def _mode_for_base(base: str) -> int:
    if base == "FullMap":
        return K.MODE_RECTANGLE
    if base == "ScattererMap":
        return K.MODE_TORUS
    raise ConfigError(f"base must be one of {BASES}, got {base!r}")


def _step(table: Table, x: PhasePoint, mode: int) -> StepEvent:
    st, r1, phi1, comp1, tau, cells, ntang, k0, k1 = K.map_step_full(
        float(x.r), float(x.phi), int(x.component), mode,
        table.gp, table.x_nodes, table.s_nodes)
    if st != K.ST_OK:
        _raise_status(st, f"map step from {x}")
    return StepEvent(
        start=x,
        end=PhasePoint(int(comp1), float(r1), float(phi1)),
        tau=float(tau),
        cells_crossed=int(cells),
        tangential_hits=int(ntang),
        kappa_start=float(k0),
        kappa_end=float(k1),
    )


def full_map(table: Table, x: PhasePoint) -> tuple[PhasePoint, StepEvent]:
    """Next collision of the rectangle dynamics (walls reflect)."""
    ev = _step(table, x, K.MODE_RECTANGLE)
    return ev.end, ev


def scatterer_map(table: Table, x: PhasePoint) -> tuple[PhasePoint, StepEvent]:
    """Next scatterer collision of the periodic-lattice dynamics."""
    if not x.is_scatterer:
        raise ConfigError("scatterer_map requires a scatterer phase point")
    ev = _step(table, x, K.MODE_TORUS)
    return ev.end, ev


def flight_index(table: Table, x: PhasePoint) -> int:
    """Horizontal cell crossings of the upcoming flight (lattice dynamics)."""
    if not x.is_scatterer:
        raise ConfigError("flight_index requires a scatterer phase point")
    n = K.flight_index(float(x.r), float(x.phi),
                       table.gp, table.x_nodes, table.s_nodes)
    if n < 0:
        raise HorizonOverflow(f"flight from {x} exceeded the cell cap")
    return int(n)


def induced_map(table: Table, x: PhasePoint, base: str = "FullMap",
                cap: int = 100_000) -> InducedReturn:
    """First return to the window-free scatterer section.

    Iterates the chosen base dynamics until the orbit lands on the
    scatterer at arclength distance more than eps0 * n^(-1/(beta-1)) from
    every flat point, n being the landing point's own flight index.
    A capped iteration is reported (``returned=False``), not raised.
    """
    if not x.is_scatterer:
        raise ConfigError("induced_map requires a scatterer phase point")
    mode = _mode_for_base(base)
    st, r1, phi1, steps, nret = K.induced_step(
        float(x.r), float(x.phi), mode, cap,
        table.gp, table.x_nodes, table.s_nodes)
    if st == K.ST_NONRETURN:
        return InducedReturn(PhasePoint(K.COMP_SCATTERER, float(r1), float(phi1)),
                             int(steps), False, -1)
    if st != K.ST_OK:
        _raise_status(st, f"induced map from {x}")
    return InducedReturn(PhasePoint(K.COMP_SCATTERER, float(r1), float(phi1)),
                         int(steps), True, int(nret))


def differential(table: Table, x: PhasePoint, event: StepEvent) -> StepDerivative:
    """One-step derivative for a completed step starting at x."""
    cphi1 = math.cos(event.end.phi)
    if abs(cphi1) < table.gp[K.GP_TANTOL]:
        raise TangentialDerivative(
            f"derivative at grazing landing point (cos={cphi1:.2e})")
    a11, a12, a21, a22 = K.derivative_entries(
        event.tau, event.start.phi, event.end.phi,
        event.kappa_start, event.kappa_end)
    cphi0 = math.cos(event.start.phi)
    p_exp = 1.0 + 2.0 * event.tau * event.kappa_start / cphi0
    return StepDerivative(a11, a12, a21, a22, p_exp)


def wavefront_step(table: Table, x: PhasePoint, curvature: float,
                   event: StepEvent) -> float:
    """Transport a post-collision dispersing wavefront across one step.

    ``curvature`` is the outgoing wavefront curvature at x (may be inf for
    a freshly focused front); returns the outgoing curvature at the landing
    point: 1/B -> 1/B + tau, then B -> B + 2 K1 / cos(phi1).
    """
    if math.isinf(curvature):
        inv = 0.0
    else:
        inv = 1.0 / curvature
    den = event.tau + inv
    if den == 0.0:
        raise FocusingBlowup("wavefront focused exactly at the landing point")
    b_in = 1.0 / den
    cphi1 = math.cos(event.end.phi)
    if abs(cphi1) < table.gp[K.GP_TANTOL]:
        raise TangentialDerivative("wavefront update at a grazing landing")
    return b_in + 2.0 * event.kappa_end / cphi1


def point_curvature(table: Table, x: PhasePoint) -> float:
    if x.is_scatterer:
        return K.scat_frame(float(x.r), table.gp,
                            table.x_nodes, table.s_nodes)[4]
    return 0.0


def unstable_cone_bounds(table: Table, x: PhasePoint) -> tuple[float, float]:
    """Slope bounds of the unstable cone at x."""
    kap = point_curvature(table, x)
    return kap, kap + 1.0 / table.tau_min


def cone_check(table: Table, x: PhasePoint, dvec) -> str:
    """Classify a tangent vector: 'Unstable', 'Stable' or 'Neither'."""
    dr, dphi = float(dvec[0]), float(dvec[1])
    if dr == 0.0:
        return "Neither"
    v = dphi / dr
    kap = point_curvature(table, x)
    hi = 1.0 / table.tau_min
    if kap <= v <= kap + hi:
        return "Unstable"
    if -kap - hi <= v <= -kap:
        return "Stable"
    return "Neither"


def time_reverse(x: PhasePoint) -> PhasePoint:
    """The involution conjugating the dynamics to its inverse."""
    return PhasePoint(x.component, x.r, -x.phi)


def metrics(table: Table, x: PhasePoint, dvec,
            base: str = "FullMap") -> MetricsResult:
    """Expansion of one tangent vector under one step, in both metrics.

    p-metric length is cos(phi) |dr|; the Euclidean one is the plain norm
    of (dr, dphi).
    """
    mode = _mode_for_base(base)
    ev = _step(table, x, mode)
    d = differential(table, x, ev)
    dr, dphi = float(dvec[0]), float(dvec[1])
    dr1 = d.a11 * dr + d.a12 * dphi
    dphi1 = d.a21 * dr + d.a22 * dphi
    e0 = math.hypot(dr, dphi)
    e1 = math.hypot(dr1, dphi1)
    p0 = math.cos(x.phi) * abs(dr)
    p1 = math.cos(ev.end.phi) * abs(dr1)
    p_ratio = p1 / p0 if p0 > 0.0 else math.inf
    return MetricsResult(p_ratio=p_ratio, euclid_ratio=e1 / e0)


def lyapunov_estimate(table: Table, x: PhasePoint, steps: int,
                      base: str = "FullMap", renorm_every: int = 64,
                      blocks: int = 16) -> tuple[float, float]:
    """Average log Euclidean expansion per step with a block-mean stderr."""
    mode = _mode_for_base(base)
    per = max(1, steps // blocks)
    means = []
    cur = x
    for _ in range(blocks):
        st, acc, done, r_e, p_e, c_e = K.lyap_kernel(
            float(cur.r), float(cur.phi), int(cur.component), mode,
            per, renorm_every, table.gp, table.x_nodes, table.s_nodes)
        if st != K.ST_OK or done == 0:
            _raise_status(st if st != K.ST_OK else K.ST_NONRETURN,
                          "lyapunov walk interrupted")
        means.append(acc / done)
        cur = PhasePoint(int(c_e), float(r_e), float(p_e))
    arr = np.asarray(means)
    lam = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(len(arr)))
    return lam, stderr


def orbit_trace(table: Table, x: PhasePoint, steps: int,
                base: str = "FullMap"):
    """Yield per-step rows (step, component, r, phi, tau, cells, tangential)."""
    mode = _mode_for_base(base)
    cur = x
    for i in range(steps):
        ev = _step(table, cur, mode)
        cur = ev.end
        yield (i + 1, cur.component, cur.r, cur.phi, ev.tau,
               ev.cells_crossed, ev.tangential_hits)
