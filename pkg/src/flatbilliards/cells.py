"""Phase-space bookkeeping on the scatterer section.

Partitions scatterer collisions by the cell index of their upcoming flight,
flags window-arc membership near the flat points, counts trapped window
collisions, and assigns homogeneity-strip indices.  Also hosts the numerical
tracers for the singularity curves bounding the cells and the shooting
solver for the grazing channel periodic orbits.

Coordinates: ``r`` is scatterer arclength (counterclockwise, ``r = 0`` at
the top flat point), ``phi`` the reflection angle against the inward
normal.  Singularity tracing works in the chart ``psi = pi/2 - phi`` near
``phi = +pi/2`` with ``r`` replaced by the signed arclength offset from the
flat point; the opposite grazing direction follows by the symmetry
``(r, phi) -> (-r, -phi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .billiard_map import PhasePoint
from .errors import BisectionFailure, CurveDegenerate, ShootingDivergence
from .geometry import Table

__all__ = [
    "CellLabel",
    "SingularityTrace",
    "PARTS",
    "classify",
    "homogeneity_index",
    "in_base",
    "trap_depth",
    "window_halfwidth",
    "window_endpoints",
    "window_table",
    "trace_singularity_s_prime",
    "trace_singularity_s_n",
    "cell_r_extent",
    "cell_core_box",
    "largest_cell_box",
    "periodic_point",
    "flight_cells",
]

PARTS = ("CPrime", "CDoublePrime")


@dataclass(frozen=True)
class CellLabel:
    """Discrete labels of a scatterer collision."""

    n: int
    in_window: bool
    part: str
    trap_k: int
    homogeneity: int


@dataclass(frozen=True)
class SingularityTrace:
    """Traced singularity polyline in (signed offset, phi) coordinates."""

    curve_id: str
    n: int
    r: np.ndarray
    phi: np.ndarray
    skipped: np.ndarray

    def to_rows(self):
        return [
            (self.curve_id, self.n, float(rv), float(pv))
            for rv, pv in zip(self.r, self.phi)
        ]


def homogeneity_index(table: Table, phi: float) -> int:
    """Signed strip index of the angle; 0 in the central bulk."""
    return int(_k.hom_index(phi, table.config.k0))


def window_halfwidth(table: Table, m: int) -> float:
    """Arclength half-width of the window around a flat point at index m."""
    return float(_k.window_halfwidth(table.gp, m))


def window_endpoints(table: Table, m: int) -> tuple[float, float]:
    """Signed arclength offsets of the window border points from the flat

    point (symmetric pair).
    """
    hw = window_halfwidth(table, m)
    return (-hw, hw)


def window_table(table: Table, m_list) -> list[tuple[int, float, float, float]]:
    """Rows (m, q1, q2, curvature_at_endpoint) for the window arcs."""
    rows = []
    for m in m_list:
        q1, q2 = window_endpoints(table, int(m))
        _, _, _, _, kappa = _k.scat_frame(
            q2 % table.perimeter, table.gp, table.x_nodes, table.s_nodes)
        rows.append((int(m), q1, q2, float(kappa)))
    return rows


def flight_cells(table: Table, r: float, phi: float) -> int:
    """Cell index of the upcoming flight, -1 if the flight fails."""
    return int(_k.flight_index(r % table.perimeter, phi,
                               table.gp, table.x_nodes, table.s_nodes))


def in_base(table: Table, x: PhasePoint) -> bool:
    """Whether a scatterer point lies in the window-free return section."""
    if not x.is_scatterer:
        raise ValueError("in_base expects a scatterer point")
    n = flight_cells(table, x.r, x.phi)
    if n < 0:
        return False
    return bool(_k.in_return_base(x.r % table.perimeter, x.phi, n, table.gp))


def trap_depth(table: Table, x: PhasePoint, cap: int = 100_000
               ) -> tuple[int, int]:
    """Window-collision count before return and the return time itself.

    Counts scatterer-map collisions whose base point lies inside the window
    arc fixed by the cell index at entry (the point's own flight index),
    until the orbit returns to the window-free section.  Returns
    (k, return_steps); a capped run reports the partial count with
    return_steps = cap sentinel (callers treat it as censored).
    """
    n = flight_cells(table, x.r, x.phi)
    if n < 0:
        raise CurveDegenerate("flight from the point failed; no trap label")
    st, k, nsteps, _, _ = _k.trap_run(
        x.r % table.perimeter, x.phi, n, cap,
        table.gp, table.x_nodes, table.s_nodes)
    if st == _k.ST_NONRETURN:
        return int(k), int(cap)
    if st != _k.ST_OK:
        raise CurveDegenerate(f"trap run failed with status {st}")
    return int(k), int(nsteps)


def classify(table: Table, x: PhasePoint, trap_cap: int = 100_000
             ) -> CellLabel:
    """Full discrete label of a scatterer collision.

    part is CPrime (near-tangential side) when pi/2 - |phi| < 1/max(n,1),
    CDoublePrime otherwise; trap_k counts window-interior collisions before
    the orbit's return to the window-free section.
    """
    if not x.is_scatterer:
        raise ValueError("classify expects a scatterer point")
    r = x.r % table.perimeter
    n = flight_cells(table, r, x.phi)
    if n < 0:
        raise CurveDegenerate("flight from the point failed; no cell label")
    in_win = bool(_k.in_window_arc(r, x.phi, n, table.gp))
    gap = 0.5 * math.pi - abs(x.phi)
    part = PARTS[0] if gap * max(n, 1) < 1.0 else PARTS[1]
    k, _ = trap_depth(table, x, cap=trap_cap)
    hom = homogeneity_index(table, x.phi)
    return CellLabel(n=n, in_window=in_win, part=part, trap_k=k,
                     homogeneity=hom)


# ---------------------------------------------------------------------------
# singularity curve tracing
# ---------------------------------------------------------------------------

def _index_at(table: Table, flat_r: float, off: float, psi: float) -> int:
    """Cell index in the grazing chart at a signed offset from a flat point.

    A flight that overruns the cell cap has passed over every downstream
    crown, so it reports the (huge) crossing count instead of a failure;
    tangency bisection then sees it on the high-index side.
    """
    r = (flat_r + off) % table.perimeter
    st, _, _, _, cells, _, _ = _k.scat_segment(
        r, 0.5 * math.pi - psi, _k.MODE_TORUS, table.gp,
        table.x_nodes, table.s_nodes)
    if st == _k.ST_OK or st == _k.ST_HORIZON:
        return int(cells)
    return -1


def _bisect_psi(table, flat_r, off, psi_lo, psi_hi, predicate, iters=60):
    """Bisect the psi-transition of an integer predicate.

    predicate(index) must be False at psi_lo and True at psi_hi; returns
    the transition psi.  Raises BisectionFailure when the bracket does not
    straddle the transition.
    """
    p_lo = predicate(_index_at(table, flat_r, off, psi_lo))
    p_hi = predicate(_index_at(table, flat_r, off, psi_hi))
    if p_lo or not p_hi:
        raise BisectionFailure(
            f"no transition in bracket psi=[{psi_lo:.3e}, {psi_hi:.3e}] "
            f"at offset {off:.3e} (ends {p_lo}, {p_hi})")
    for _ in range(iters):
        mid = 0.5 * (psi_lo + psi_hi)
        if predicate(_index_at(table, flat_r, off, mid)):
            psi_hi = mid
        else:
            psi_lo = mid
    return 0.5 * (psi_lo + psi_hi)


def _chart_tilt(table: Table, flat_r: float, off: float) -> float:
    """Signed rotation of the boundary tangent across an arclength offset.

    Grazing levels in the bisection chart ride on top of this tilt; it
    equals the local profile slope c*beta*off^(beta-1) to leading order and
    stays exact at offsets where that expansion degrades.
    """
    from .geometry import boundary_at
    t0 = boundary_at(table, flat_r).unit_tangent
    t1 = boundary_at(table, flat_r + off).unit_tangent
    cross = t0[0] * t1[1] - t0[1] * t1[0]
    dot = t0[0] * t1[0] + t0[1] * t1[1]
    return math.atan2(cross, dot)


def _chart_levels(table: Table, off: float):
    """Tilt and per-crossing grazing quantum at an offset from a flat point.

    A ray launched at grazing angle psi = tilt + chi climbs chi per unit
    horizontal cell (in channel-width units); it must first recover the
    launch depth below the crown line, so the k-crossing boundary sits at
    chi = (ratio + climb)/k with climb the depth in the same units.
    """
    c = table.profile_coefficient
    ratio = table.channel_height / table.width
    climb = (c / table.width) * abs(off) ** table.beta
    return _chart_tilt(table, 0.0, off), ratio + climb, climb


def trace_singularity_s_prime(table: Table, r_grid) -> SingularityTrace:
    """Trace the tangency locus bounding the near-grazing cell structure.

    At each positive offset the transition is between the flight striking
    the first downstream scatterer (index 1) and passing tangentially over
    it (index >= 2).  Offsets where no bracket can be established are
    skipped and flagged.
    """
    flat_r = 0.0
    offs, phis, skipped = [], [], []
    for off in np.asarray(r_grid, dtype=float):
        if off <= 0.0:
            skipped.append(off)
            continue
        tilt, _, climb = _chart_levels(table, off)
        got = None
        for lo_f, hi_f in ((1e-4, 60.0), (1e-7, 1e4)):
            try:
                got = _bisect_psi(table, flat_r, off, tilt + lo_f * climb,
                                  tilt + hi_f * climb, lambda n: n >= 2)
                break
            except BisectionFailure:
                continue
        if got is None:
            skipped.append(off)
            continue
        offs.append(off)
        phis.append(0.5 * math.pi - got)
    if not offs:
        raise BisectionFailure("tangency trace failed on the whole grid")
    return SingularityTrace(curve_id="s_prime", n=1,
                            r=np.asarray(offs), phi=np.asarray(phis),
                            skipped=np.asarray(skipped))


def trace_singularity_s_n(table: Table, n: int, r_grid) -> SingularityTrace:
    """Trace the boundary between cell indices n-1 and n near a flat point."""
    if n < 2:
        raise ValueError("cell boundary tracing needs n >= 2")
    flat_r = 0.0
    offs, phis, skipped = [], [], []
    for off in np.asarray(r_grid, dtype=float):
        tilt, quantum, _ = _chart_levels(table, off)
        centre = tilt + quantum / (n - 1.0)
        lo0 = tilt + 0.5 * (quantum / n + quantum / (n - 1.0))
        hi0 = (tilt + 0.5 * (quantum / (n - 1.0) + quantum / (n - 2.0))
               if n >= 3 else tilt + 1.7 * quantum)
        got = None
        for widen in (1.0, 1.8, 3.2):
            lo = max(centre - widen * (centre - lo0), tilt + 1e-3 * quantum)
            hi = centre + widen * (hi0 - centre)
            try:
                got = _bisect_psi(table, flat_r, off, lo, hi,
                                  lambda idx: idx <= n - 1)
                break
            except BisectionFailure:
                continue
        if got is None:
            skipped.append(off)
            continue
        offs.append(off)
        phis.append(0.5 * math.pi - got)
    if not offs:
        raise BisectionFailure(f"cell-{n} boundary trace failed everywhere")
    return SingularityTrace(curve_id=f"s_{n}", n=n,
                            r=np.asarray(offs), phi=np.asarray(phis),
                            skipped=np.asarray(skipped))


def cell_r_extent(table: Table, n: int, iters: int = 48) -> float:
    """Positive-offset extent of cell n near a flat point.

    Bisects the largest offset at which the flight at the mid-cell grazing
    level still crosses exactly n cells (the cell tip, where the cell
    boundary meets the tangency locus).
    """
    flat_r = 0.0

    def has_cell(off: float) -> bool:
        tilt, quantum, _ = _chart_levels(table, off)
        psi = tilt + quantum / (n - 0.5)
        return _index_at(table, flat_r, off, psi) == n

    c = table.profile_coefficient
    tip_guess = (table.channel_height
                 / (c * max(n - 1.5, 0.5))) ** (1.0 / table.beta)
    # the grazing chart lives on the flat crown (an octant each way); wide
    # cells saturate there and report the chart-boundary offset
    crown = 0.98 * 0.125 * table.perimeter
    lo = 0.0
    hi = None
    for mult in (0.8, 1.0, 1.3, 1.8):
        probe = min(tip_guess * mult, crown)
        if not has_cell(probe):
            hi = probe
            break
        lo = probe
        if probe >= crown:
            return crown
    if hi is None:
        raise BisectionFailure(f"cell {n} tip not bracketed")
    if lo == 0.0:
        lo = 1e-6 * tip_guess
        if not has_cell(lo):
            raise BisectionFailure(f"cell {n} absent near the flat point")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if has_cell(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cell_core_box(table: Table, n: int, margin: float = 0.2
                  ) -> tuple[float, float, float, float]:
    """A verified (r, phi) box strictly inside cell n, window-free.

    Sits at mid-extent of the cell in the grazing chart near the top flat
    point; the angular range is measured by bisection between the two
    bounding curves, shrunk by the given margin.
    """
    if n < 2:
        raise ValueError("core boxes are defined for n >= 2")
    tip = cell_r_extent(table, n)
    hw = window_halfwidth(table, n)
    # keep the chart tilt variation across the box small against the cell's
    # angular width, else the slanted band empties the common psi range
    c = table.profile_coefficient
    ratio = table.channel_height / table.width
    band = ratio * (1.0 / (n - 1.0) - 1.0 / n)
    r_tilt = (0.25 * band / (c * table.beta)) ** (1.0 / (table.beta - 1.0))
    r_hi = min(0.55 * tip, r_tilt)
    r_lo = max(0.35 * r_hi, 1.12 * hw)
    if r_lo >= r_hi:
        raise CurveDegenerate(
            f"cell {n} core is swallowed by the window; no box")
    psis = []
    for off in (r_lo, r_hi):
        tilt, quantum, _ = _chart_levels(table, off)
        lev = lambda k: tilt + quantum / k
        top_hi = (0.5 * (lev(n - 1) + lev(n - 2)) if n >= 3
                  else tilt + 1.7 * quantum)
        top = _bisect_psi(table, 0.0, off, 0.5 * (lev(n) + lev(n - 1)),
                          top_hi, lambda idx: idx <= n - 1)
        bot = _bisect_psi(table, 0.0, off, 0.5 * (lev(n + 1) + lev(n)),
                          0.5 * (lev(n) + lev(n - 1)),
                          lambda idx: idx <= n)
        psis.append((top, bot))
    psi_top = min(p[0] for p in psis)
    psi_bot = max(p[1] for p in psis)
    if psi_bot >= psi_top:
        raise CurveDegenerate(f"cell {n} angular core empty at mid-extent")
    width = psi_top - psi_bot
    psi_hi = psi_top - margin * width
    psi_lo = psi_bot + margin * width
    box = (r_lo, r_hi, 0.5 * math.pi - psi_hi, 0.5 * math.pi - psi_lo)
    for rr in np.linspace(r_lo, r_hi, 5):
        for pp in np.linspace(box[2], box[3], 5):
            idx = flight_cells(table, rr, pp)
            if idx != n:
                raise CurveDegenerate(
                    f"cell {n} box verification failed at ({rr:.4g},{pp:.4g})"
                    f": index {idx}")
            if _k.in_window_arc(rr % table.perimeter, pp, idx, table.gp):
                raise CurveDegenerate(
                    f"cell {n} box grazes its window at ({rr:.4g},{pp:.4g})")
    return box


def largest_cell_box(table: Table, n: int,
                     r_span: tuple[float, float] | None = None,
                     phi_span: tuple[float, float] = (0.12, 1.46),
                     grid: tuple[int, int] = (200, 200),
                     margin: float = 0.08) -> tuple[float, float, float, float]:
    """Largest axis-aligned (r, phi) box found inside cell n, window-free.

    Scans a grid over one quarter of the scatterer, keeps the mask of points
    whose flight cell index equals n outside the window arc, extracts the
    largest all-true rectangle and shrinks it by the margin.  Useful for
    placing observables supported well inside a single continuity component;
    complements ``cell_core_box`` which targets the deep grazing cells.
    """
    if r_span is None:
        r_span = (0.0, 0.25 * table.perimeter)
    nr, nph = grid
    r_vals = np.linspace(r_span[0], r_span[1], nr)
    p_vals = np.linspace(phi_span[0], phi_span[1], nph)
    rg, pg = np.meshgrid(r_vals, p_vals, indexing="ij")
    idx, win = _k.cell_grid(np.ascontiguousarray(rg.ravel()),
                            np.ascontiguousarray(pg.ravel()),
                            table.gp, table.x_nodes, table.s_nodes)
    mask = ((idx.reshape(nr, nph) == n) &
            (win.reshape(nr, nph) == 0))
    # largest rectangle of ones: histogram-stack sweep over rows
    best = (0.0, 0, 0, 0, 0)  # area, i0, i1, j0, j1
    heights = np.zeros(nph, dtype=np.int64)
    for i in range(nr):
        heights = np.where(mask[i], heights + 1, 0)
        stack: list[int] = []
        j = 0
        while j <= nph:
            h = heights[j] if j < nph else 0
            if not stack or heights[stack[-1]] <= h:
                stack.append(j)
                j += 1
                continue
            top = stack.pop()
            left = stack[-1] + 1 if stack else 0
            hh = int(heights[top])
            area = hh * (j - left)
            if area > best[0]:
                best = (area, i - hh + 1, i, left, j - 1)
    if best[0] == 0:
        raise CurveDegenerate(f"no grid point of cell {n} in the scan region")
    _, i0, i1, j0, j1 = best
    dr = r_vals[i1] - r_vals[i0]
    dp = p_vals[j1] - p_vals[j0]
    box = (r_vals[i0] + margin * dr, r_vals[i1] - margin * dr,
           p_vals[j0] + margin * dp, p_vals[j1] - margin * dp)
    for rr in np.linspace(box[0], box[1], 9):
        for pp in np.linspace(box[2], box[3], 9):
            idx2 = flight_cells(table, rr, pp)
            if idx2 != n or _k.in_window_arc(
                    rr % table.perimeter, pp, idx2, table.gp):
                raise CurveDegenerate(
                    f"cell {n} scan box failed verification at "
                    f"({rr:.4g},{pp:.4g})")
    return box


# ---------------------------------------------------------------------------
# channel periodic orbits
# ---------------------------------------------------------------------------

def periodic_point(table: Table, m: int) -> PhasePoint:
    """Shooting solver for the period-two channel orbit through the flat

    points: fixes the base point at the top flat point and adjusts the
    angle until the m-cell flight lands exactly on the partner flat point
    across the channel.  The landing arclength residual is driven below the
    configured root tolerance.
    """
    if m < 2:
        raise ValueError("channel periodic orbits need m >= 2")
    L = table.perimeter
    H = table.channel_height
    w = table.width
    gp, xn, sn = table.gp, table.x_nodes, table.s_nodes
    partner = 0.5 * L

    def landing(phi):
        st, r1, _, _, cells, _, _ = _k.scat_segment(
            0.0, phi, _k.MODE_TORUS, gp, xn, sn)
        if st != _k.ST_OK:
            return None, -1
        d = (r1 - partner + 0.5 * L) % L - 0.5 * L
        return d, cells

    # the m-crossing band in psi narrows like 1/m^2 relative to its centre,
    # so the scan density scales with m; pairs straddling the modular wrap
    # of the landing offset are rejected as brackets
    centre = math.atan2(H, m * w)
    grid = np.linspace(0.65 * centre, 1.8 * centre, max(96, 16 * m))
    bracket = None
    prev = None
    for psi in grid:
        d, cells_n = landing(psi - 0.5 * math.pi)
        if d is None or cells_n != m:
            prev = None
            continue
        if (prev is not None and d * prev[1] <= 0.0
                and abs(d - prev[1]) < 0.25 * L):
            bracket = (prev[0], psi, prev[1], d)
            break
        prev = (psi, d)
    if bracket is None:
        raise ShootingDivergence(
            f"no landing sign change for the {m}-cell channel orbit "
            f"around psi={centre:.6e}")
    a, b, fa, _ = bracket
    for _ in range(200):
        mid = 0.5 * (a + b)
        fm, cells_n = landing(mid - 0.5 * math.pi)
        if fm is None or cells_n != m:
            raise ShootingDivergence(
                f"flight degenerated during bisection at psi={mid:.6e}")
        if fm == 0.0 or (b - a) < 1e-18:
            a = mid
            fa = fm
            break
        if fa * fm <= 0.0:
            b = mid
        else:
            a, fa = mid, fm
    psi = 0.5 * (a + b)
    d, cells_n = landing(psi - 0.5 * math.pi)
    # landing position conditioning grows with flight length; below that
    # floor the bisection cannot push the residual further
    tol = max(table.config.newton_tol, 256.0 * 2.3e-16 * m * w)
    if d is None or cells_n != m or abs(d) > tol:
        raise ShootingDivergence(
            f"residual {d} above tolerance for m={m} at psi={psi:.12e}")
    return PhasePoint(component=_k.COMP_SCATTERER, r=0.0,
                      phi=psi - 0.5 * math.pi)
