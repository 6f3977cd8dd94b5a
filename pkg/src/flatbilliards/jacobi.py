"""Channel-recursion oracle for grazing orbits trapped over a flat point.

A nearly grazing orbit trapped in the channel above a flat boundary point
behaves like a particle in a soft one-sided potential well: writing r_j for
the arclength offset of the j-th window collision from the flat point and
v_j for the (small, signed) deviation of the flight direction from the exact
channel-crossing angle, one collision of an orbit that advances m lattice
cells per crossing updates

    r_j - r_{j+1} = (coef + 2 c (|r_j|^beta + |r_{j+1}|^beta)) tan v_j
    v_j - v_{j+1} = 2 arctan(beta c sgn(r_{j+1}) |r_{j+1}|^{beta-1})

with coef = m^2 (the leading-order form drops the tan/arctan and the
|r|^beta correction).  This module implements the exact and leading-order
recursions, their smooth limit

    dr/dt = coef * v,    dv/dt = 2 beta c |r|^{beta-1} sgn(r)

with conserved energy H = coef v^2 - 4 c |r|^beta, the scaling structure of
a trapped excursion (turning index, half-speed index, offset power laws),
and lower-bound expansion products for the derivative cocycle accumulated
across the excursion.  Everything here is closed-form-driven and independent
of the flight/kernel machinery, so it can serve as an oracle; the one
bridge, `cross_check_cocycle`, replays genuine importance-sampled trapped
orbits through the billiard map and compares measured expansion against the
oracle product.

Sign conventions: a trapped approach has r_j > 0 and v_j > 0, both
decreasing; after the turning index the recursion retraces itself with
v < 0 and r increasing (time-reversal symmetry).  The ODE form above is the
same flow with v |-> -v, so an approach corresponds to v(0) < 0 there.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .billiard_map import (PhasePoint, differential, point_curvature,
                           scatterer_map)
from .errors import (BisectionFailure, FixedPointDivergence,
                     InsufficientOrbits, StepUnderflow,
                     TangentialDerivative)
from .geometry import Table

__all__ = [
    "ChannelState", "ChannelTrajectory", "OdeTrajectory", "ExpansionReport",
    "ScalingReport", "SweepResult", "CocycleReport",
    "step", "leading_step", "run_channel", "entry_state_for_depth",
    "ode_limit", "energy", "energy_ratio", "scaling_report",
    "expansion_product", "expansion_sweep", "cross_check_cocycle",
]


# ---------------------------------------------------------------------------
# state and elementary steps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelState:
    """One window collision of a trapped orbit.

    j is the collision counter, r the arclength offset from the flat point,
    v the signed grazing deviation, and m the number of lattice cells the
    orbit advances per channel crossing (sets the default inertia m^2).
    """

    j: int
    r: float
    v: float
    m: int


def _coef(m: int, coefficient: float | None) -> float:
    return float(m) ** 2 if coefficient is None else float(coefficient)


def _spow(r: float, p: float) -> float:
    """Signed power |r|^p * sgn(r)."""
    return math.copysign(abs(r) ** p, r) if r != 0.0 else 0.0


def step(state: ChannelState, beta: float = 4.0, c: float = 1.0,
         coefficient: float | None = None, tol: float = 1e-14,
         max_iter: int = 200) -> ChannelState:
    """Advance one window collision with the exact tan/arctan update.

    The r-update is implicit (the new offset appears inside its own
    correction term); it is solved by fixed-point iteration to ``tol``
    relative accuracy.
    """
    coef = _coef(state.m, coefficient)
    tv = math.tan(state.v)
    r0 = state.r
    # residual of the implicit offset equation; solved by Newton-damped
    # fixed-point iteration (plain iteration loses contractivity once the
    # correction term's derivative 2 c beta |r|^{beta-1} tan v approaches 1,
    # which happens exactly at the edge of the window regime)
    base = r0 - (coef + 2.0 * c * abs(r0) ** beta) * tv
    r_new = base

    def residual(rr: float) -> float:
        return rr - r0 + (coef + 2.0 * c * (abs(r0) ** beta
                                            + abs(rr) ** beta)) * tv

    for _ in range(max_iter):
        h = residual(r_new)
        dh = 1.0 + 2.0 * c * beta * _spow(r_new, beta - 1.0) * tv
        if not math.isfinite(h) or abs(r_new) > 1e9 or dh == 0.0:
            raise FixedPointDivergence(
                f"implicit offset update diverged at j={state.j} "
                f"(r={r0:.3e}, v={state.v:.3e})")
        delta = h / dh
        r_next = r_new - delta
        if abs(r_next - r_new) <= tol * (1.0 + abs(r_next)):
            r_new = r_next
            break
        r_new = r_next
    else:
        raise FixedPointDivergence(
            f"implicit offset update did not converge in {max_iter} "
            f"iterations at j={state.j} (r={r0:.3e}, v={state.v:.3e})")
    if abs(residual(r_new)) > 1e-6 * (1.0 + abs(r_new)):
        raise FixedPointDivergence(
            f"implicit offset equation has no reachable root at "
            f"j={state.j} (r={r0:.3e}, v={state.v:.3e})")
    v_new = state.v - 2.0 * math.atan(beta * c * _spow(r_new, beta - 1.0))
    return ChannelState(j=state.j + 1, r=r_new, v=v_new, m=state.m)


def leading_step(state: ChannelState, beta: float = 4.0, c: float = 1.0,
                 coefficient: float | None = None) -> ChannelState:
    """Advance one collision with the leading-order (polynomial) update."""
    coef = _coef(state.m, coefficient)
    r_new = state.r - coef * state.v
    v_new = state.v - 2.0 * beta * c * _spow(r_new, beta - 1.0)
    return ChannelState(j=state.j + 1, r=r_new, v=v_new, m=state.m)


def back_step(state: ChannelState, beta: float = 4.0, c: float = 1.0,
              coefficient: float | None = None, tol: float = 1e-14,
              max_iter: int = 200) -> ChannelState:
    """Invert one exact collision (returns the predecessor state).

    The deviation update inverts explicitly; the predecessor offset solves
    the same implicit equation as the forward step, with the roles of the
    old and new offsets exchanged.
    """
    coef = _coef(state.m, coefficient)
    v_prev = state.v + 2.0 * math.atan(
        beta * c * _spow(state.r, beta - 1.0))
    tv = math.tan(v_prev)
    r1 = state.r
    r_new = r1 + (coef + 2.0 * c * abs(r1) ** beta) * tv

    def residual(rr: float) -> float:
        return rr - r1 - (coef + 2.0 * c * (abs(rr) ** beta
                                            + abs(r1) ** beta)) * tv

    for _ in range(max_iter):
        h = residual(r_new)
        dh = 1.0 - 2.0 * c * beta * _spow(r_new, beta - 1.0) * tv
        if not math.isfinite(h) or abs(r_new) > 1e9 or dh == 0.0:
            raise FixedPointDivergence(
                f"implicit predecessor update diverged at j={state.j} "
                f"(r={r1:.3e}, v={state.v:.3e})")
        r_next = r_new - h / dh
        if abs(r_next - r_new) <= tol * (1.0 + abs(r_next)):
            r_new = r_next
            break
        r_new = r_next
    else:
        raise FixedPointDivergence(
            f"implicit predecessor update did not converge in {max_iter} "
            f"iterations at j={state.j} (r={r1:.3e}, v={state.v:.3e})")
    if abs(residual(r_new)) > 1e-6 * (1.0 + abs(r_new)):
        raise FixedPointDivergence(
            f"implicit predecessor equation has no reachable root at "
            f"j={state.j} (r={r1:.3e}, v={state.v:.3e})")
    return ChannelState(j=state.j - 1, r=r_new, v=v_prev, m=state.m)


def energy(r, v, m: int, beta: float = 4.0, c: float = 1.0,
           coefficient: float | None = None):
    """Conserved quantity of the smooth limit: coef v^2 - 4 c |r|^beta."""
    coef = _coef(m, coefficient)
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    return coef * v ** 2 - 4.0 * c * np.abs(r) ** beta


# ---------------------------------------------------------------------------
# full trapped excursions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelTrajectory:
    """A trapped excursion of the discrete recursion.

    Arrays r, v hold collisions j = 0..N (entry at j=0).  ``depth`` is the
    number of collisions with |r| <= the entry offset (entry-inclusive), or
    None when the run hit ``max_steps`` before leaving.  ``turning_index``
    is the first j whose successor offset is no smaller (unique by
    monotonicity), ``half_speed_index`` the first j whose deviation has
    dropped below twice the turning deviation.
    """

    m: int
    beta: float
    c: float
    coefficient: float
    r: np.ndarray
    v: np.ndarray
    depth: int | None
    turning_index: int
    half_speed_index: int
    exact: bool
    remainder_checked: int = 0
    remainder_violations: int = 0
    energy_drift: float = 0.0

    @property
    def censored(self) -> bool:
        return self.depth is None


def _finalize(rs, vs, m: int, beta: float, c: float, coef: float,
              depth: int | None, exact: bool) -> ChannelTrajectory:
    """Package a collision sequence, locating the turning and half-speed
    indices and auditing the leading-order remainders.

    In the curvature-dominated regime v_j << |r_j|^{beta-1} both remainders
    of the leading-order form — (r_j - r_{j+1}) - coef v_j and
    2 beta c |r_{j+1}|^{beta-1} - (v_j - v_{j+1}) — must be positive.
    """
    r = np.asarray(rs, dtype=float)
    v = np.asarray(vs, dtype=float)
    inc = np.nonzero(np.diff(r) >= 0.0)[0]
    k_prime = int(inc[0]) if inc.size else len(r) - 1
    pos = v[: k_prime + 1] > 0.0
    v_turn = float(v[: k_prime + 1][pos].min()) if pos.any() else 0.0
    below = np.nonzero(v < 2.0 * v_turn)[0]
    k_dprime = int(below[0]) if below.size else k_prime
    # remainder audit over consecutive collisions
    rem_r = (r[:-1] - r[1:]) - coef * v[:-1]
    rem_v = 2.0 * beta * c * np.abs(r[1:]) ** (beta - 1.0) - (v[:-1] - v[1:])
    regime = ((v[:-1] > 0.0) & (r[1:] > 0.0)
              & (v[:-1] < 0.1 * beta * c * np.abs(r[:-1]) ** (beta - 1.0)))
    checked = int(regime.sum())
    violations = int(((rem_r <= 0.0) | (rem_v <= 0.0))[regime].sum())
    h = energy(r, v, m, beta=beta, c=c, coefficient=coef)
    drift = float(np.max(np.abs(h - h[0])) / max(abs(h[0]), 1e-300))
    return ChannelTrajectory(
        m=m, beta=beta, c=c, coefficient=coef, r=r, v=v, depth=depth,
        turning_index=k_prime, half_speed_index=k_dprime, exact=exact,
        remainder_checked=checked, remainder_violations=violations,
        energy_drift=drift)


def run_channel(r0: float, v0: float, m: int, beta: float = 4.0,
                c: float = 1.0, coefficient: float | None = None,
                exact: bool = True, max_steps: int = 200_000,
                exit_offset: float | None = None) -> ChannelTrajectory:
    """Iterate the recursion from (r0, v0) until the offset leaves the
    entry scale (|r| > exit_offset, default |r0|) or ``max_steps``."""
    coef = _coef(m, coefficient)
    stepper = step if exact else leading_step
    r_exit = abs(r0) if exit_offset is None else float(exit_offset)
    rs = [float(r0)]
    vs = [float(v0)]
    st = ChannelState(j=0, r=float(r0), v=float(v0), m=m)
    depth: int | None = None
    for _ in range(max_steps):
        try:
            nxt = stepper(st, beta=beta, c=c, coefficient=coefficient)
        except FixedPointDivergence:
            # the exact form is only valid inside the window; when the
            # leading-order image has already left the entry scale the
            # collision is an exit, not a solver failure
            lead = leading_step(st, beta=beta, c=c, coefficient=coefficient)
            if abs(lead.r) > r_exit:
                rs.append(lead.r)
                vs.append(lead.v)
                depth = lead.j
                break
            raise
        rs.append(nxt.r)
        vs.append(nxt.v)
        st = nxt
        if abs(nxt.r) > r_exit:
            depth = nxt.j  # collisions 0..j-1 were inside the entry scale
            break
    return _finalize(rs, vs, m, beta, c, coef, depth, exact)


def _assemble_excursion(m: int, r_anchor: float, beta: float, c: float,
                        coefficient: float | None, exit_offset: float,
                        cap: int) -> ChannelTrajectory | None:
    """Build a full excursion through a mid-well anchor state.

    The anchor sits at offset ``r_anchor`` with a deviation of half the
    local collision kick (a generic near-turning phase).  The excursion is
    grown forward with the exact map and backward with its exact inverse
    until the offset leaves the window on both sides; depth is then the
    number of in-window collisions.  Returns None when either side fails
    to leave within ``cap`` collisions.
    """
    coef = _coef(m, coefficient)
    kick = 2.0 * math.atan(beta * c * abs(r_anchor) ** (beta - 1.0))
    anchor = ChannelState(j=0, r=float(r_anchor), v=0.5 * kick, m=m)
    fwd = [anchor]
    st = anchor
    for _ in range(cap):
        try:
            nxt = step(st, beta=beta, c=c, coefficient=coefficient)
        except FixedPointDivergence:
            lead = leading_step(st, beta=beta, c=c, coefficient=coefficient)
            if abs(lead.r) > exit_offset:
                fwd.append(lead)
                st = lead
                break
            raise
        fwd.append(nxt)
        st = nxt
        if abs(nxt.r) > exit_offset:
            break
    if abs(st.r) <= exit_offset:
        return None
    bwd = []
    st = anchor
    for _ in range(cap):
        try:
            prev = back_step(st, beta=beta, c=c, coefficient=coefficient)
        except FixedPointDivergence:
            v_prev = st.v + 2.0 * math.atan(
                beta * c * _spow(st.r, beta - 1.0))
            prev = ChannelState(j=st.j - 1, r=st.r + coef * v_prev,
                                v=v_prev, m=m)
        if abs(prev.r) > exit_offset:
            break
        bwd.append(prev)
        st = prev
    else:
        return None
    states = list(reversed(bwd)) + fwd
    rs = [s.r for s in states]
    vs = [s.v for s in states]
    return _finalize(rs, vs, m, beta, c, coef, len(states) - 1, True)


def entry_state_for_depth(m: int, k: int, beta: float = 4.0, c: float = 1.0,
                          coefficient: float | None = None,
                          r0: float | None = None,
                          max_iter: int = 200) -> ChannelTrajectory:
    """Construct a trapped excursion of exactly k in-window collisions.

    The window half-width defaults to the natural scale m^{-1/(beta-1)}.
    Excursions are parameterized by the anchor offset near their deepest
    point: the smaller the anchor, the longer both the approach and the
    exit, so depth is monotone in the anchor and a bisection (with a fine
    scan fallback for the occasional two-step jump) lands on k exactly.
    """
    if k < 2:
        raise ValueError("excursion depth must be >= 2")
    r_exit = m ** (-1.0 / (beta - 1.0)) if r0 is None else float(r0)
    cap = 40 * k + 400

    def depth_of(ra: float) -> int:
        tr = _assemble_excursion(m, ra, beta, c, coefficient, r_exit, cap)
        return cap + 1 if tr is None else tr.depth

    hi = 0.98 * r_exit
    lo = min((m * max(k, 2)) ** (-2.0 / (beta - 2.0)) * 1e-2, 0.5 * hi)
    guard = 0
    while depth_of(lo) < k:
        lo *= 0.1
        guard += 1
        if guard > 60:
            raise BisectionFailure(
                f"depth {k} unreachable for m={m}: deepest anchors give "
                f"{depth_of(lo)} collisions")
    if depth_of(hi) > k:
        hi = r_exit  # extremely shallow target; widen
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        d = depth_of(mid)
        if d == k:
            return _assemble_excursion(m, mid, beta, c, coefficient,
                                       r_exit, cap)
        if d < k:
            hi = mid
        else:
            lo = mid
        if hi / lo < 1.0 + 1e-14:
            break
    for ra in np.geomspace(lo, hi, 600):
        if depth_of(float(ra)) == k:
            return _assemble_excursion(m, float(ra), beta, c, coefficient,
                                       r_exit, cap)
    raise BisectionFailure(
        f"no anchor found with depth exactly {k} for m={m} "
        f"(bracket [{lo:.6e}, {hi:.6e}])")


# ---------------------------------------------------------------------------
# smooth limit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OdeTrajectory:
    """Dense solution of the smooth channel flow with its energy audit."""

    t: np.ndarray
    r: np.ndarray
    v: np.ndarray
    energy_drift: float


def ode_limit(r0: float, v0: float, m: int, t_end: float,
              beta: float = 4.0, c: float = 1.0,
              coefficient: float | None = None, points: int = 800,
              rtol: float = 1e-11, atol: float = 1e-13) -> OdeTrajectory:
    """Integrate dr/dt = coef v, dv/dt = 2 beta c sgn(r) |r|^{beta-1}.

    An approach phase corresponds to v0 < 0 in this orientation (the
    discrete recursion's positive-deviation convention is the same flow
    with the sign of v flipped).  The energy coef v^2 - 4 c |r|^beta is an
    exact invariant; its observed relative drift is reported.
    """
    coef = _coef(m, coefficient)

    def rhs(_t, y):
        r, v = y
        return (coef * v, 2.0 * beta * c * _spow(r, beta - 1.0))

    sol = solve_ivp(rhs, (0.0, float(t_end)), (float(r0), float(v0)),
                    method="DOP853", rtol=rtol, atol=atol,
                    t_eval=np.linspace(0.0, float(t_end), points),
                    dense_output=False)
    if not sol.success:
        raise StepUnderflow(f"adaptive integrator failed: {sol.message}")
    r, v = sol.y
    h = energy(r, v, m, beta=beta, c=c, coefficient=coefficient)
    h0 = abs(h[0])
    drift = float(np.max(np.abs(h - h[0])) / max(h0, 1e-300))
    return OdeTrajectory(t=sol.t, r=r, v=v, energy_drift=drift)


def energy_ratio(traj: ChannelTrajectory) -> np.ndarray:
    """Virial-style ratio coef v_j^2 / (4 c |r_j|^beta) along the approach.

    On the decreasing phase of a deep excursion this stays of order one
    (well inside [1/2, 2]) until the turning region, where the deviation
    dies and the ratio drops to zero.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        return (traj.coefficient * traj.v ** 2
                / (4.0 * traj.c * np.abs(traj.r) ** traj.beta))


# ---------------------------------------------------------------------------
# scaling structure of a trapped excursion
# ---------------------------------------------------------------------------

def _fit_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Unweighted log-log LSQ fit returning (slope, intercept, ci95)."""
    lx, ly = np.log(x), np.log(y)
    n = lx.size
    A = np.vstack([lx, np.ones(n)]).T
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    if n > 2:
        sse = float(res[0]) if res.size else float(
            np.sum((ly - A @ coef) ** 2))
        sxx = float(np.sum((lx - lx.mean()) ** 2))
        se = math.sqrt(max(sse / (n - 2), 0.0) / max(sxx, 1e-300))
        ci = 1.96 * se
    else:
        ci = float("inf")
    return slope, intercept, ci


@dataclass(frozen=True)
class ScalingReport:
    """Fitted scaling laws across a sweep of excursion depths."""

    m: int
    beta: float
    depths: np.ndarray
    turning_offsets: np.ndarray
    turning_indices: np.ndarray
    half_speed_indices: np.ndarray
    z_slope: float
    z_ci: float
    z_window: tuple[int, int]
    turning_offset_slope: float
    turning_offset_ci: float
    details: dict = field(default_factory=dict)


def scaling_report(m: int, depths=(8, 12, 16, 24, 32, 48),
                   beta: float = 4.0, c: float = 1.0,
                   coefficient: float | None = None,
                   r0: float | None = None) -> ScalingReport:
    """Measure the power-law structure of trapped excursions.

    Along the approach phase the transformed offset Z_j = |r_j|^{-(beta-2)/2}
    grows linearly in j (fitted slope of log Z vs log j ~ 1, over the middle
    of the approach of the deepest run).  Across a sweep of depths k the
    turning offset follows k^{-beta/(beta-2)} at fixed m, and the half-speed
    index stays a fixed fraction of the turning index.
    """
    ks = np.asarray(sorted(set(int(k) for k in depths)))
    runs = [entry_state_for_depth(m, int(k), beta=beta, c=c,
                                  coefficient=coefficient, r0=r0)
            for k in ks]
    kp = np.array([tr.turning_index for tr in runs])
    kpp = np.array([tr.half_speed_index for tr in runs])
    r_turn = np.array([abs(tr.r[tr.turning_index]) for tr in runs])

    deep = runs[-1]
    j_lo = max(2, int(0.15 * deep.turning_index))
    j_hi = max(j_lo + 3, int(0.85 * deep.turning_index))
    jj = np.arange(j_lo, j_hi + 1)
    z = np.abs(deep.r[jj]) ** (-(beta - 2.0) / 2.0)
    z_slope, _, z_ci = _fit_line(jj.astype(float), z)

    good = kp > 0
    rt_slope, _, rt_ci = _fit_line(ks[good].astype(float), r_turn[good])

    ratio = kpp[good] / np.maximum(kp[good], 1)
    return ScalingReport(
        m=m, beta=beta, depths=ks, turning_offsets=r_turn,
        turning_indices=kp, half_speed_indices=kpp,
        z_slope=z_slope, z_ci=z_ci, z_window=(j_lo, j_hi),
        turning_offset_slope=rt_slope, turning_offset_ci=rt_ci,
        details={
            "half_speed_ratio": ratio,
            "expected_turning_offset_slope": -beta / (beta - 2.0),
            "energy_drift": np.array([tr.energy_drift for tr in runs]),
            "remainder_violations": np.array(
                [tr.remainder_violations for tr in runs]),
            "remainder_checked": np.array(
                [tr.remainder_checked for tr in runs]),
        })


# ---------------------------------------------------------------------------
# expansion products
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpansionReport:
    """Lower-bound expansion products along one trapped excursion.

    The curvature recursion propagates the post-collision wavefront
    curvature across the k-1 channel flights between the k window
    collisions; ``total`` is the product of the per-flight expansion
    factors 1 + tau * curvature, split into the approach (through the
    turning index) and exit partial products.  ``vertical`` carries the
    extra tau / cos(landing angle) factor picked up by a curve of
    constant-offset seeds, which is what makes it grow like m^2.
    """

    m: int
    k: int
    total: float
    entry: float
    exit: float
    vertical: float
    turning_index: int
    half_speed_index: int
    factors: np.ndarray
    entry_bound_violations: int
    reversibility_ratio: float
    energy_drift: float


def expansion_product(traj: ChannelTrajectory, channel_height: float = 1.0,
                      period: float = 1.0) -> ExpansionReport:
    """Accumulate the wavefront-curvature expansion product for ``traj``.

    Per collision the post-collision curvature is
    2 K / cos(phi) + 1 / (tau + 1 / previous), with K the boundary
    curvature at the collision offset, tau = m * period the flight length
    between window collisions, and cos(phi) = sin(chi + tilt) built from
    the channel-crossing angle chi = atan2(channel_height, m * period) and
    the local profile tilt.  The per-flight factor on the approach phase
    dominates 1 + A/j with A = (2 beta - 2)/(beta - 2); violations of that
    bound are counted over the approach.
    """
    if traj.depth is None:
        raise ValueError("cannot build the expansion product of a "
                         "censored excursion")
    m, beta, c = traj.m, traj.beta, traj.c
    k = traj.depth
    tau = m * period
    chi = math.atan2(channel_height, m * period)
    r = traj.r

    def cos_land(rj: float) -> float:
        return math.sin(chi + math.atan(beta * c * abs(rj) ** (beta - 1.0)))

    curv = 1.0 / tau  # incoming wavefront focused one flight back
    factors = np.empty(max(k - 1, 0))
    a_const = (2.0 * beta - 2.0) / (beta - 2.0)
    violations = 0
    for j in range(1, k):
        kappa = beta * (beta - 1.0) * c * abs(r[j]) ** (beta - 2.0)
        curv = 2.0 * kappa / cos_land(r[j]) + 1.0 / (tau + 1.0 / curv)
        factors[j - 1] = 1.0 + tau * curv
        if j <= traj.turning_index and tau * curv < a_const / j:
            violations += 1
    k_p = min(traj.turning_index, max(k - 1, 0))
    entry = float(np.prod(factors[:k_p])) if k_p else 1.0
    exit_ = float(np.prod(factors[k_p:])) if factors.size > k_p else 1.0
    total = entry * exit_
    cos_last = cos_land(r[k - 1]) if k >= 1 else cos_land(r[0])
    vertical = (tau / cos_last) * total
    rev = exit_ * max(k, 1) / entry
    return ExpansionReport(
        m=m, k=k, total=total, entry=entry, exit=exit_, vertical=vertical,
        turning_index=traj.turning_index,
        half_speed_index=traj.half_speed_index,
        factors=factors, entry_bound_violations=violations,
        reversibility_ratio=rev, energy_drift=traj.energy_drift)


@dataclass(frozen=True)
class SweepResult:
    """Grid of expansion products with the two scaling fits."""

    rows: list
    depth_slope: float
    depth_ci: float
    depth_window: tuple[int, int]
    depth_m_fixed: int
    vertical_m_slope: float
    vertical_m_ci: float
    vertical_m_window: tuple[int, int]
    vertical_k_fixed: int
    expected_depth_slope: float
    details: dict = field(default_factory=dict)


def expansion_sweep(m_values=(6, 8, 10, 14, 18, 24, 32),
                    k_values=(4, 6, 8, 12, 16, 24, 32),
                    beta: float = 4.0, c: float = 1.0,
                    coefficient: float | None = None,
                    channel_height: float = 1.0, period: float = 1.0,
                    csv_path: str | None = None) -> SweepResult:
    """Sweep the expansion product over an (m, k) grid and fit its growth.

    The depth fit (log total vs log k at the median m) targets
    3 + 4/(beta-2); the vertical-variant fit (log vertical vs log m at the
    median k) targets 2, the product being m-independent by itself.
    """
    ms = sorted(set(int(x) for x in m_values))
    ks = sorted(set(int(x) for x in k_values))
    rows = []
    reports: dict[tuple[int, int], ExpansionReport] = {}
    for m in ms:
        for k in ks:
            tr = entry_state_for_depth(m, k, beta=beta, c=c,
                                       coefficient=coefficient)
            rep = expansion_product(tr, channel_height=channel_height,
                                    period=period)
            reports[(m, k)] = rep
            rows.append((m, k, rep.total, rep.vertical, rep.turning_index,
                         rep.half_speed_index, rep.energy_drift))
    m_fix = ms[len(ms) // 2]
    k_fix = ks[len(ks) // 2]
    kk = np.array(ks, dtype=float)
    lam_k = np.array([reports[(m_fix, k)].total for k in ks])
    d_slope, _, d_ci = _fit_line(kk, lam_k)
    mm = np.array(ms, dtype=float)
    lam_m = np.array([reports[(m, k_fix)].vertical for m in ms])
    v_slope, _, v_ci = _fit_line(mm, lam_m)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["m", "k", "lambda", "lambda_vertical",
                         "turning_index", "half_speed_index",
                         "energy_drift"])
            for row in rows:
                wr.writerow([row[0], row[1]] +
                            [format(x, ".17g") for x in row[2:]])
    plain_m = np.array([reports[(m, k_fix)].total for m in ms])
    pm_slope, _, pm_ci = _fit_line(mm, plain_m)
    return SweepResult(
        rows=rows, depth_slope=d_slope, depth_ci=d_ci,
        depth_window=(ks[0], ks[-1]), depth_m_fixed=m_fix,
        vertical_m_slope=v_slope, vertical_m_ci=v_ci,
        vertical_m_window=(ms[0], ms[-1]), vertical_k_fixed=k_fix,
        expected_depth_slope=3.0 + 4.0 / (beta - 2.0),
        details={
            "plain_product_m_slope": pm_slope,
            "plain_product_m_ci": pm_ci,
            "entry_bound_violations": {
                mk: rep.entry_bound_violations
                for mk, rep in reports.items()},
            "reversibility_ratios": {
                mk: rep.reversibility_ratio
                for mk, rep in reports.items()},
        })


# ---------------------------------------------------------------------------
# cross-check against the real map
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CocycleReport:
    """Oracle-vs-measured expansion comparison on genuine trapped orbits."""

    m: int
    k_values: np.ndarray
    oracle: np.ndarray
    measured_median: np.ndarray
    ratios: list
    in_band_fraction: float
    oracle_k_slope: float
    measured_k_slope: float
    orbit_counts: np.ndarray
    reversibility_ratios: np.ndarray
    details: dict = field(default_factory=dict)


def _measured_expansion(table: Table, r0: float, phi0: float,
                        steps: int) -> float | None:
    """p-norm growth of a freshly unfolded tangent vector over ``steps``
    scatterer-map iterations from (r0, phi0)."""
    x = PhasePoint(component=0, r=float(r0), phi=float(phi0))
    try:
        dvec = np.array([1.0, point_curvature(table, x)])
        norm0 = abs(math.cos(x.phi) * dvec[0])
        for _ in range(steps):
            x_next, ev = scatterer_map(table, x)
            dd = differential(table, x, ev)
            dvec = dd.matrix @ dvec
            x = x_next
        norm1 = abs(math.cos(x.phi) * dvec[0])
    except TangentialDerivative:
        return None
    if norm0 <= 0.0 or not math.isfinite(norm1):
        return None
    return norm1 / norm0


def cross_check_cocycle(table: Table, m: int, k_values=tuple(range(2, 13)),
                        samples: int = 150_000, per_depth: int = 12,
                        seed: int | None = None, threads: int | None = None,
                        band: tuple[float, float] = (0.1, 10.0),
                        min_depths: int = 3) -> CocycleReport:
    """Compare the oracle expansion product against the measured derivative
    cocycle along genuine trapped orbits of cell index m.

    Trapped first entries are produced by the resonance-targeted sampler;
    for each surviving depth the measured expansion is the p-norm growth of
    an unfolded tangent vector over the excursion's k-1 flights.  Reports
    per-orbit oracle/measured ratios, the fraction inside ``band``, and the
    depth-slope agreement of the two expansions.
    """
    from .statistics import _resolve, _window_entry_sample
    seed, threads = _resolve(table, seed, threads)
    ks = sorted(set(int(k) for k in k_values))
    pool = _window_entry_sample(table, samples,
                                trap_cap=8 * max(ks) * max(m, 1),
                                seed=seed, threads=threads,
                                res_m_max=max(16, m))
    sel = (pool["code"] == 3) & (pool["m"] == m) & \
        np.isin(pool["k"], np.asarray(ks))
    idx = np.nonzero(sel)[0]
    if idx.size == 0:
        raise InsufficientOrbits(
            f"no trapped orbits of cell index {m} among {pool['count']} "
            f"seeds")

    period = {0: table.width, 1: table.height}
    height = {0: table.channel_height, 1: table.channel_width}
    L = table.perimeter
    beta, c = table.beta, table.profile_coefficient

    by_k: dict[int, list[float]] = {k: [] for k in ks}
    ratios = []
    for i in idx:
        k = int(pool["k"][i])
        if len(by_k[k]) >= per_depth or k < 2:
            continue
        lam = _measured_expansion(table, pool["r"][i], pool["phi"][i], k - 1)
        if lam is None or lam <= 0.0:
            continue
        by_k[k].append(lam)
        flat = int(round(pool["r"][i] / (0.25 * L))) % 4
        axis = flat % 2
        try:
            tr = entry_state_for_depth(m, k, beta=beta, c=c)
            rep = expansion_product(tr, channel_height=height[axis],
                                    period=period[axis])
        except BisectionFailure:
            continue
        ratios.append((m, k, rep.total, lam, rep.total / lam))

    have = [k for k in ks if by_k[k]]
    if len(have) < min_depths:
        raise InsufficientOrbits(
            f"only {len(have)} depths populated (need {min_depths}) for "
            f"cell index {m}")
    med = np.array([float(np.median(by_k[k])) for k in have])
    axis0 = 0
    oracle = []
    revs = []
    for k in have:
        tr = entry_state_for_depth(m, k, beta=beta, c=c)
        rep = expansion_product(tr, channel_height=height[axis0],
                                period=period[axis0])
        oracle.append(rep.total)
        revs.append(rep.reversibility_ratio)
    oracle = np.asarray(oracle)
    kk = np.array(have, dtype=float)
    o_slope, _, _ = _fit_line(kk, oracle)
    m_slope, _, _ = _fit_line(kk, med)
    rr = np.array([row[4] for row in ratios])
    in_band = float(np.mean((rr >= band[0]) & (rr <= band[1]))) \
        if rr.size else 0.0
    return CocycleReport(
        m=m, k_values=np.array(have), oracle=oracle, measured_median=med,
        ratios=ratios, in_band_fraction=in_band, oracle_k_slope=o_slope,
        measured_k_slope=m_slope,
        orbit_counts=np.array([len(by_k[k]) for k in have]),
        reversibility_ratios=np.array(revs),
        details={"band": band, "samples": pool["count"],
                 "usable_entries": int(idx.size)})
