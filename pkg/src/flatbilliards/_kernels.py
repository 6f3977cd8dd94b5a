"""Compiled numerical kernels.

Everything here operates on primitive floats/ints and small numpy arrays so
it can be jitted by numba; the public modules wrap these in friendly types.
If numba is unavailable the kernels run as plain Python (slow but correct),
mirroring the usual fallback pattern.

Geometry is packed into a flat float64 vector ``gp`` (see ``GP_*`` indices)
plus two per-octant lookup arrays (Chebyshev-spaced x nodes and cumulative
arclengths).  Status codes (``ST_*``) report kernel-level failures; wrappers
translate them into exceptions.
"""

import math

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    prange = range

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


# --- geometry parameter vector layout -------------------------------------
GP_BETA = 0       # superellipse exponent
GP_A = 1          # semi-axis a
GP_C = 2          # flat-point profile coefficient 1/(beta a^(beta-1))
GP_W = 3          # cell width
GP_H = 4          # cell height
GP_XD = 5         # octant end abscissa a 2^(-1/beta)
GP_SOCT = 6       # octant arclength
GP_LB = 7         # scatterer perimeter
GP_TANTOL = 8     # |cos phi| below this counts as tangential
GP_NEWTON = 9     # root polish tolerance
GP_TAUMIN = 10    # scatterer-to-nearest-wall gap
GP_EPS0 = 11      # window constant
GP_K0 = 12        # homogeneity cutoff (stored as float)
GP_MAXCELLS = 13  # flight cell cap (stored as float)
GP_CIRCR = 14     # circumradius a 2^(1/2-1/beta)
GP_BAND = 15      # dip depth needing convexity refinement
GP_GUARD = 16     # minimum flight time off the launch body
GP_INVBM1 = 17    # 1/(beta-1)
GP_GPOS = 18      # g threshold treated as safely outside the body
GP_PSI0H = 19     # window grazing-angle cap at horizontal-channel flats
GP_PSI0V = 20     # window grazing-angle cap at vertical-channel flats
GP_SIZE = 21

# --- boundary component codes ----------------------------------------------
COMP_SCATTERER = 0
COMP_WALL_N = 1
COMP_WALL_E = 2
COMP_WALL_S = 3
COMP_WALL_W = 4

# --- dynamics mode codes ----------------------------------------------------
MODE_RECTANGLE = 0
MODE_TORUS = 1

# --- status codes ------------------------------------------------------------
ST_OK = 0
ST_HORIZON = 1
ST_DEGENERATE = 2
ST_NONRETURN = 3
ST_TANGENT = 4
ST_NOCONV = 5


# ===========================================================================
# octant-local superellipse geometry
#
# The canonical octant runs from the flat point (0, a) to the diagonal point
# (xd, xd), parametrized by the abscissa x with y(x) = (a^b - x^b)^(1/b).
# |y'| <= 1 there, so arclength integrands stay in [1, sqrt(2)].
# ===========================================================================


@njit(cache=True, nogil=True)
def oct_y(x, beta, a):
    v = a ** beta - x ** beta
    if v < 0.0:
        v = 0.0
    return v ** (1.0 / beta)


@njit(cache=True, nogil=True)
def oct_yp(x, y, beta):
    if x <= 0.0:
        return 0.0
    return -((x / y) ** (beta - 1.0))


@njit(cache=True, nogil=True)
def oct_speed(x, beta, a):
    y = oct_y(x, beta, a)
    yp = oct_yp(x, y, beta)
    return math.sqrt(1.0 + yp * yp)


@njit(cache=True, nogil=True)
def oct_kappa(x, y, beta):
    """Curvature at an octant point; zero exactly at the flat point."""
    if x <= 0.0:
        return 0.0
    q = x / y
    num = (beta - 1.0) * x ** (beta - 2.0) * y ** (1.0 - beta) * (1.0 + q ** beta)
    den = (1.0 + q ** (2.0 * beta - 2.0)) ** 1.5
    return num / den


@njit(cache=True, nogil=True)
def s_from_xloc(x, x_nodes, s_nodes, beta, a):
    """Arclength from the flat point to abscissa x (3-point Gauss from node)."""
    n = x_nodes.shape[0]
    if x <= x_nodes[0]:
        return s_nodes[0]
    if x >= x_nodes[n - 1]:
        x = x_nodes[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if x_nodes[mid] <= x:
            lo = mid
        else:
            hi = mid
    x0 = x_nodes[lo]
    h = x - x0
    if h == 0.0:
        return s_nodes[lo]
    # Gauss-Legendre 3 on [x0, x]
    g = 0.5 * math.sqrt(0.6)
    t1 = x0 + h * (0.5 - g)
    t2 = x0 + h * 0.5
    t3 = x0 + h * (0.5 + g)
    f1 = oct_speed(t1, beta, a)
    f2 = oct_speed(t2, beta, a)
    f3 = oct_speed(t3, beta, a)
    return s_nodes[lo] + h * (5.0 * f1 + 8.0 * f2 + 5.0 * f3) / 18.0


@njit(cache=True, nogil=True)
def xloc_from_s(s, x_nodes, s_nodes, beta, a, tol):
    """Invert the octant arclength table (bracket + Newton refinement)."""
    n = s_nodes.shape[0]
    if s <= s_nodes[0]:
        return x_nodes[0]
    if s >= s_nodes[n - 1]:
        return x_nodes[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if s_nodes[mid] <= s:
            lo = mid
        else:
            hi = mid
    xa = x_nodes[lo]
    xb = x_nodes[lo + 1]
    sa = s_nodes[lo]
    sb = s_nodes[lo + 1]
    x = xa + (xb - xa) * (s - sa) / (sb - sa)
    for _ in range(8):
        f = s_from_xloc(x, x_nodes, s_nodes, beta, a) - s
        d = oct_speed(x, beta, a)
        step = f / d
        x -= step
        if x < xa:
            x = xa
        elif x > xb:
            x = xb
        if abs(step) < 0.01 * tol:
            break
    return x


# ===========================================================================
# boundary frames
#
# Scatterer arclength r runs counterclockwise with r = 0 at the top flat
# point; walls run clockwise around the rectangle.  With these orientations
# the billiard domain lies on the right of every component and the one-step
# derivative takes the same closed form on every step pair.
# ===========================================================================


@njit(cache=True, nogil=True)
def scat_frame(r, gp, x_nodes, s_nodes):
    """Position, unit tangent and curvature at scatterer arclength r.

    Returns (px, py, tx, ty, kappa); the inward normal is (ty, -tx).
    """
    beta = gp[GP_BETA]
    a = gp[GP_A]
    L = gp[GP_LB]
    r = r % L
    lq = 0.25 * L
    le = 0.125 * L
    q = int(r // lq)
    if q > 3:
        q = 3
    rq = r - q * lq
    if rq <= le:
        s = rq
        half = 0
    else:
        s = lq - rq
        half = 1
    x = xloc_from_s(s, x_nodes, s_nodes, beta, a, gp[GP_NEWTON])
    y = oct_y(x, beta, a)
    yp = oct_yp(x, y, beta)
    g = 1.0 / math.sqrt(1.0 + yp * yp)
    if half == 0:
        px = -x
        py = y
        tx = -g
        ty = yp * g
    else:
        px = -y
        py = x
        tx = yp * g
        ty = -g
    kap = oct_kappa(x, y, beta)
    # rotate by q quarter turns
    for _ in range(q):
        px, py = -py, px
        tx, ty = -ty, tx
    return px, py, tx, ty, kap


@njit(cache=True, nogil=True)
def r_from_point(px, py, gp, x_nodes, s_nodes):
    """Scatterer arclength of a boundary point in cell-centered coordinates."""
    beta = gp[GP_BETA]
    a = gp[GP_A]
    L = gp[GP_LB]
    lq = 0.25 * L
    if px <= 0.0 and py > 0.0:
        q = 0
    elif px < 0.0 and py <= 0.0:
        q = 1
    elif px >= 0.0 and py < 0.0:
        q = 2
    else:
        q = 3
    ux = px
    uy = py
    for _ in range(q):
        ux, uy = uy, -ux
    # quarter-0 coordinates: ux <= 0, uy >= 0
    if uy >= -ux:
        xloc = -ux
        s = s_from_xloc(xloc, x_nodes, s_nodes, beta, a)
        rq = s
    else:
        xloc = uy
        s = s_from_xloc(xloc, x_nodes, s_nodes, beta, a)
        rq = lq - s
    r = q * lq + rq
    if r >= L:
        r -= L
    return r


@njit(cache=True, nogil=True)
def wall_frame(comp, r, w, h):
    """Position and unit tangent on a wall (clockwise rectangle traversal)."""
    if comp == COMP_WALL_N:
        return -0.5 * w + r, 0.5 * h, 1.0, 0.0
    if comp == COMP_WALL_E:
        return 0.5 * w, 0.5 * h - r, 0.0, -1.0
    if comp == COMP_WALL_S:
        return 0.5 * w - r, -0.5 * h, -1.0, 0.0
    return -0.5 * w, -0.5 * h + r, 0.0, 1.0


@njit(cache=True, nogil=True)
def wall_length(comp, w, h):
    if comp == COMP_WALL_N or comp == COMP_WALL_S:
        return w
    return h


@njit(cache=True, nogil=True)
def flat_distance(r, L):
    """Circular arclength distance to the nearest of the four flat points."""
    lq = 0.25 * L
    le = 0.125 * L
    d = (r % lq + le) % lq - le
    return abs(d)


@njit(cache=True, nogil=True)
def signed_flat_offset(r, L):
    """Signed arclength offset from the nearest flat point, in (-L/8, L/8]."""
    lq = 0.25 * L
    le = 0.125 * L
    return (r % lq + le) % lq - le


@njit(cache=True, nogil=True)
def window_halfwidth(gp, m):
    mm = m if m > 1 else 1
    return gp[GP_EPS0] * mm ** (-gp[GP_INVBM1])


@njit(cache=True, nogil=True)
def window_grazing(r, phi, gp):
    """Whether the outgoing ray is channel-aligned at the nearest flat point.

    Window membership requires near-tangential flight along the channel the
    flat point opens into; frontal bounces near a flat point are excluded.
    """
    lq = 0.25 * gp[GP_LB]
    idx = int(math.floor(r / lq + 0.5)) % 4
    cap = gp[GP_PSI0H] if idx % 2 == 0 else gp[GP_PSI0V]
    return 0.5 * math.pi - abs(phi) < cap


@njit(cache=True, nogil=True)
def in_window_arc(r, phi, m, gp):
    """Window membership: inside the arc of index m and channel-grazing."""
    if flat_distance(r, gp[GP_LB]) > window_halfwidth(gp, m):
        return False
    return window_grazing(r, phi, gp)


# ===========================================================================
# free flight
#
# g(t) = |x(t)|^b + |y(t)|^b - a^b along a ray is strictly convex (sum of
# strictly convex terms), so its sublevel set is a single interval: a probe
# scan plus a golden-section refinement of the minimum cannot miss a dip.
# ===========================================================================


@njit(cache=True, nogil=True)
def _gval(ox, oy, dx, dy, t, beta, a):
    x = ox + t * dx
    y = oy + t * dy
    return abs(x) ** beta + abs(y) ** beta - a ** beta


@njit(cache=True, nogil=True)
def _gderiv(ox, oy, dx, dy, t, beta):
    x = ox + t * dx
    y = oy + t * dy
    gx = beta * abs(x) ** (beta - 1.0)
    if x < 0.0:
        gx = -gx
    gy = beta * abs(y) ** (beta - 1.0)
    if y < 0.0:
        gy = -gy
    return gx * dx + gy * dy


@njit(cache=True, nogil=True)
def _root_polish(ox, oy, dx, dy, tlo, thi, beta, a, tol):
    """Root of g on a bracket with g(tlo) > 0 > g(thi): bisection + Newton."""
    for _ in range(100):
        tm = 0.5 * (tlo + thi)
        gm = _gval(ox, oy, dx, dy, tm, beta, a)
        if gm > 0.0:
            tlo = tm
        else:
            thi = tm
        if thi - tlo < 1e-6 * (abs(tm) + 1.0):
            break
    t = 0.5 * (tlo + thi)
    for _ in range(30):
        f = _gval(ox, oy, dx, dy, t, beta, a)
        d = _gderiv(ox, oy, dx, dy, t, beta)
        if d == 0.0:
            break
        step = f / d
        t -= step
        if t < tlo or t > thi:
            t = 0.5 * (tlo + thi)
            f = _gval(ox, oy, dx, dy, t, beta, a)
            if f > 0.0:
                tlo = t
            else:
                thi = t
            continue
        if abs(step) < tol:
            break
    return t


@njit(cache=True, nogil=True)
def _exit_root(ox, oy, dx, dy, tin, thi, beta, a, tol):
    """Exit root of the dip: g(tin) <= 0, g(thi) > 0."""
    lo = tin
    hi = thi
    for _ in range(100):
        tm = 0.5 * (lo + hi)
        gm = _gval(ox, oy, dx, dy, tm, beta, a)
        if gm <= 0.0:
            lo = tm
        else:
            hi = tm
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


@njit(cache=True, nogil=True)
def body_hit_on_segment(ox, oy, dx, dy, ta, tb, gp):
    """First intersection of ray(t), t in [ta, tb], with the centered body.

    Returns (code, t_first, t_inside, t_hi): code 0 = no intersection,
    1 = entry root at t_first, with g(t_inside) < 0 and g > 0 on
    (t_inside, t_hi] past the dip (so the exit root lies in between).
    Coordinates are relative to the scatterer center.
    """
    beta = gp[GP_BETA]
    a = gp[GP_A]
    rc = gp[GP_CIRCR]
    if tb <= ta:
        return 0, 0.0, 0.0, 0.0
    # closest approach of the infinite line to the center
    tstar = -(ox * dx + oy * dy)
    cx = ox + tstar * dx
    cy = oy + tstar * dy
    d2 = cx * cx + cy * cy
    if d2 >= rc * rc:
        return 0, 0.0, 0.0, 0.0
    # clip to the circumdisk chord around the closest approach; any point of
    # the body, hence any root, lies strictly inside this chord
    halfc = math.sqrt(rc * rc - d2)
    lo = tstar - halfc
    hi = tstar + halfc
    if lo < ta:
        lo = ta
    if hi > tb:
        hi = tb
    if hi <= lo:
        return 0, 0.0, 0.0, 0.0
    seg = hi - lo
    npb = int(math.ceil(seg / a)) * 32
    if npb < 64:
        npb = 64
    dt = seg / npb
    gpos = gp[GP_GPOS]
    tol = gp[GP_NEWTON]
    prev_t = lo
    prev_g = _gval(ox, oy, dx, dy, lo, beta, a)
    g_at_lo = prev_g
    armed = prev_g > gpos
    best_g = prev_g
    best_t = lo
    for i in range(1, npb + 1):
        t = lo + dt * i
        g = _gval(ox, oy, dx, dy, t, beta, a)
        if g < best_g:
            best_g = g
            best_t = t
        if armed and g < 0.0:
            t1 = _root_polish(ox, oy, dx, dy, prev_t, t, beta, a, tol)
            return 1, t1, t, hi
        if g > gpos:
            armed = True
        prev_t = t
        prev_g = g
    # No bracketed crossing.  g is strictly convex along the ray, so a dip
    # narrower than the probe spacing can hide only around the grid minimum:
    # refine it by golden section before declaring the segment clear.
    if best_g >= gp[GP_BAND]:
        return 0, 0.0, 0.0, 0.0
    b_lo = best_t - dt
    if b_lo < lo:
        b_lo = lo
    b_hi = best_t + dt
    if b_hi > hi:
        b_hi = hi
    invphi = 0.6180339887498949
    x1 = b_hi - invphi * (b_hi - b_lo)
    x2 = b_lo + invphi * (b_hi - b_lo)
    f1 = _gval(ox, oy, dx, dy, x1, beta, a)
    f2 = _gval(ox, oy, dx, dy, x2, beta, a)
    for _ in range(90):
        if f1 <= f2:
            b_hi = x2
            x2 = x1
            f2 = f1
            x1 = b_hi - invphi * (b_hi - b_lo)
            f1 = _gval(ox, oy, dx, dy, x1, beta, a)
        else:
            b_lo = x1
            x1 = x2
            f1 = f2
            x2 = b_lo + invphi * (b_hi - b_lo)
            f2 = _gval(ox, oy, dx, dy, x2, beta, a)
        if b_hi - b_lo < 1e-15 * (abs(x1) + 1.0):
            break
    tmin = 0.5 * (b_lo + b_hi)
    gmin = _gval(ox, oy, dx, dy, tmin, beta, a)
    if gmin >= 0.0:
        return 0, 0.0, 0.0, 0.0
    if g_at_lo <= 0.0:
        # dip straddles the segment start: only possible when the launch
        # point itself sits on this body (convexity: a departing ray never
        # re-enters), so there is no genuine hit ahead on this segment
        return 0, 0.0, 0.0, 0.0
    t1 = _root_polish(ox, oy, dx, dy, lo, tmin, beta, a, tol)
    return 1, t1, tmin, hi


@njit(cache=True, nogil=True)
def next_collision_kernel(x0, y0, dx, dy, mode, gp, x_nodes, s_nodes):
    """Trace a ray to its first genuine (non-tangential) boundary hit.

    Positions are absolute; scatterer centers sit at (i*w, j*h) in Torus
    mode and only at the origin in Rectangle mode.  Tangential touches
    (|cos| of incidence below tolerance) do not reflect: the flight passes
    through and the touch is counted in ntang.

    Returns (status, tau, comp, rhit, phi_inc_cos_sign_unused, cells, ntang,
             hx, hy) where (hx, hy) is the absolute hit position, rhit the
    arclength on the hit component, cells the number of fundamental-domain
    boundary crossings (both axes) accumulated before the hit.
    """
    w = gp[GP_W]
    h = gp[GP_H]
    beta = gp[GP_BETA]
    a = gp[GP_A]
    tantol = gp[GP_TANTOL]
    guard = gp[GP_GUARD]
    maxcells = gp[GP_MAXCELLS]
    ntang = 0
    t_from = guard

    if mode == MODE_RECTANGLE:
        # single cell: scatterer at origin, walls at x = +-w/2, y = +-h/2
        # wall crossing times (exact)
        t_wall = 1.0e308
        wcomp = -1
        if dx > 0.0:
            tw = (0.5 * w - x0) / dx
            if tw < t_wall:
                t_wall = tw
                wcomp = COMP_WALL_E
        elif dx < 0.0:
            tw = (-0.5 * w - x0) / dx
            if tw < t_wall:
                t_wall = tw
                wcomp = COMP_WALL_W
        if dy > 0.0:
            tw = (0.5 * h - y0) / dy
            if tw < t_wall:
                t_wall = tw
                wcomp = COMP_WALL_N
        elif dy < 0.0:
            tw = (-0.5 * h - y0) / dy
            if tw < t_wall:
                t_wall = tw
                wcomp = COMP_WALL_S
        if wcomp < 0:
            return ST_DEGENERATE, 0.0, -1, 0.0, 0.0, 0, 0, 0.0, 0.0
        t_cur = t_from
        while True:
            code, t1, t_in, t_hi = body_hit_on_segment(
                x0, y0, dx, dy, t_cur, t_wall, gp)
            if code == 1:
                gx = beta * abs(x0 + t1 * dx) ** (beta - 1.0)
                if x0 + t1 * dx < 0.0:
                    gx = -gx
                gy = beta * abs(y0 + t1 * dy) ** (beta - 1.0)
                if y0 + t1 * dy < 0.0:
                    gy = -gy
                gn = math.sqrt(gx * gx + gy * gy)
                co = -(dx * gx + dy * gy) / gn
                if co < tantol:
                    ntang += 1
                    t_cur = _exit_root(x0, y0, dx, dy, t_in, t_hi, beta, a,
                                       gp[GP_NEWTON]) + guard
                    continue
                hx = x0 + t1 * dx
                hy = y0 + t1 * dy
                rhit = r_from_point(hx, hy, gp, x_nodes, s_nodes)
                return ST_OK, t1, COMP_SCATTERER, rhit, co, 0, ntang, hx, hy
            break
        hx = x0 + t_wall * dx
        hy = y0 + t_wall * dy
        if wcomp == COMP_WALL_N:
            rw = hx + 0.5 * w
            co = dy
        elif wcomp == COMP_WALL_E:
            rw = 0.5 * h - hy
            co = dx
        elif wcomp == COMP_WALL_S:
            rw = 0.5 * w - hx
            co = -dy
        else:
            rw = hy + 0.5 * h
            co = -dx
        if rw < 0.0:
            rw = 0.0
        wl = wall_length(wcomp, w, h)
        if rw > wl:
            rw = wl
        return ST_OK, t_wall, wcomp, rw, abs(co), 0, ntang, hx, hy

    # torus: voxel walk over fundamental cells [i w - w/2, i w + w/2) x ...
    i = int(math.floor((x0 + 0.5 * w) / w))
    j = int(math.floor((y0 + 0.5 * h) / h))
    i0 = i
    j0 = j
    if dx > 0.0:
        stepi = 1
        tmaxx = ((i + 0.5) * w - x0) / dx
        tdx = w / dx
    elif dx < 0.0:
        stepi = -1
        tmaxx = ((i - 0.5) * w - x0) / dx
        tdx = -w / dx
    else:
        stepi = 0
        tmaxx = 1.0e308
        tdx = 0.0
    if dy > 0.0:
        stepj = 1
        tmaxy = ((j + 0.5) * h - y0) / dy
        tdy = h / dy
    elif dy < 0.0:
        stepj = -1
        tmaxy = ((j - 0.5) * h - y0) / dy
        tdy = -h / dy
    else:
        stepj = 0
        tmaxy = 1.0e308
        tdy = 0.0
    t_cur = t_from
    while True:
        t_exit = tmaxx if tmaxx < tmaxy else tmaxy
        ox = x0 - i * w
        oy = y0 - j * h
        tseg = t_cur
        while True:
            code, t1, t_in, t_hi = body_hit_on_segment(
                ox, oy, dx, dy, tseg, t_exit, gp)
            if code == 0:
                break
            gx = beta * abs(ox + t1 * dx) ** (beta - 1.0)
            if ox + t1 * dx < 0.0:
                gx = -gx
            gy = beta * abs(oy + t1 * dy) ** (beta - 1.0)
            if oy + t1 * dy < 0.0:
                gy = -gy
            gn = math.sqrt(gx * gx + gy * gy)
            co = -(dx * gx + dy * gy) / gn
            if co < tantol:
                ntang += 1
                tseg = _exit_root(ox, oy, dx, dy, t_in, t_hi, beta, a,
                                  gp[GP_NEWTON]) + guard
                continue
            hx_rel = ox + t1 * dx
            hy_rel = oy + t1 * dy
            rhit = r_from_point(hx_rel, hy_rel, gp, x_nodes, s_nodes)
            cells = i - i0
            if cells < 0:
                cells = -cells
            dj = j - j0
            if dj < 0:
                dj = -dj
            cells += dj
            return (ST_OK, t1, COMP_SCATTERER, rhit, co, cells, ntang,
                    x0 + t1 * dx, y0 + t1 * dy)
        # advance to the next cell
        if tmaxx < tmaxy:
            i += stepi
            tmaxx += tdx
        else:
            j += stepj
            tmaxy += tdy
        t_cur = t_exit
        di = i - i0
        if di < 0:
            di = -di
        dj = j - j0
        if dj < 0:
            dj = -dj
        if di > maxcells or dj > maxcells:
            return ST_HORIZON, t_cur, -1, 0.0, 0.0, di, ntang, 0.0, 0.0


# ===========================================================================
# collision-to-collision map
# ===========================================================================


@njit(cache=True, nogil=True)
def comp_frame(comp, r, gp, x_nodes, s_nodes):
    """Frame on any boundary component: (px, py, tx, ty, kappa)."""
    if comp == COMP_SCATTERER:
        return scat_frame(r, gp, x_nodes, s_nodes)
    px, py, tx, ty = wall_frame(comp, r, gp[GP_W], gp[GP_H])
    return px, py, tx, ty, 0.0


@njit(cache=True, nogil=True)
def map_step(r, phi, comp, mode, gp, x_nodes, s_nodes):
    """One collision map step from post-collision state (comp, r, phi).

    Returns (status, r1, phi1, comp1, tau, cells, ntang).
    """
    px, py, tx, ty, _ = comp_frame(comp, r, gp, x_nodes, s_nodes)
    nx = ty
    ny = -tx
    cphi = math.cos(phi)
    sphi = math.sin(phi)
    dx = cphi * nx + sphi * tx
    dy = cphi * ny + sphi * ty
    st, tau, comp1, r1, co, cells, ntang, hx, hy = next_collision_kernel(
        px, py, dx, dy, mode, gp, x_nodes, s_nodes)
    if st != ST_OK:
        return st, 0.0, 0.0, -1, tau, cells, ntang
    p1x, p1y, t1x, t1y, _ = comp_frame(comp1, r1, gp, x_nodes, s_nodes)
    n1x = t1y
    n1y = -t1x
    vn = dx * n1x + dy * n1y
    rx = dx - 2.0 * vn * n1x
    ry = dy - 2.0 * vn * n1y
    phi1 = math.atan2(rx * t1x + ry * t1y, rx * n1x + ry * n1y)
    return ST_OK, r1, phi1, comp1, tau, cells, ntang


@njit(cache=True, nogil=True)
def map_step_full(r, phi, comp, mode, gp, x_nodes, s_nodes):
    """map_step plus the local data the one-step derivative needs.

    Returns (status, r1, phi1, comp1, tau, cells, ntang, kappa0, kappa1).
    """
    st, r1, phi1, comp1, tau, cells, ntang = map_step(
        r, phi, comp, mode, gp, x_nodes, s_nodes)
    if st != ST_OK:
        return st, r1, phi1, comp1, tau, cells, ntang, 0.0, 0.0
    if comp == COMP_SCATTERER:
        _, _, _, _, k0 = scat_frame(r, gp, x_nodes, s_nodes)
    else:
        k0 = 0.0
    if comp1 == COMP_SCATTERER:
        _, _, _, _, k1 = scat_frame(r1, gp, x_nodes, s_nodes)
    else:
        k1 = 0.0
    return st, r1, phi1, comp1, tau, cells, ntang, k0, k1


@njit(cache=True, nogil=True)
def derivative_entries(tau, phi, phi1, k0, k1):
    """One-step derivative in (dr, dphi) coordinates.

    Valid on every component pair under the fixed orientation convention
    (domain on the right of each oriented component); determinant is
    cos(phi)/cos(phi1).
    """
    c0 = math.cos(phi)
    c1 = math.cos(phi1)
    f = -1.0 / c1
    a11 = f * (tau * k0 + c0)
    a12 = f * tau
    a21 = f * (tau * k0 * k1 + k0 * c1 + k1 * c0)
    a22 = f * (tau * k1 + c1)
    return a11, a12, a21, a22


@njit(cache=True, nogil=True)
def lyap_kernel(r, phi, comp, mode, nsteps, renorm, gp, x_nodes, s_nodes):
    """Average log Euclidean expansion of a transported tangent vector.

    The vector is renormalized every ``renorm`` steps; tangential steps and
    map failures stop the walk.  Returns (status, mean_log, steps_done,
    r_end, phi_end, comp_end).
    """
    vr = 0.0
    vp = 1.0
    acc = 0.0
    done = 0
    tantol = gp[GP_TANTOL]
    while done < nsteps:
        st, r1, phi1, comp1, tau, _, _, k0, k1 = map_step_full(
            r, phi, comp, mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            return st, acc, done, r, phi, comp
        if abs(math.cos(phi1)) < tantol:
            return ST_TANGENT, acc, done, r1, phi1, comp1
        a11, a12, a21, a22 = derivative_entries(tau, phi, phi1, k0, k1)
        vr, vp = a11 * vr + a12 * vp, a21 * vr + a22 * vp
        r = r1
        phi = phi1
        comp = comp1
        done += 1
        if done % renorm == 0:
            nv = math.sqrt(vr * vr + vp * vp)
            acc += math.log(nv)
            vr /= nv
            vp /= nv
    nv = math.sqrt(vr * vr + vp * vp)
    acc += math.log(nv)
    return ST_OK, acc, done, r, phi, comp


@njit(cache=True, nogil=True)
def scat_segment(r, phi, base_mode, gp, x_nodes, s_nodes):
    """Walk from a scatterer collision to the next scatterer collision.

    base_mode MODE_TORUS: a single periodic-lattice flight.
    base_mode MODE_RECTANGLE: wall bounces are individual steps; each wall
    hit unfolds to one fundamental-domain crossing of the straightened
    flight, so the cell count equals the number of wall hits.

    Returns (status, r1, phi1, steps, cells, tau_total, ntang).
    """
    if base_mode == MODE_TORUS:
        st, r1, phi1, comp1, tau, cells, ntang = map_step(
            r, phi, COMP_SCATTERER, MODE_TORUS, gp, x_nodes, s_nodes)
        return st, r1, phi1, 1, cells, tau, ntang
    cur_r = r
    cur_phi = phi
    cur_comp = COMP_SCATTERER
    steps = 0
    cells = 0
    tau_total = 0.0
    ntang = 0
    maxsteps = int(gp[GP_MAXCELLS])
    while True:
        st, r1, phi1, comp1, tau, _, nt = map_step(
            cur_r, cur_phi, cur_comp, MODE_RECTANGLE, gp, x_nodes, s_nodes)
        if st != ST_OK:
            return st, cur_r, cur_phi, steps, cells, tau_total, ntang
        steps += 1
        tau_total += tau
        ntang += nt
        if comp1 != COMP_SCATTERER:
            cells += 1
        if comp1 == COMP_SCATTERER:
            return ST_OK, r1, phi1, steps, cells, tau_total, ntang
        cur_r = r1
        cur_phi = phi1
        cur_comp = comp1
        if steps > maxsteps:
            return ST_HORIZON, r1, phi1, steps, cells, tau_total, ntang


@njit(cache=True, nogil=True)
def flight_index(r, phi, gp, x_nodes, s_nodes):
    """Cell index of the upcoming flight (domain crossings, torus)."""
    st, _, _, _, cells, _, _ = scat_segment(
        r, phi, MODE_TORUS, gp, x_nodes, s_nodes)
    if st != ST_OK:
        return -1
    return cells


@njit(cache=True, nogil=True)
def in_return_base(r, phi, n, gp):
    """Whether a scatterer point with flight index n lies outside its window."""
    return not in_window_arc(r, phi, n, gp)


@njit(cache=True, nogil=True)
def induced_step(r, phi, base_mode, cap, gp, x_nodes, s_nodes):
    """First-return map to the window-free part of the scatterer section.

    Iterates the base dynamics (rectangle full map or torus scatterer map)
    until the orbit lands on the scatterer outside the window of its own
    flight index.  Returns (status, r1, phi1, R, n_return) where R counts
    base-map steps and n_return is the flight index at the return point.
    """
    st, ry, py, steps, ncross, _, _ = scat_segment(
        r, phi, base_mode, gp, x_nodes, s_nodes)
    if st != ST_OK:
        return st, r, phi, 0, -1
    total = steps
    while True:
        # flight index of the candidate return point = next segment's cells
        st, rz, pz, steps2, ncross2, _, _ = scat_segment(
            ry, py, base_mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            return st, ry, py, total, -1
        if in_return_base(ry, py, ncross2, gp):
            return ST_OK, ry, py, total, ncross2
        ry = rz
        py = pz
        ncross = ncross2
        total += steps2
        if total > cap:
            return ST_NONRETURN, ry, py, total, -1


@njit(cache=True, nogil=True)
def trap_run(r, phi, m_entry, cap, gp, x_nodes, s_nodes):
    """Trapped-collision count after entering from cell index m_entry.

    Starts at a scatterer point x, iterates the torus scatterer map and
    counts intermediate collisions whose base point lies inside the window
    arc assigned at entry, stopping at the first return to the window-free
    section.  Returns (status, k, nsteps, r_exit, phi_exit) where nsteps is
    the number of scatterer-map steps from x to the return point.
    """
    halfw = window_halfwidth(gp, m_entry)
    L = gp[GP_LB]
    st, ry, py, _, _, _, _ = scat_segment(r, phi, MODE_TORUS, gp, x_nodes, s_nodes)
    if st != ST_OK:
        return st, 0, 0, r, phi
    k = 0
    it = 1
    while True:
        st, rz, pz, _, ncross2, _, _ = scat_segment(
            ry, py, MODE_TORUS, gp, x_nodes, s_nodes)
        if st != ST_OK:
            return st, k, it, ry, py
        if in_return_base(ry, py, ncross2, gp):
            return ST_OK, k, it, ry, py
        if flat_distance(ry, L) <= halfw and window_grazing(ry, py, gp):
            k += 1
        ry = rz
        py = pz
        it += 1
        if it > cap:
            return ST_NONRETURN, k, it, ry, py


# ---------------------------------------------------------------------------
# labels and estimator batch kernels
# ---------------------------------------------------------------------------

HOM_CAP = 9999


@njit(cache=True, nogil=True)
def hom_index(phi, k0):
    """Signed homogeneity-strip index of an angle, 0 in the central bulk."""
    gap = 0.5 * math.pi - abs(phi)
    if gap * k0 * k0 > 1.0:
        return 0
    if gap <= 0.0:
        k = HOM_CAP
    else:
        k = int(1.0 / math.sqrt(gap))
        if k > HOM_CAP:
            k = HOM_CAP
    if phi < 0.0:
        return -k
    return k


@njit(cache=True, nogil=True)
def bump_value(r, phi, box):
    """Smooth compact bump on a (r, phi) box, 1 at the center, 0 outside."""
    ur = (2.0 * r - (box[1] + box[0])) / (box[1] - box[0])
    up = (2.0 * phi - (box[3] + box[2])) / (box[3] - box[2])
    if ur <= -1.0 or ur >= 1.0 or up <= -1.0 or up >= 1.0:
        return 0.0
    return math.exp(2.0 - 1.0 / (1.0 - ur * ur) - 1.0 / (1.0 - up * up))


@njit(cache=True, nogil=True)
def point_label(r, phi, gp, x_nodes, s_nodes):
    """Integer label of a scatterer point: flight cell index, window flag,

    homogeneity indices of the point and of its scatterer-map image, and a
    tangential-flight flag, packed into one int64.  Returns -1 on failure.
    """
    st, r1, phi1, _, cells, _, ntang = scat_segment(
        r, phi, MODE_TORUS, gp, x_nodes, s_nodes)
    if st != ST_OK:
        return -1
    k0 = int(gp[GP_K0])
    win = 0
    if in_window_arc(r, phi, cells, gp):
        win = 1
    h0 = hom_index(phi, k0) + 10000
    h1 = hom_index(phi1, k0) + 10000
    tang = 0
    if ntang > 0:
        tang = 1
    lab = cells * 2 + win
    lab = lab * 20001 + h0
    lab = lab * 20001 + h1
    return lab * 2 + tang


@njit(cache=True, nogil=True)
def cone_walk(r0, phi0, mode, nsteps, u_arr, gp, x_nodes, s_nodes):
    """Transport random in-cone slopes along an orbit and check the exact

    image bounds: K1 + cos(phi1)/(tau + cos(phi0)/(2 K0)) <= V1 <=
    K1 + cos(phi1)/tau for seeds V0 in [K0, K0 + cos(phi0)/tau_min].
    Returns (violations, tangential, checked, r_end, phi_end).
    """
    taumin = gp[GP_TAUMIN]
    tantol = gp[GP_TANTOL]
    r = r0
    phi = phi0
    comp = COMP_SCATTERER
    viol = 0
    tang = 0
    checked = 0
    for i in range(nsteps):
        st, r1, phi1, comp1, tau, _, _, k0, k1 = map_step_full(
            r, phi, comp, mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            break
        c0 = math.cos(phi)
        c1 = math.cos(phi1)
        if abs(c1) < tantol or abs(c0) < tantol:
            tang += 1
            r = r1
            phi = phi1
            comp = comp1
            continue
        v0 = k0 + u_arr[i] * c0 / taumin
        a11, a12, a21, a22 = derivative_entries(tau, phi, phi1, k0, k1)
        den = a11 + a12 * v0
        if den == 0.0:
            tang += 1
            r = r1
            phi = phi1
            comp = comp1
            continue
        v1 = (a21 + a22 * v0) / den
        up = k1 + c1 / tau
        if k0 > 0.0:
            lo = k1 + c1 / (tau + c0 / (2.0 * k0))
        else:
            lo = k1
        slack = 1e-9 * (1.0 + abs(up))
        checked += 1
        if v1 < lo - slack or v1 > up + slack:
            viol += 1
        r = r1
        phi = phi1
        comp = comp1
    return viol, tang, checked, r, phi


@njit(cache=True, nogil=True)
def survey_cells(r_arr, phi_arr, nmax, gp, x_nodes, s_nodes):
    """Histogram of flight cell indices over sample points.

    Returns (hist_all, hist_window, censored): counts per index 0..nmax with
    an overflow bin at nmax+1; hist_window counts the subset lying inside
    the window arc of their own index.
    """
    hist_all = np.zeros(nmax + 2, dtype=np.int64)
    hist_win = np.zeros(nmax + 2, dtype=np.int64)
    censored = 0
    L = gp[GP_LB]
    for i in range(r_arr.shape[0]):
        st, _, _, _, cells, _, _ = scat_segment(
            r_arr[i], phi_arr[i], MODE_TORUS, gp, x_nodes, s_nodes)
        if st != ST_OK:
            censored += 1
            continue
        b = cells
        if b > nmax:
            b = nmax + 1
        hist_all[b] += 1
        if in_window_arc(r_arr[i], phi_arr[i], cells, gp):
            hist_win[b] += 1
    return hist_all, hist_win, censored


@njit(cache=True, nogil=True)
def survey_return(r_arr, phi_arr, base_mode, cap, nmax, gp, x_nodes, s_nodes):
    """Histogram of return times of the induced map over mu-samples.

    Samples not in the window-free section are skipped and counted.
    Censored (capped or failed) orbits land in the overflow bin.
    Returns (hist, not_in_base, censored).
    """
    hist = np.zeros(nmax + 2, dtype=np.int64)
    not_in_base = 0
    censored = 0
    for i in range(r_arr.shape[0]):
        r = r_arr[i]
        phi = phi_arr[i]
        st, ry, py, steps, ncells, _, _ = scat_segment(
            r, phi, base_mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            censored += 1
            continue
        if not in_return_base(r, phi, ncells, gp):
            not_in_base += 1
            continue
        total = steps
        ok = False
        while True:
            st, rz, pz, steps2, ncross2, _, _ = scat_segment(
                ry, py, base_mode, gp, x_nodes, s_nodes)
            if st != ST_OK:
                break
            if in_return_base(ry, py, ncross2, gp):
                ok = True
                break
            ry = rz
            py = pz
            total += steps2
            if total > cap:
                break
        if not ok:
            censored += 1
            hist[nmax + 1] += 1
            continue
        b = total
        if b > nmax:
            b = nmax + 1
        hist[b] += 1
    return hist, not_in_base, censored


@njit(cache=True, nogil=True)
def window_entry_scan(r_arr, phi_arr, cap, gp, x_nodes, s_nodes):
    """Classify window-arc seeds as first trapped entries and measure depth.

    For each seed y: the time-reversed flight identifies the predecessor
    x = inverse-image of y and the entry cell index m; valid entries are
    those whose predecessor lies in the window-free section.  The trap run
    from x yields the window-collision count k and the return time.

    Returns (code, m_b, k_tot, r_steps):
      code 0 = reverse flight failed, 1 = predecessor not in the
      window-free section (y is not a first entry), 2 = y returns at once
      (depth-0 cell), 3 = trapped entry, 4 = trap run censored.
    """
    n = r_arr.shape[0]
    code = np.zeros(n, dtype=np.int8)
    m_b = np.zeros(n, dtype=np.int64)
    k_tot = np.zeros(n, dtype=np.int64)
    r_steps = np.zeros(n, dtype=np.int64)
    for i in range(n):
        r = r_arr[i]
        phi = phi_arr[i]
        st, rx, px_rev, _, mb, _, _ = scat_segment(
            r, -phi, MODE_TORUS, gp, x_nodes, s_nodes)
        if st != ST_OK:
            code[i] = 0
            continue
        m_b[i] = mb
        if not in_return_base(rx, -px_rev, mb, gp):
            code[i] = 1
            continue
        st, k, nsteps, _, _ = trap_run(
            rx, -px_rev, mb, cap, gp, x_nodes, s_nodes)
        if st == ST_OK:
            k_tot[i] = k
            r_steps[i] = nsteps
            if nsteps == 1:
                code[i] = 2
            else:
                code[i] = 3
        else:
            k_tot[i] = k
            r_steps[i] = nsteps
            code[i] = 4
    return code, m_b, k_tot, r_steps


@njit(cache=True, nogil=True)
def induced_array(r_arr, phi_arr, base_mode, cap, gp, x_nodes, s_nodes):
    """Vectorized induced map with per-point flight data.

    Returns (status, r1, phi1, R, n_flight, n_return, in_base) where
    n_flight is the point's own flight cell index and n_return the index at
    the return point.
    """
    n = r_arr.shape[0]
    status = np.zeros(n, dtype=np.int8)
    r1 = np.zeros(n, dtype=np.float64)
    phi1 = np.zeros(n, dtype=np.float64)
    rr = np.zeros(n, dtype=np.int64)
    nfl = np.full(n, -1, dtype=np.int64)
    nret = np.full(n, -1, dtype=np.int64)
    inb = np.zeros(n, dtype=np.int8)
    for i in range(n):
        r = r_arr[i]
        phi = phi_arr[i]
        st, ry, py, steps, ncells, _, _ = scat_segment(
            r, phi, base_mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            status[i] = st
            continue
        nfl[i] = ncells
        if in_return_base(r, phi, ncells, gp):
            inb[i] = 1
        total = steps
        while True:
            st, rz, pz, steps2, ncross2, _, _ = scat_segment(
                ry, py, base_mode, gp, x_nodes, s_nodes)
            if st != ST_OK:
                status[i] = st
                break
            if in_return_base(ry, py, ncross2, gp):
                r1[i] = ry
                phi1[i] = py
                rr[i] = total
                nret[i] = ncross2
                break
            ry = rz
            py = pz
            total += steps2
            if total > cap:
                status[i] = ST_NONRETURN
                rr[i] = total
                break
    return status, r1, phi1, rr, nfl, nret, inb


@njit(cache=True, nogil=True)
def curve_point_data(r_arr, phi_arr, base_mode, cap, trap_cap,
                     gp, x_nodes, s_nodes):
    """Induced image plus continuity label for points along a curve.

    The label packs (flight index, window flag, trap depth, homogeneity of
    the point, homogeneity of the induced image, tangential flag); pieces
    of a curve with equal labels are treated as one continuity component.
    Returns (ok, label, r1, phi1).
    """
    n = r_arr.shape[0]
    ok = np.zeros(n, dtype=np.int8)
    lab = np.full(n, -1, dtype=np.int64)
    r1 = np.zeros(n, dtype=np.float64)
    phi1 = np.zeros(n, dtype=np.float64)
    k0 = int(gp[GP_K0])
    L = gp[GP_LB]
    for i in range(n):
        r = r_arr[i]
        phi = phi_arr[i]
        st, ry, py, steps, ncells, _, ntang = scat_segment(
            r, phi, base_mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            continue
        tang = 0
        if ntang > 0:
            tang = 1
        win = 0
        if in_window_arc(r, phi, ncells, gp):
            win = 1
        stt, ktrap, _, _, _ = trap_run(r, phi, ncells, trap_cap,
                                       gp, x_nodes, s_nodes)
        if stt != ST_OK:
            continue
        if ktrap > 255:
            ktrap = 255
        # induced image
        total = steps
        done = False
        while True:
            st, rz, pz, steps2, ncross2, _, nt2 = scat_segment(
                ry, py, base_mode, gp, x_nodes, s_nodes)
            if st != ST_OK:
                break
            if nt2 > 0:
                tang = 1
            if in_return_base(ry, py, ncross2, gp):
                done = True
                break
            ry = rz
            py = pz
            total += steps2
            if total > cap:
                break
        if not done:
            continue
        h0 = hom_index(phi, k0) + 10000
        h1 = hom_index(py, k0) + 10000
        v = ncells * 2 + win
        v = v * 20001 + h0
        v = v * 20001 + h1
        v = v * 256 + ktrap
        lab[i] = v * 2 + tang
        r1[i] = ry
        phi1[i] = py
        ok[i] = 1
    return ok, lab, r1, phi1


@njit(cache=True, nogil=True)
def neighborhood_probe(r_arr, phi_arr, dmax, iters, gp, x_nodes, s_nodes):
    """Proxy distance to the singularity set: nearest label change along

    the four axis directions in (r, phi), bisected to ``iters`` levels.
    Probes that keep the base label all the way to dmax are censored at
    2*dmax; points whose own label cannot be computed return NaN.
    """
    n = r_arr.shape[0]
    out = np.zeros(n, dtype=np.float64)
    half_pi = 0.5 * math.pi
    L = gp[GP_LB]
    for i in range(n):
        r = r_arr[i]
        phi = phi_arr[i]
        base = point_label(r, phi, gp, x_nodes, s_nodes)
        if base < 0:
            out[i] = np.nan
            continue
        best = 2.0 * dmax
        for d in range(4):
            if d == 0:
                er, ep = 1.0, 0.0
            elif d == 1:
                er, ep = -1.0, 0.0
            elif d == 2:
                er, ep = 0.0, 1.0
            else:
                er, ep = 0.0, -1.0
            hi = dmax
            # crossing the grazing boundary |phi| = pi/2 is a label change
            if ep != 0.0:
                room = half_pi - ep * phi
                if room < hi:
                    hi = room
            hit = False
            rb = r + er * hi
            pb = phi + ep * hi
            if abs(pb) >= half_pi:
                hit = True
            else:
                lab = point_label(rb % L, pb, gp, x_nodes, s_nodes)
                if lab != base:
                    hit = True
            if not hit:
                continue
            lo = 0.0
            for _ in range(iters):
                mid = 0.5 * (lo + hi)
                rm = r + er * mid
                pm = phi + ep * mid
                if abs(pm) >= half_pi:
                    hi = mid
                    continue
                lab = point_label(rm % L, pm, gp, x_nodes, s_nodes)
                if lab != base:
                    hi = mid
                else:
                    lo = mid
            if hi < best:
                best = hi
        out[i] = best
    return out


@njit(cache=True, nogil=True)
def observable_walk(r0, phi0, comp0, mode, nsteps, box,
                    out_f1, out_f2, out_f3, gp, x_nodes, s_nodes):
    """Fill observable time series along one orbit of the collision map.

    f1 = sin(2 pi r / scatterer perimeter) on the scatterer, 0 on walls;
    f2 = phi everywhere; f3 = smooth bump on a fixed scatterer box.
    Returns (status, ndone, r_end, phi_end, comp_end).
    """
    L = gp[GP_LB]
    two_pi = 2.0 * math.pi
    r = r0
    phi = phi0
    comp = comp0
    for j in range(nsteps):
        if comp == COMP_SCATTERER:
            out_f1[j] = math.sin(two_pi * r / L)
            out_f3[j] = bump_value(r, phi, box)
        else:
            out_f1[j] = 0.0
            out_f3[j] = 0.0
        out_f2[j] = phi
        st, r1, phi1, comp1, _, _, _ = map_step(
            r, phi, comp, mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            return st, j + 1, r, phi, comp
        r = r1
        phi = phi1
        comp = comp1
    return ST_OK, nsteps, r, phi, comp


@njit(cache=True, nogil=True)
def trap_orbit_collect(r, phi, m_entry, cap, gp, x_nodes, s_nodes):
    """Record the scatterer-map orbit from an entry's predecessor until

    return: states, flight times and cell counts for cocycle products.
    Returns (status, count, r_out, phi_out, tau_out, cells_out, win_out).
    """
    halfw = window_halfwidth(gp, m_entry)
    L = gp[GP_LB]
    r_out = np.zeros(cap + 2, dtype=np.float64)
    phi_out = np.zeros(cap + 2, dtype=np.float64)
    tau_out = np.zeros(cap + 2, dtype=np.float64)
    cells_out = np.zeros(cap + 2, dtype=np.int64)
    win_out = np.zeros(cap + 2, dtype=np.int8)
    cur_r = r
    cur_phi = phi
    count = 0
    status = ST_NONRETURN
    while count <= cap:
        st, r1, phi1, _, ncells, tau, _ = scat_segment(
            cur_r, cur_phi, MODE_TORUS, gp, x_nodes, s_nodes)
        if st != ST_OK:
            status = st
            break
        r_out[count] = cur_r
        phi_out[count] = cur_phi
        tau_out[count] = tau
        cells_out[count] = ncells
        if flat_distance(cur_r, L) <= halfw and window_grazing(
                cur_r, cur_phi, gp):
            win_out[count] = 1
        count += 1
        if count > 1 and in_return_base(cur_r, cur_phi, ncells, gp):
            status = ST_OK
            break
        cur_r = r1
        cur_phi = phi1
    return status, count, r_out, phi_out, tau_out, cells_out, win_out


@njit(cache=True, nogil=True, parallel=True)
def lag_cross_sums(u, v, nlags):
    """Raw lagged cross sums: out[lag] = sum_i u[i] * v[i + lag].

    Each lag is accumulated sequentially by one worker, so results do not
    depend on the thread count.
    """
    out = np.zeros(nlags + 1, dtype=np.float64)
    n = u.shape[0]
    for lag in prange(nlags + 1):
        s = 0.0
        for i in range(n - lag):
            s += u[i] * v[i + lag]
        out[lag] = s
    return out


@njit(cache=True, nogil=True)
def direct_trap_hist(r_arr, phi_arr, mmax, kmax, cap, gp, x_nodes, s_nodes):
    """Direct mu-sample histogram of (cell index, trap depth).

    Samples in the return base are split by whether the next scatterer-map
    image returns at once (immediate bin, depth-0 convention) or enters a
    grazing excursion of depth k.  Returns (hist2d, hist_immediate,
    not_in_base, censored); overflow rows/columns at index mmax+1/kmax+1.
    """
    hist = np.zeros((mmax + 2, kmax + 2), dtype=np.int64)
    hist0 = np.zeros(mmax + 2, dtype=np.int64)
    not_in_base = 0
    censored = 0
    for i in range(r_arr.shape[0]):
        r = r_arr[i]
        phi = phi_arr[i]
        st, _, _, _, n0, _, _ = scat_segment(
            r, phi, MODE_TORUS, gp, x_nodes, s_nodes)
        if st != ST_OK:
            censored += 1
            continue
        if not in_return_base(r, phi, n0, gp):
            not_in_base += 1
            continue
        st, k, nsteps, _, _ = trap_run(r, phi, n0, cap, gp, x_nodes, s_nodes)
        if st != ST_OK:
            censored += 1
            continue
        m = n0
        if m > mmax:
            m = mmax + 1
        if nsteps == 1:
            hist0[m] += 1
        else:
            kk = k
            if kk > kmax:
                kk = kmax + 1
            hist[m, kk] += 1
    return hist, hist0, not_in_base, censored


@njit(cache=True, nogil=True)
def cell_grid(r_arr, phi_arr, gp, x_nodes, s_nodes):
    """Flight cell index and window flag on a list of phase points.

    Returns (n_arr, win_arr) with n = -1 where the flight fails.
    """
    n = r_arr.shape[0]
    n_arr = np.full(n, -1, dtype=np.int64)
    win_arr = np.zeros(n, dtype=np.int8)
    for i in range(n):
        st, _, _, _, cells, _, _ = scat_segment(
            r_arr[i], phi_arr[i], MODE_TORUS, gp, x_nodes, s_nodes)
        if st != ST_OK:
            continue
        n_arr[i] = cells
        if in_window_arc(r_arr[i], phi_arr[i], cells, gp):
            win_arr[i] = 1
    return n_arr, win_arr


@njit(cache=True, nogil=True)
def conditional_scan(r_arr, phi_arr, base_mode, cap, nmax, a1, a2,
                     follow_coef, follow_thr_exp, follow_min,
                     gp, x_nodes, s_nodes):
    """Conditional return statistics over mu-samples in the return base.

    For each sample x with flight cell index n0 and return time R1, the
    image y under the first-return map is followed one more return (R2).
    Accumulates, per integer bin:
      * cell_cnt[n0], cell_sum[n0]: count of x in cell n0 and the summed
        image return time R2 (conditional expectation numerator);
      * rt_cnt[R1] and da_cnt[j, R1]: counts of return time R1 and of the
        events R2 >= R1^(1-a) for a in (0, a1, a2);
      * bar_tot[R1], bar_ok[R1] (only for R1 >= follow_min): whether the
        next ceil(follow_coef*ln R1) return-map images all sit in cells of
        index below R1^follow_thr_exp.
    Returns (cell_cnt, cell_sum, cell_sumsq, rt_cnt, da_cnt, bar_tot,
    bar_ok, skipped, censored).
    """
    nb = nmax + 1
    cell_cnt = np.zeros(nb, dtype=np.int64)
    cell_sum = np.zeros(nb, dtype=np.int64)
    cell_sumsq = np.zeros(nb, dtype=np.float64)
    rt_cnt = np.zeros(nb, dtype=np.int64)
    da_cnt = np.zeros((3, nb), dtype=np.int64)
    bar_tot = np.zeros(nb, dtype=np.int64)
    bar_ok = np.zeros(nb, dtype=np.int64)
    skipped = 0
    censored = 0
    for i in range(r_arr.shape[0]):
        r = r_arr[i]
        phi = phi_arr[i]
        st, ry, py, steps, n0, _, _ = scat_segment(
            r, phi, base_mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            censored += 1
            continue
        if not in_return_base(r, phi, n0, gp):
            skipped += 1
            continue
        # finish the first return: R1, landing y
        total = steps
        ok = False
        nfly_y = -1
        while True:
            st, rz, pz, steps2, ncross2, _, _ = scat_segment(
                ry, py, base_mode, gp, x_nodes, s_nodes)
            if st != ST_OK or total > cap:
                break
            if in_return_base(ry, py, ncross2, gp):
                ok = True
                nfly_y = ncross2
                break
            ry = rz
            py = pz
            total += steps2
        if not ok:
            censored += 1
            continue
        R1 = total
        # second return from y: R2 (flight index of y already known)
        st, ry2, py2, steps, _, _, _ = scat_segment(
            ry, py, base_mode, gp, x_nodes, s_nodes)
        if st != ST_OK:
            censored += 1
            continue
        total2 = steps
        ok = False
        nfly_2 = -1
        while True:
            st, rz, pz, steps2, ncross2, _, _ = scat_segment(
                ry2, py2, base_mode, gp, x_nodes, s_nodes)
            if st != ST_OK or total2 > cap:
                break
            if in_return_base(ry2, py2, ncross2, gp):
                ok = True
                nfly_2 = ncross2
                break
            ry2 = rz
            py2 = pz
            total2 += steps2
        if not ok:
            censored += 1
            continue
        R2 = total2
        if n0 <= nmax:
            cell_cnt[n0] += 1
            cell_sum[n0] += R2
            cell_sumsq[n0] += float(R2) * float(R2)
        if R1 <= nmax:
            rt_cnt[R1] += 1
            rf = float(R1)
            if float(R2) >= rf:
                da_cnt[0, R1] += 1
            if float(R2) >= rf ** (1.0 - a1):
                da_cnt[1, R1] += 1
            if float(R2) >= rf ** (1.0 - a2):
                da_cnt[2, R1] += 1
            if R1 >= follow_min:
                nf = int(math.ceil(follow_coef * math.log(rf)))
                thr = rf ** follow_thr_exp
                good = 1
                if float(nfly_y) >= thr:
                    good = 0
                cr = ry2
                cp = py2
                cn = nfly_2
                l = 2
                while good == 1 and l <= nf:
                    if float(cn) >= thr:
                        good = 0
                        break
                    # advance one return-map step
                    st, cy, cpy, steps, _, _, _ = scat_segment(
                        cr, cp, base_mode, gp, x_nodes, s_nodes)
                    if st != ST_OK:
                        good = -1
                        break
                    t3 = steps
                    okk = False
                    while True:
                        st, cz, cpz, steps2, nc2, _, _ = scat_segment(
                            cy, cpy, base_mode, gp, x_nodes, s_nodes)
                        if st != ST_OK or t3 > cap:
                            break
                        if in_return_base(cy, cpy, nc2, gp):
                            okk = True
                            break
                        cy = cz
                        cpy = cpz
                        t3 += steps2
                    if not okk:
                        good = -1
                        break
                    cr = cy
                    cp = cpy
                    cn = nc2
                    l += 1
                if good >= 0:
                    bar_tot[R1] += 1
                    bar_ok[R1] += good
    return (cell_cnt, cell_sum, cell_sumsq, rt_cnt, da_cnt, bar_tot, bar_ok,
            skipped, censored)
