"""Seeded Monte Carlo estimators for the engine's quantitative claims.

Covers invariant-measure sampling, cell-measure scaling, return-time tails
of the rectangle and periodic-lattice return maps, trapped-excursion
measures with resonance-targeted importance sampling, conditional return
expectations, time-series correlation functions, one-step expansion sums
along unstable curves, and the measure of singularity neighborhoods.

Every estimator is deterministic given (config, seed): work is split into
fixed-size chunks whose RNG streams are spawned from one seed sequence, the
chunks may run on a thread pool, and the partial results are reduced
sequentially in chunk order.  All accumulators are integers or plain sums,
so merging two half-runs reproduces one full run exactly.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from . import _kernels as _k
from .billiard_map import PhasePoint, scatterer_map, time_reverse
from .cells import largest_cell_box
from .errors import CurveDegenerate, InsufficientCounts
from .geometry import Table

__all__ = [
    "TailEstimate",
    "CorrelationSeries",
    "TrapTable",
    "ConditionalReturnReport",
    "OneStepReport",
    "sample_mu",
    "sample_mu_batch",
    "scatterer_measure_fraction",
    "fit_loglog",
    "wilson_interval",
    "cell_measure_profile",
    "return_tail",
    "immediate_return_comparison",
    "trap_measure",
    "conditional_return",
    "correlation",
    "correlation_suite",
    "one_step_expansion",
    "singularity_neighborhood",
    "validate_distance_proxy",
    "lyapunov_interval",
    "write_csv",
    "write_summary",
]

OBSERVABLE_IDS = ("f1", "f2", "f3")

_CHUNK = 250_000  # fixed chunk size keeps results independent of threads


# ---------------------------------------------------------------------------
# result types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailEstimate:
    """Survival curve with a declared-window log-log fit."""

    thresholds: np.ndarray
    survival: np.ndarray
    fitted_exponent: float
    ci_halfwidth: float
    sample_count: int
    fit_window: tuple[float, float]
    censored: int = 0
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CorrelationSeries:
    """Lagged covariance estimates from one long orbit, batch-means errors."""

    lags: np.ndarray
    c_n: np.ndarray
    stderr: np.ndarray
    observables: tuple[str, str]
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrapTable:
    """Importance-sampled measures of the trapped-excursion classes."""

    m_values: np.ndarray
    k_values: np.ndarray
    mu: np.ndarray
    ci: np.ndarray
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ConditionalReturnReport:
    """Per-cell conditional expectations of the image return time."""

    n_values: np.ndarray
    conditional_mean: np.ndarray
    counts: np.ndarray
    slope: float
    ci_halfwidth: float
    fit_window: tuple[int, int]
    details: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OneStepReport:
    """Per-trial expansion sums over singularity-split unstable curves."""

    sums: np.ndarray
    piece_counts: np.ndarray
    crossing: np.ndarray
    curve_len: float
    details: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# sampling and shared helpers
# ---------------------------------------------------------------------------

def sample_mu(table: Table, rng: np.random.Generator,
              boundary: str = "scatterer") -> PhasePoint:
    """One draw from the invariant collision measure (cos-density in angle).

    ``boundary`` picks the section: "scatterer" restricts to the scatterer
    (arclength uniform there), "full" draws from the whole billiard
    boundary including the rectangle walls.
    """
    phi = math.asin(2.0 * rng.uniform() - 1.0)
    if boundary == "scatterer":
        return PhasePoint(_k.COMP_SCATTERER, rng.uniform(0.0, table.perimeter),
                          phi)
    if boundary != "full":
        raise ValueError(f"unknown boundary {boundary!r}")
    w = table.width
    h = table.height
    lengths = (table.perimeter, w, h, w, h)
    comps = (_k.COMP_SCATTERER, _k.COMP_WALL_N, _k.COMP_WALL_E,
             _k.COMP_WALL_S, _k.COMP_WALL_W)
    u = rng.uniform(0.0, sum(lengths))
    for comp, ln in zip(comps, lengths):
        if u < ln or comp == comps[-1]:
            return PhasePoint(comp, min(u, ln), phi)
        u -= ln
    raise AssertionError("unreachable")


def sample_mu_batch(table: Table, rng: np.random.Generator, n: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized scatterer-section draws: (arclength, angle) arrays."""
    r = rng.uniform(0.0, table.perimeter, n)
    phi = np.arcsin(2.0 * rng.uniform(size=n) - 1.0)
    return r, phi


def scatterer_measure_fraction(table: Table) -> float:
    """Invariant-measure fraction carried by the scatterer section."""
    return table.perimeter / (table.perimeter +
                              2.0 * (table.width + table.height))


def wilson_interval(k, n, z: float = 1.96):
    """Wilson score interval for binomial counts (vectorized)."""
    k = np.asarray(k, dtype=np.float64)
    n = np.maximum(np.asarray(n, dtype=np.float64), 1.0)
    p = k / n
    z2 = z * z
    den = 1.0 + z2 / n
    mid = (p + z2 / (2.0 * n)) / den
    half = z * np.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / den
    return mid - half, mid + half


def fit_loglog(x, y, weights=None):
    """Weighted least-squares line through (log x, log y).

    Returns (slope, intercept, ci_halfwidth) with the 95% halfwidth taken
    from the residual-scaled covariance of the slope.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = (x > 0) & (y > 0)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        keep &= w > 0
    if keep.sum() < 3:
        raise InsufficientCounts(
            f"log-log fit needs >= 3 usable points, got {int(keep.sum())}")
    lx = np.log(x[keep])
    ly = np.log(y[keep])
    w = (np.ones_like(lx) if weights is None
         else np.asarray(weights, dtype=np.float64)[keep])
    sw = w.sum()
    mx = (w * lx).sum() / sw
    my = (w * ly).sum() / sw
    sxx = (w * (lx - mx) ** 2).sum()
    sxy = (w * (lx - mx) * (ly - my)).sum()
    slope = sxy / sxx
    intercept = my - slope * mx
    resid = ly - slope * lx - intercept
    dof = max(len(lx) - 2, 1)
    s2 = (w * resid ** 2).sum() / dof
    ci = 1.96 * math.sqrt(s2 / sxx)
    return slope, intercept, ci


def _resolve(table: Table, seed, threads):
    if seed is None:
        seed = table.config.seed
    if threads is None:
        threads = table.config.threads
    return int(seed), max(int(threads), 1)


def _run_chunks(worker, total: int, seed: int, threads: int,
                chunk: int = _CHUNK):
    """Spawn per-chunk RNG streams, run on a pool, reduce in chunk order."""
    sizes = []
    left = int(total)
    while left > 0:
        sizes.append(min(chunk, left))
        left -= chunk
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    if threads <= 1 or len(sizes) <= 1:
        return [worker(np.random.default_rng(s), n)
                for s, n in zip(seeds, sizes)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(worker, np.random.default_rng(s), n)
                for s, n in zip(seeds, sizes)]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# cell measures
# ---------------------------------------------------------------------------

def cell_measure_profile(table: Table, n_max: int = 64,
                         samples: int = 10_000_000, seed: int | None = None,
                         threads: int | None = None, n_lo: int = 8,
                         min_count: int = 25) -> TailEstimate:
    """Empirical measure of the flight-index cells with a scaling fit.

    Histograms the cell index of mu-random scatterer points, fits the
    log-log slope of the per-index measure over [n_lo, n_max] (expected -3),
    and also fits the survival sum (expected -2, reported in details along
    with Wilson intervals and the in-window fraction per index).
    """
    seed, threads = _resolve(table, seed, threads)

    def worker(rng, n):
        r, phi = sample_mu_batch(table, rng, n)
        return _k.survey_cells(r, phi, n_max, table.gp,
                               table.x_nodes, table.s_nodes)

    hist = np.zeros(n_max + 2, dtype=np.int64)
    hist_win = np.zeros(n_max + 2, dtype=np.int64)
    censored = 0
    for h, hw, c in _run_chunks(worker, samples, seed, threads):
        hist += h
        hist_win += hw
        censored += int(c)
    n_vals = np.arange(n_max + 1)
    density = hist[: n_max + 1] / samples
    surv = np.cumsum(hist[::-1])[::-1] / samples  # includes overflow bin
    fit_n = np.arange(n_lo, n_max + 1)
    fit_counts = hist[n_lo: n_max + 1]
    low = fit_n[fit_counts < min_count]
    if low.size:
        raise InsufficientCounts(
            f"cell bins {low.tolist()} hold < {min_count} samples; "
            f"raise `samples` or lower `n_max`")
    slope, _, ci = fit_loglog(fit_n, density[n_lo:], weights=fit_counts)
    s_slope, _, s_ci = fit_loglog(fit_n, surv[n_lo: n_max + 1],
                                  weights=fit_counts)
    wlo, whi = wilson_interval(hist[: n_max + 1], samples)
    return TailEstimate(
        thresholds=n_vals,
        survival=surv[: n_max + 1],
        fitted_exponent=float(slope),
        ci_halfwidth=float(ci),
        sample_count=int(samples),
        fit_window=(n_lo, n_max),
        censored=censored,
        details={
            "density": density,
            "counts": hist[: n_max + 1].copy(),
            "overflow": int(hist[n_max + 1]),
            "wilson_low": wlo,
            "wilson_high": whi,
            "survival_slope": float(s_slope),
            "survival_ci": float(s_ci),
            "window_counts": hist_win[: n_max + 1].copy(),
        },
    )


# ---------------------------------------------------------------------------
# window-entry importance seeding
# ---------------------------------------------------------------------------
#
# Deep trapped excursions live in thin slivers of the (arc offset, grazing
# angle) strip: the entry angle must sit close to a resonant angle chi_m at
# which one channel crossing advances exactly m cells, otherwise the next
# collision leaves the window arcs after a single step.  A plain angular
# stratification therefore almost never hits deep events.  The sampler below
# draws seeds from a mixture of one broad strip component and one narrow
# rectangle around each resonance in a cell-index grid, carrying exact
# per-seed weights (invariant-measure density over mixture density), which
# keeps every estimate unbiased while concentrating effort on the slivers.

_RES_CACHE: dict = {}


def _resonance_angle(table: Table, m: int) -> float:
    """Grazing angle whose channel flight from a flat apex advances exactly
    m cells and lands back on a flat point (drift-free resonant angle)."""
    key = (round(table.beta, 12), round(table.perimeter, 12),
           round(table.channel_height, 12), round(table.width, 12), int(m))
    hit = _RES_CACHE.get(key)
    if hit is not None:
        return hit
    gp, xn, sn = table.gp, table.x_nodes, table.s_nodes
    L = table.perimeter
    quarter = 0.25 * L

    def probe(psi: float):
        st, r1, _, _, cells, _, _ = _k.scat_segment(
            0.0, 0.5 * math.pi - psi, _k.MODE_TORUS, gp, xn, sn)
        if st != _k.ST_OK:
            return -1, 0.0
        off = r1 % quarter
        if off > 0.5 * quarter:
            off -= quarter
        return cells, off

    def angle_where_cells_drop_below(target: int) -> float:
        lo, hi = 1e-8, 1.3  # cells(lo) huge, cells(hi) small
        for _ in range(64):
            mid = math.sqrt(lo * hi)
            cells, _ = probe(mid)
            if cells >= target:
                lo = mid
            else:
                hi = mid
        return math.sqrt(lo * hi)

    a = angle_where_cells_drop_below(m + 1)  # low edge of the cells==m range
    b = angle_where_cells_drop_below(m)      # high edge of the cells==m range
    pa, pb = a * (1.0 + 1e-9), b * (1.0 - 1e-9)
    _, oa = probe(pa)
    _, ob = probe(pb)
    chi = 0.5 * (pa + pb)
    if oa * ob < 0.0:
        for _ in range(60):
            mid = 0.5 * (pa + pb)
            _, om = probe(mid)
            if om * oa <= 0.0:
                pb, ob = mid, om
            else:
                pa, oa = mid, om
        chi = 0.5 * (pa + pb)
    _RES_CACHE[key] = chi
    return chi


def _mixture_components(table: Table, res_m_max: int, psi_min: float):
    """Component list for the window-entry proposal mixture.

    Each component is (kind, p_lo, p_hi, b_off) sampling the grazing angle
    uniformly on [p_lo, p_hi] (resonance rectangles) or proportional to
    sin(psi) (strip), and the offset uniformly on [-b_off, b_off] around a
    random flat point with a random angle sign.
    """
    gp = table.gp
    eps0 = float(gp[_k.GP_EPS0])
    beta = table.beta
    psi_max = float(max(gp[_k.GP_PSI0H], gp[_k.GP_PSI0V]))
    comps = [("strip", psi_min, psi_max, eps0)]
    if res_m_max >= 2:
        grid = sorted(set(list(range(2, 17))
                          + [int(round(g)) for g in
                             np.geomspace(16, res_m_max, 10)]))
        for m in grid:
            if m > res_m_max:
                continue
            chi = _resonance_angle(table, m)
            if not (0.0 < chi < psi_max):
                continue
            half = 0.45 * chi / m  # half-spacing to neighbor resonances
            b_off = min(1.05 * eps0 * m ** (-1.0 / (beta - 1.0)), eps0)
            comps.append((m, max(chi - half, psi_min * 0.5),
                          min(chi + half, psi_max), b_off))
    return comps


def _window_entry_sample(table: Table, total: int, trap_cap: int,
                         seed: int, threads: int,
                         res_m_max: int = 96, strip_share: float = 0.35,
                         psi_min: float = 1e-6):
    """Classify mixture-sampled window-strip seeds as first trapped entries.

    Returns a dict of pooled arrays: classification code, entry cell index,
    trapped-collision depth, return steps, and the per-seed measure weight
    w = (invariant density)/(mixture density)/total, so that any event mass
    is estimated by sum(w * indicator).
    """
    comps = _mixture_components(table, res_m_max, psi_min)
    L = table.perimeter
    eps0 = float(table.gp[_k.GP_EPS0])
    n_res = len(comps) - 1
    counts = np.zeros(len(comps), dtype=np.int64)
    counts[0] = max(int(total * strip_share), 1)
    if n_res:
        res_total = total - counts[0]
        share = np.array([1.0 / c[0] for c in comps[1:]])
        share /= share.sum()
        counts[1:] = np.maximum((share * res_total).astype(np.int64), 1)
    n_all = int(counts.sum())
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    flats = rng.integers(0, 4, n_all)
    signs = 2.0 * rng.integers(0, 2, n_all) - 1.0
    u_off = rng.uniform(-1.0, 1.0, n_all)
    u_psi = rng.uniform(0.0, 1.0, n_all)
    comp_of = np.repeat(np.arange(len(comps)), counts)

    off = np.empty(n_all)
    psi = np.empty(n_all)
    dens_per = np.zeros((len(comps), n_all))  # proposal density per comp
    for ci, (kind, p_lo, p_hi, b_off) in enumerate(comps):
        sel = comp_of == ci
        off[sel] = u_off[sel] * b_off
        if kind == "strip":
            c_lo, c_hi = math.cos(p_lo), math.cos(p_hi)
            psi[sel] = np.arccos(c_lo - u_psi[sel] * (c_lo - c_hi))
        else:
            psi[sel] = p_lo + u_psi[sel] * (p_hi - p_lo)
    for ci, (kind, p_lo, p_hi, b_off) in enumerate(comps):
        inside = (np.abs(off) <= b_off) & (psi >= p_lo) & (psi <= p_hi)
        if kind == "strip":
            c_lo, c_hi = math.cos(p_lo), math.cos(p_hi)
            dens = np.sin(psi) / (c_lo - c_hi)
        else:
            dens = np.full(n_all, 1.0 / (p_hi - p_lo))
        dens_per[ci] = np.where(
            inside, dens / (2.0 * b_off) / 8.0, 0.0)
    q_mix = (counts[:, None] * dens_per).sum(axis=0) / n_all
    mu_dens = np.sin(psi) / (2.0 * L)
    w = mu_dens / q_mix / n_all

    r_arr = (flats * (0.25 * L) + off) % L
    phi_arr = signs * (0.5 * math.pi - psi)

    slices = np.array_split(np.arange(n_all), max(threads * 4, 1))

    def run_slice(ix):
        return _k.window_entry_scan(r_arr[ix], phi_arr[ix], trap_cap,
                                    table.gp, table.x_nodes, table.s_nodes)

    if threads <= 1:
        parts = [run_slice(ix) for ix in slices if ix.size]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_slice,
                                  [ix for ix in slices if ix.size]))
    code = np.concatenate([p[0] for p in parts])
    mb = np.concatenate([p[1] for p in parts])
    kk = np.concatenate([p[2] for p in parts])
    rsteps = np.concatenate([p[3] for p in parts])
    return {
        "code": code, "m": mb, "k": kk, "rsteps": rsteps, "w": w,
        "count": n_all, "components": len(comps),
        "strip_count": int(counts[0]),
        "res_grid": [c[0] for c in comps[1:]],
        "r": r_arr, "phi": phi_arr,
    }


# ---------------------------------------------------------------------------
# return-time tails
# ---------------------------------------------------------------------------

def return_tail(table: Table, which: str = "R", samples: int = 2_000_000,
                n_max: int = 128, seed: int | None = None,
                threads: int | None = None, cap: int = 100_000,
                n_lo: int = 8, importance: bool = False,
                importance_samples: int = 300_000,
                res_m_max: int = 96,
                psi_min: float = 1e-6) -> TailEstimate:
    """Survival function of the return time to the window-free section.

    which="R": the rectangle collision map (wall bounces count as steps);
    which="Rtilde": the periodic-lattice scatterer map (a whole flight is
    one step).  With ``importance=True`` (Rtilde only) the deep tail is
    measured by resonance-targeted window seeding: each seed's time-reversed
    flight identifies the trapped entry it came from, and per-seed mixture
    weights convert trap-run survival into measure directly.
    """
    seed, threads = _resolve(table, seed, threads)
    if which not in ("R", "Rtilde"):
        raise ValueError(f"unknown return-time flavor {which!r}")
    base_mode = _k.MODE_RECTANGLE if which == "R" else _k.MODE_TORUS

    def worker(rng, n):
        r, phi = sample_mu_batch(table, rng, n)
        return _k.survey_return(r, phi, base_mode, cap, n_max, table.gp,
                                table.x_nodes, table.s_nodes)

    hist = np.zeros(n_max + 2, dtype=np.int64)
    not_in_base = 0
    censored = 0
    for h, nb, c in _run_chunks(worker, samples, seed, threads):
        hist += h
        not_in_base += int(nb)
        censored += int(c)
    n_vals = np.arange(n_max + 1)
    surv_direct = np.cumsum(hist[::-1])[::-1][: n_max + 1] / samples
    counts_direct = np.cumsum(hist[::-1])[::-1][: n_max + 1]
    details: dict = {
        "not_in_base": int(not_in_base),
        "direct_survival": surv_direct,
        "direct_tail_counts": counts_direct,
        "histogram": hist.copy(),
    }

    if importance:
        if which != "Rtilde":
            raise ValueError("importance seeding applies to Rtilde only")
        pool = _window_entry_sample(table, importance_samples,
                                    trap_cap=4 * n_max, seed=seed + 1,
                                    threads=threads, res_m_max=res_m_max,
                                    psi_min=psi_min)
        trapped = pool["code"] >= 3  # depth >= 1 entries incl. censored
        steps = pool["rsteps"][trapped]
        wts = pool["w"][trapped]
        surv_imp = np.zeros(n_max + 1)
        var_imp = np.zeros(n_max + 1)
        for n in range(n_max + 1):
            f = steps >= n
            mass = float(wts[f].sum())
            surv_imp[n] = mass
            var_imp[n] = float((wts[f] ** 2).sum()) - mass * mass / pool["count"]
        # below depth 2 the trap picture does not apply; splice direct data
        survival = surv_direct.copy()
        splice = 3
        survival[splice:] = surv_imp[splice:]
        sig = np.sqrt(np.maximum(var_imp, 0.0))
        fit_n = n_vals[n_lo:]
        fit_s = surv_imp[n_lo:]
        fit_w = np.zeros_like(fit_s)
        good = (fit_s > 0) & (sig[n_lo:] > 0)
        fit_w[good] = (fit_s[good] / sig[n_lo:][good]) ** 2
        if good.sum() < 3:
            raise InsufficientCounts(
                "importance tail empty over the fit window; "
                "increase importance_samples or lower n_max")
        slope, _, ci = fit_loglog(fit_n[good], fit_s[good], fit_w[good])
        overlap = {}
        for n in range(3, 13):
            if counts_direct[n] >= 25 and surv_imp[n] > 0:
                overlap[n] = (float(surv_direct[n]), float(surv_imp[n]))
        details.update({
            "importance_survival": surv_imp,
            "importance_sigma": sig,
            "overlap": overlap,
            "importance_samples": int(pool["count"]),
            "resonance_grid": pool["res_grid"],
            "censored_traps": int((pool["code"] == 4).sum()),
        })
        return TailEstimate(
            thresholds=n_vals, survival=survival,
            fitted_exponent=float(slope), ci_halfwidth=float(ci),
            sample_count=int(samples + pool["count"]),
            fit_window=(n_lo, n_max), censored=censored, details=details)

    fit_counts = counts_direct[n_lo:]
    low_from = np.argmax(fit_counts < 25) if (fit_counts < 25).any() else None
    n_hi = (n_max if low_from is None
            else max(n_lo + 3, n_lo + int(low_from) - 1))
    fit_n = np.arange(n_lo, n_hi + 1)
    sel = slice(n_lo, n_hi + 1)
    if counts_direct[sel][-1] < 25:
        raise InsufficientCounts(
            f"return tail has < 25 samples beyond n = {n_hi}; "
            f"raise `samples`")
    slope, _, ci = fit_loglog(fit_n, surv_direct[sel],
                              weights=counts_direct[sel])
    return TailEstimate(
        thresholds=n_vals, survival=surv_direct, fitted_exponent=float(slope),
        ci_halfwidth=float(ci), sample_count=int(samples),
        fit_window=(n_lo, int(n_hi)), censored=censored, details=details)


def immediate_return_comparison(table: Table, samples: int = 4_000_000,
                                n_lo: int = 8, n_hi: int = 40,
                                seed: int | None = None,
                                threads: int | None = None) -> dict:
    """Fitted-level comparison of the immediate-return cells against the
    rectangle return-time distribution.

    The depth-0 class at cell index n returns after n + O(1) collisions,
    so its measure should carry the n^-3 distribution of {return time = n};
    reports both fitted lines and their level ratio at the window center.
    """
    seed, threads = _resolve(table, seed, threads)

    def worker_hist(rng, n):
        r, phi = sample_mu_batch(table, rng, n)
        return _k.direct_trap_hist(r, phi, n_hi + 8, 4, 10_000, table.gp,
                                   table.x_nodes, table.s_nodes)

    h0 = np.zeros(n_hi + 10, dtype=np.int64)
    for h2, h0c, _, _ in _run_chunks(worker_hist, samples, seed, threads):
        h0 += h0c

    def worker_ret(rng, n):
        r, phi = sample_mu_batch(table, rng, n)
        return _k.survey_return(r, phi, _k.MODE_RECTANGLE, 100_000,
                                n_hi + 8, table.gp,
                                table.x_nodes, table.s_nodes)

    hist = np.zeros(n_hi + 10, dtype=np.int64)
    for h, _, _ in _run_chunks(worker_ret, samples, seed + 1, threads):
        hist += h
    n_vals = np.arange(n_lo, n_hi + 1)
    mu_c0 = h0[n_lo: n_hi + 1] / samples
    mu_rn = hist[n_lo: n_hi + 1] / samples
    if min(h0[n_lo: n_hi + 1].min(), hist[n_lo: n_hi + 1].min()) < 10:
        raise InsufficientCounts("comparison bins too thin; raise samples")
    s0, b0, ci0 = fit_loglog(n_vals, mu_c0, weights=h0[n_lo: n_hi + 1])
    s1, b1, ci1 = fit_loglog(n_vals, mu_rn, weights=hist[n_lo: n_hi + 1])
    mid = math.sqrt(n_lo * n_hi)
    level_ratio = math.exp((s0 - s1) * math.log(mid) + (b0 - b1))
    return {
        "n": n_vals,
        "mu_immediate": mu_c0,
        "mu_return_eq": mu_rn,
        "slope_immediate": float(s0),
        "slope_return": float(s1),
        "ci_immediate": float(ci0),
        "ci_return": float(ci1),
        "level_ratio_mid": float(level_ratio),
    }


# ---------------------------------------------------------------------------
# trapped-excursion measures
# ---------------------------------------------------------------------------

def trap_measure(table: Table, m_max: int = 30, k_max: int = 16,
                 importance_samples: int = 400_000,
                 res_m_max: int | None = None,
                 psi_min: float = 1e-6, trap_cap: int = 2000,
                 seed: int | None = None, threads: int | None = None,
                 validate_m_max: int = 20,
                 direct_samples: int = 2_000_000) -> TrapTable:
    """Two-way table of trapped-excursion measures by (cell index, depth).

    Importance part: every depth>=1 excursion starts at a first window
    entry, so resonance-targeted window seeding with per-seed mixture
    weights reaches events direct sampling cannot.  The immediate (depth-0)
    class is estimated by direct sampling only, since those images spread
    over the whole section, and the direct histogram also validates the
    importance weights where both resolve.
    """
    seed, threads = _resolve(table, seed, threads)
    if res_m_max is None:
        res_m_max = max(2 * m_max, 16)
    pool = _window_entry_sample(table, importance_samples, trap_cap, seed,
                                threads, res_m_max=res_m_max,
                                psi_min=psi_min)
    m_vals = np.arange(1, m_max + 1)
    k_vals = np.arange(1, k_max + 1)
    mu = np.zeros((m_max + 1, k_max + 1))
    var = np.zeros((m_max + 1, k_max + 1))
    sel = pool["code"] == 3
    censored_traps = int((pool["code"] == 4).sum())
    mm = pool["m"][sel]
    kk = pool["k"][sel]
    ww = pool["w"][sel]
    k0_artifacts = float(ww[(kk == 0) & (mm >= 1)].sum())
    inside = (mm >= 1) & (mm <= m_max) & (kk >= 1) & (kk <= k_max)
    np.add.at(mu, (mm[inside], kk[inside]), ww[inside])
    np.add.at(var, (mm[inside], kk[inside]), ww[inside] ** 2)
    var = np.maximum(var - mu * mu / pool["count"], 0.0)
    ci = 1.96 * np.sqrt(var)

    details: dict = {
        "k0_artifact_mass": float(k0_artifacts),
        "censored_traps": int(censored_traps),
        "trap_cap": trap_cap,
    }

    # fits: depth slope at the best-resolved moderate cell index, cell-index
    # slope at fixed small depth, and the total depth>=1 mass per index
    def fit_slice(xv, yv, wv, what):
        good = (yv > 0) & (wv > 0)
        if good.sum() < 3:
            raise InsufficientCounts(f"too few resolved bins for {what}")
        return fit_loglog(xv[good], yv[good], wv[good])

    weights = np.zeros_like(mu)
    nz = ci > 0
    weights[nz] = (mu[nz] / ci[nz]) ** 2
    # depth fit at a moderate index: smallest m >= 3 with wide depth
    # coverage, else the row with the most resolved depth bins
    target = min(8, k_max - 1)
    npos = np.array([((mu[m, 2:] > 0) & (weights[m, 2:] > 0)).sum()
                     for m in range(m_max + 1)])
    m_fix = 0
    for m in range(3, m_max + 1):
        if npos[m] >= target:
            m_fix = m
            break
    if m_fix == 0:
        m_fix = 3 + int(np.argmax(npos[3:])) if m_max >= 3 else 3
    sk, _, sk_ci = fit_slice(k_vals[1:], mu[m_fix, 2:], weights[m_fix, 2:],
                             f"depth slope at cell {m_fix}")
    k_fix = 2
    sm, _, sm_ci = fit_slice(m_vals[2:], mu[3:, k_fix], weights[3:, k_fix],
                             f"cell slope at depth {k_fix}")
    tot = mu[:, 1:].sum(axis=1)
    tot_var = var[:, 1:].sum(axis=1)
    tot_w = np.zeros_like(tot)
    pos = tot_var > 0
    tot_w[pos] = tot[pos] ** 2 / tot_var[pos]
    st, _, st_ci = fit_slice(m_vals[2:], tot[3:], tot_w[3:],
                             "total trapped mass per cell")
    details.update({
        "k_slope": float(sk), "k_slope_ci": float(sk_ci), "m_fix": m_fix,
        "m_slope": float(sm), "m_slope_ci": float(sm_ci), "k_fix": k_fix,
        "sum_k_slope": float(st), "sum_k_slope_ci": float(st_ci),
        "sum_k_mass": tot,
    })

    if validate_m_max > 0 and direct_samples > 0:
        def worker(rng, n):
            r, phi = sample_mu_batch(table, rng, n)
            return _k.direct_trap_hist(r, phi, validate_m_max, k_max,
                                       trap_cap, table.gp,
                                       table.x_nodes, table.s_nodes)

        hist2 = np.zeros((validate_m_max + 2, k_max + 2), dtype=np.int64)
        hist0 = np.zeros(validate_m_max + 2, dtype=np.int64)
        for h2, h0, _, _ in _run_chunks(worker, direct_samples, seed + 7,
                                        threads):
            hist2 += h2
            hist0 += h0
        ratios = []
        for m in range(1, validate_m_max + 1):
            for k in range(1, k_max + 1):
                if hist2[m, k] >= 25 and mu[m, k] > 0:
                    direct = hist2[m, k] / direct_samples
                    ratios.append((m, k, direct, float(mu[m, k])))
        details["validation"] = ratios
        details["immediate_mu"] = hist0[: validate_m_max + 1] / direct_samples
        details["direct_samples"] = direct_samples
    return TrapTable(m_values=m_vals, k_values=k_vals,
                     mu=mu[1:, 1:], ci=ci[1:, 1:], details=details)


# ---------------------------------------------------------------------------
# conditional returns
# ---------------------------------------------------------------------------

def _cell_seed_batch(table: Table, n: int, count: int, rng,
                     level_lo: float = 0.25, level_hi: float = 3.5):
    """Proposal points for the conditioned cell-n sampler.

    Samples (r, phi) uniformly w.r.t. the section measure restricted to a
    union of chart strips that generously covers cell n near all four flat
    points; membership in the cell itself is decided later by flying the
    orbit, so only coverage (not sharpness) of the strips matters.
    Returns (r, phi) arrays of length <= count.
    """
    c = table.profile_coefficient
    beta = table.beta
    L = table.perimeter
    flats = np.asarray(table.flat_r)
    geom = np.empty((2, 2))
    geom[0] = (table.channel_height, table.width)
    geom[1] = (table.channel_width, table.height)
    crown = 0.98 * 0.125 * L

    j = rng.integers(0, 4, size=count)
    H = geom[j % 2, 0]
    span = geom[j % 2, 1]
    ratio = H / span
    om = np.minimum(2.0 * (H / (c * max(n - 1.5, 0.5))) ** (1.0 / beta),
                    crown)
    off = om * (2.0 * rng.random(count) - 1.0)
    tilt = c * beta * np.abs(off) ** (beta - 1.0)
    q = ratio + (c / span) * np.abs(off) ** beta
    lo = level_lo * q / (n + 3.0)
    hi = level_hi * q / max(n - 3.0, 1.0)
    # union of the two grazing branches [tilt-hi, tilt-lo] and
    # [tilt+lo, tilt+hi], clipped to positive angles
    a0 = np.maximum(tilt - hi, 1e-12)
    a1_ = np.maximum(tilt - lo, 1e-12)
    b0 = tilt + lo
    b1 = tilt + hi
    len_a = np.maximum(np.minimum(a1_, b0) - a0, 0.0)
    len_b = b1 - b0
    len_u = len_a + len_b
    u = rng.random(count) * len_u
    psi = np.where(u < len_a, a0 + u, b0 + (u - len_a))
    # thin to the invariant density sin(psi) and the varying union length
    cap_psi = np.minimum(b1, 1.35)
    keep = (psi < cap_psi) & (
        rng.random(count) * np.sin(cap_psi) * len_u.max()
        < np.sin(psi) * len_u)
    sgn = np.where(rng.random(count) < 0.5, 1.0, -1.0)
    r = (flats[j] + off) % L
    phi = sgn * (0.5 * math.pi - psi)
    return r[keep], phi[keep]


def conditioned_cell_samples(table: Table, n: int, accepted: int,
                             rng, threads: int, max_rounds: int = 400):
    """Exact draws from the section measure conditioned on cell n.

    Rejection sampling: proposals from the covering strips, accepted when
    the flown flight index equals n and the point lies in the window-free
    section.  Returns (r, phi, proposals_used).
    """
    got_r: list = []
    got_phi: list = []
    have = 0
    used = 0
    batch = max(20_000, 40 * accepted)
    for _ in range(max_rounds):
        if have >= accepted:
            break
        r, phi = _cell_seed_batch(table, n, batch, rng)
        used += batch
        if r.size == 0:
            continue
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = np.array_split(np.arange(r.size),
                                   max(1, min(threads, r.size // 2048 + 1)))
            futs = [pool.submit(_k.cell_grid, r[p], phi[p], table.gp,
                                table.x_nodes, table.s_nodes)
                    for p in parts if p.size]
            for p, f in zip([p for p in parts if p.size], futs):
                idx, win = f.result()
                m = (idx == n) & (win == 0)
                if m.any():
                    got_r.append(r[p][m])
                    got_phi.append(phi[p][m])
                    have += int(m.sum())
    if have < accepted:
        raise InsufficientCounts(
            f"cell-{n} conditioned sampler accepted {have} of {accepted} "
            f"after {used} proposals; widen strips or lower the bin")
    r = np.concatenate(got_r)[:accepted]
    phi = np.concatenate(got_phi)[:accepted]
    return r, phi, used


def conditional_return(table: Table, n_max: int = 64,
                       samples: int = 20_000_000, seed: int | None = None,
                       threads: int | None = None, cap: int = 100_000,
                       n_lo: int = 6, min_count: int = 50,
                       follow_coef: float = 2.0, follow_min: int = 8,
                       cond_bins=None, cond_per_bin: int = 2000
                       ) -> ConditionalReturnReport:
    """Expected image return time conditioned on the launch cell index.

    The headline regression runs on conditioned bins sampled directly from
    each cell (rejection from covering chart strips), which reaches cell
    indices far beyond what plain section sampling resolves.  A plain
    sampling pass measures the same means at low index (overlap check) and,
    conditioned on {return time = n}, the image tail fractions
    P[R(image) >= n^(1-a)] for a in {0, 1/(2 beta), 1/beta} plus the
    follow-up property that the next ~2 ln n return images all stay in
    cells of index below n^(1 - 1/(2 beta)).
    """
    seed, threads = _resolve(table, seed, threads)
    beta = table.beta
    a1 = 1.0 / (2.0 * beta)
    a2 = 1.0 / beta
    thr_exp = 1.0 - 1.0 / (2.0 * beta)

    def worker(rng, n):
        r, phi = sample_mu_batch(table, rng, n)
        return _k.conditional_scan(r, phi, _k.MODE_RECTANGLE, cap, n_max,
                                   a1, a2, follow_coef, thr_exp, follow_min,
                                   table.gp, table.x_nodes, table.s_nodes)

    nb = n_max + 1
    cell_cnt = np.zeros(nb, dtype=np.int64)
    cell_sum = np.zeros(nb, dtype=np.int64)
    cell_sq = np.zeros(nb, dtype=np.float64)
    rt_cnt = np.zeros(nb, dtype=np.int64)
    da_cnt = np.zeros((3, nb), dtype=np.int64)
    bar_tot = np.zeros(nb, dtype=np.int64)
    bar_ok = np.zeros(nb, dtype=np.int64)
    skipped = 0
    censored = 0
    for cc, cs, cq, rc, dc, bt, bo, sk, ce in _run_chunks(
            worker, samples, seed, threads):
        cell_cnt += cc
        cell_sum += cs
        cell_sq += cq
        rt_cnt += rc
        da_cnt += dc
        bar_tot += bt
        bar_ok += bo
        skipped += int(sk)
        censored += int(ce)
    with np.errstate(invalid="ignore"):
        cond = np.where(cell_cnt > 0, cell_sum / np.maximum(cell_cnt, 1),
                        np.nan)
    usable = np.nonzero(cell_cnt[n_lo:] >= min_count)[0]
    if usable.size < 3:
        raise InsufficientCounts(
            f"fewer than 3 cell bins above {min_count} samples from n={n_lo}")
    n_hi = n_lo + int(usable.max())
    fit_n = np.arange(n_lo, n_hi + 1)
    sel = slice(n_lo, n_hi + 1)
    good = cell_cnt[sel] >= min_count
    direct_slope, _, direct_ci = fit_loglog(fit_n[good], cond[sel][good],
                                            weights=cell_cnt[sel][good])

    # conditioned pass: exact per-cell sampling at log-spaced indices
    if cond_bins is None:
        cond_bins = [16, 24, 32, 48, 64, 96, 128, 192, 256]
    cond_bins = sorted(int(b) for b in cond_bins)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    c_mean = np.zeros(len(cond_bins))
    c_se = np.zeros(len(cond_bins))
    c_cnt = np.zeros(len(cond_bins), dtype=np.int64)
    c_used = np.zeros(len(cond_bins), dtype=np.int64)
    for bi, nbin in enumerate(cond_bins):
        r, phi, used = conditioned_cell_samples(
            table, nbin, cond_per_bin, rng, threads)
        cc, cs, cq, *_rest = _k.conditional_scan(
            r, phi, _k.MODE_RECTANGLE, cap, nbin, a1, a2,
            follow_coef, thr_exp, 10 ** 9,
            table.gp, table.x_nodes, table.s_nodes)
        cnt = int(cc[nbin])
        if cnt < max(8, cond_per_bin // 4):
            raise InsufficientCounts(
                f"conditioned bin {nbin} kept {cnt} of {cond_per_bin}")
        mean = cs[nbin] / cnt
        var = max(cq[nbin] / cnt - mean * mean, 0.0)
        c_mean[bi] = mean
        c_se[bi] = math.sqrt(var / cnt)
        c_cnt[bi] = cnt
        c_used[bi] = used
    w = (c_mean / np.maximum(c_se, 1e-12)) ** 2
    plain_slope, _, plain_ci = fit_loglog(np.asarray(cond_bins, dtype=float),
                                          c_mean, weights=w)
    # the conditional mean carries an additive short-return baseline (the
    # immediate neighborhood of the cell returns in O(1) steps regardless of
    # the index), so the power law is fitted with an explicit offset
    nb_arr = np.asarray(cond_bins, dtype=float)
    sig = np.maximum(c_se, 1e-9)
    try:
        popt, pcov = curve_fit(
            lambda n, base, amp, expn: base + amp * n ** expn,
            nb_arr, c_mean, p0=(2.5, 0.3, (beta - 1.0) / beta),
            sigma=sig, absolute_sigma=True,
            bounds=((0.0, 1e-12, 0.05), (np.inf, np.inf, 1.5)),
            maxfev=20_000)
        slope = float(popt[2])
        ci = float(1.96 * math.sqrt(max(pcov[2, 2], 0.0)))
        offset_fit = {"base": float(popt[0]), "amplitude": float(popt[1])}
    except (RuntimeError, ValueError):
        slope, ci = float(plain_slope), float(plain_ci)
        offset_fit = {"failed": True}

    details: dict = {"skipped": skipped, "censored": censored,
                     "rt_counts": rt_cnt.copy(),
                     "direct_slope": float(direct_slope),
                     "direct_ci": float(direct_ci),
                     "direct_n": fit_n, "direct_mean": cond[sel],
                     "direct_counts": cell_cnt[sel],
                     "cond_proposals": c_used,
                     "cond_se": c_se,
                     "plain_loglog_slope": float(plain_slope),
                     "plain_loglog_ci": float(plain_ci),
                     "offset_fit": offset_fit}
    # overlap: conditioned vs plain means where both resolve
    overlap = []
    for bi, nbin in enumerate(cond_bins):
        if n_lo <= nbin <= n_hi and cell_cnt[nbin] >= min_count:
            m_d = cond[nbin]
            se_d = math.sqrt(max(cell_sq[nbin] / cell_cnt[nbin] - m_d * m_d,
                                 0.0) / cell_cnt[nbin])
            overlap.append((nbin, float(m_d), float(se_d),
                            float(c_mean[bi]), float(c_se[bi])))
    details["overlap"] = overlap
    names = ("a0", "a_half", "a_full")
    expected = ((0.0 * beta - 1.0) / (beta - 1.0),
                (beta * a1 - 1.0) / (beta - 1.0),
                (beta * a2 - 1.0) / (beta - 1.0))
    for j, (nm, exp_sl) in enumerate(zip(names, expected)):
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(rt_cnt > 0, da_cnt[j] / np.maximum(rt_cnt, 1),
                            np.nan)
        gg = (rt_cnt[sel] >= min_count) & (da_cnt[j][sel] > 0)
        entry = {"fraction": frac, "expected_slope": float(exp_sl)}
        if gg.sum() >= 3:
            fs, _, fci = fit_loglog(fit_n[gg], frac[sel][gg],
                                    weights=da_cnt[j][sel][gg])
            entry.update({"slope": float(fs), "ci": float(fci)})
        details[nm] = entry
    with np.errstate(invalid="ignore"):
        details["followup_fraction"] = np.where(
            bar_tot > 0, bar_ok / np.maximum(bar_tot, 1), np.nan)
    details["followup_counts"] = bar_tot.copy()
    return ConditionalReturnReport(
        n_values=np.asarray(cond_bins), conditional_mean=c_mean,
        counts=c_cnt, slope=float(slope), ci_halfwidth=float(ci),
        fit_window=(int(cond_bins[0]), int(cond_bins[-1])), details=details)


# ---------------------------------------------------------------------------
# correlations
# ---------------------------------------------------------------------------

def correlation_suite(table: Table, pairs, n_max: int = 128,
                      orbit_len: int = 32_000_000, batches: int = 32,
                      seed: int | None = None, burn: int = 10_000,
                      map_mode: str = "FullMap", bump_cell: int = 1,
                      bump_box=None) -> dict:
    """Lagged covariances of built-in observables along one long orbit.

    Observables: f1 = sin(2 pi r / perimeter) on the scatterer (0 on
    walls), f2 = the reflection angle everywhere, f3 = a smooth bump
    supported in a verified box inside one flight-index cell.  The orbit is
    split into equal batches; the covariance at each lag uses within-batch
    pairs only and the batch spread gives the standard error.
    """
    seed, threads = _resolve(table, seed, None)
    for f, g in pairs:
        if f not in OBSERVABLE_IDS or g not in OBSERVABLE_IDS:
            raise ValueError(f"unknown observable pair ({f}, {g})")
    mode = {"FullMap": _k.MODE_RECTANGLE,
            "ScattererMap": _k.MODE_TORUS}[map_mode]
    batch_len = orbit_len // batches
    if batch_len <= 4 * n_max:
        raise ValueError("orbit too short for the requested lag range")
    needs_bump = any("f3" in p for p in pairs)
    if needs_bump and bump_box is None:
        bump_box = largest_cell_box(table, bump_cell)
    box = np.asarray(bump_box if bump_box is not None else (0, 1, 0, 1),
                     dtype=np.float64)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    start = sample_mu(table, rng,
                      "full" if mode == _k.MODE_RECTANGLE else "scatterer")
    r, phi, comp = start.r, start.phi, start.component
    f = np.zeros((3, batch_len))
    scratch = np.zeros((3, burn)) if burn else None
    restarts = 0

    def advance(nsteps, out1, out2, out3):
        nonlocal r, phi, comp, restarts
        done = 0
        while done < nsteps:
            st, nd, r1, p1, c1 = _k.observable_walk(
                r, phi, comp, mode, nsteps - done,
                box, out1[done:], out2[done:], out3[done:],
                table.gp, table.x_nodes, table.s_nodes)
            r, phi, comp = r1, p1, c1
            done += nd
            if st != _k.ST_OK:
                restarts += 1
                p = sample_mu(table, rng,
                              "full" if mode == _k.MODE_RECTANGLE
                              else "scatterer")
                r, phi, comp = p.r, p.phi, p.component

    if burn:
        advance(burn, scratch[0], scratch[1], scratch[2])

    idx = {"f1": 0, "f2": 1, "f3": 2}
    cross = {p: np.zeros((batches, n_max + 1)) for p in pairs}
    sums = np.zeros((batches, 3))
    for b in range(batches):
        advance(batch_len, f[0], f[1], f[2])
        sums[b] = f.sum(axis=1)
        for p in pairs:
            u = f[idx[p[1]]]  # g at time i
            v = f[idx[p[0]]]  # f at time i + lag
            cross[p][b] = _k.lag_cross_sums(u, v, n_max)
    means = sums.sum(axis=0) / (batches * batch_len)
    lags = np.arange(n_max + 1)
    counts = batch_len - lags
    out = {}
    for p in pairs:
        prod = means[idx[p[0]]] * means[idx[p[1]]]
        c_b = cross[p] / counts - prod
        c_n = c_b.mean(axis=0)
        stderr = c_b.std(axis=0, ddof=1) / math.sqrt(batches)
        out[p] = CorrelationSeries(
            lags=lags, c_n=c_n, stderr=stderr, observables=p,
            details={
                "mean_f": float(means[idx[p[0]]]),
                "mean_g": float(means[idx[p[1]]]),
                "orbit_len": batches * batch_len,
                "batches": batches,
                "batch_len": batch_len,
                "restarts": restarts,
                "map_mode": map_mode,
                "bump_box": None if bump_box is None else tuple(box),
            })
    return out


def correlation(table: Table, f_id: str, g_id: str, n_max: int = 128,
                orbit_len: int = 32_000_000, batches: int = 32,
                seed: int | None = None, burn: int = 10_000,
                map_mode: str = "FullMap", bump_cell: int = 1,
                bump_box=None) -> CorrelationSeries:
    """Lagged covariance of one observable pair; see correlation_suite."""
    res = correlation_suite(table, [(f_id, g_id)], n_max=n_max,
                            orbit_len=orbit_len, batches=batches, seed=seed,
                            burn=burn, map_mode=map_mode,
                            bump_cell=bump_cell, bump_box=bump_box)
    return res[(f_id, g_id)]


# ---------------------------------------------------------------------------
# one-step expansion
# ---------------------------------------------------------------------------

def _unstable_direction(table: Table, x: PhasePoint, pull_steps: int = 5):
    """Direction deep inside the unstable cone at x, via the derivative of
    the scatterer map along the backward orbit (time-reversal trick)."""
    y = time_reverse(x)
    for _ in range(pull_steps):
        y, _ = scatterer_map(table, y)
    y = time_reverse(y)
    vr, vp = 0.0, 1.0
    r, phi, comp = y.r, y.phi, y.component
    for _ in range(pull_steps):
        st, r1, p1, c1, tau, _, _, k0, k1 = _k.map_step_full(
            r, phi, comp, _k.MODE_TORUS, table.gp,
            table.x_nodes, table.s_nodes)
        if st != _k.ST_OK:
            raise CurveDegenerate("backward-forward transport failed")
        a11, a12, a21, a22 = _k.derivative_entries(tau, phi, p1, k0, k1)
        vr, vp = a11 * vr + a12 * vp, a21 * vr + a22 * vp
        nv = math.hypot(vr, vp)
        vr, vp = vr / nv, vp / nv
        r, phi, comp = r1, p1, c1
    return PhasePoint(comp, r, phi), (vr, vp)


def one_step_expansion(table: Table, curve_len: float = 1e-4,
                       trials: int = 100, points: int = 1200,
                       seed: int | None = None, cap: int = 100_000,
                       trap_cap: int = 10_000, pull_steps: int = 5
                       ) -> OneStepReport:
    """Sum of length ratios |W_i| / |F W_i| over singularity-split pieces.

    Each trial lays a straight segment of the requested length through a
    mu-random point along a transported unstable direction, samples it,
    pushes every sample through the first-return map, splits the segment
    where the continuity label (cell index, window flag, trap depth,
    homogeneity indices) jumps, and sums chord-length ratios per piece.
    """
    seed, _ = _resolve(table, seed, None)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    half_pi = 0.5 * math.pi
    sums = []
    piece_counts = []
    crossing = []
    degenerate = 0
    attempts = 0
    max_attempts = 6 * trials
    while len(sums) < trials and attempts < max_attempts:
        attempts += 1
        x = sample_mu(table, rng)
        try:
            center, (vr, vp) = _unstable_direction(table, x, pull_steps)
        except CurveDegenerate:
            degenerate += 1
            continue
        t = np.linspace(-0.5 * curve_len, 0.5 * curve_len, points + 1)
        rr = (center.r + t * vr) % table.perimeter
        pp = center.phi + t * vp
        valid = np.abs(pp) < half_pi - 1e-12
        if valid.sum() < points // 2:
            degenerate += 1
            continue
        rr = np.ascontiguousarray(rr[valid])
        pp = np.ascontiguousarray(pp[valid])
        ok, lab, r1, p1 = _k.curve_point_data(
            rr, pp, _k.MODE_TORUS, cap, trap_cap,
            table.gp, table.x_nodes, table.s_nodes)
        okm = ok == 1
        if not okm.any():
            degenerate += 1
            continue
        if np.all(lab[okm] % 2 == 1):
            raise CurveDegenerate(
                "every resolvable sample point is tangential-flagged")
        # split into contiguous equal-label runs of resolvable points
        ds = math.hypot(vr, vp) * (t[1] - t[0])
        total = 0.0
        pieces = 0
        L = table.perimeter
        i = 0
        npts = len(rr)
        while i < npts:
            if not okm[i]:
                i += 1
                continue
            j = i
            while j + 1 < npts and okm[j + 1] and lab[j + 1] == lab[i]:
                j += 1
            if j > i:
                seed_len = ds * (j - i)
                dr = np.diff(r1[i: j + 1])
                dr = (dr + 0.5 * L) % L - 0.5 * L
                dp = np.diff(p1[i: j + 1])
                img_len = float(np.hypot(dr, dp).sum())
                if img_len > 0:
                    total += seed_len / img_len
                    pieces += 1
            i = j + 1
        if pieces == 0:
            degenerate += 1
            continue
        sums.append(total)
        piece_counts.append(pieces)
        crossing.append(pieces > 1)
    if len(sums) < trials:
        raise CurveDegenerate(
            f"only {len(sums)}/{trials} usable curves after "
            f"{attempts} attempts")
    return OneStepReport(
        sums=np.array(sums), piece_counts=np.array(piece_counts),
        crossing=np.array(crossing), curve_len=curve_len,
        details={"degenerate_draws": degenerate, "points": points,
                 "pull_steps": pull_steps})


# ---------------------------------------------------------------------------
# singularity neighborhoods
# ---------------------------------------------------------------------------

def singularity_neighborhood(table: Table, deltas=None,
                             samples: int = 200_000,
                             seed: int | None = None,
                             threads: int | None = None,
                             iters: int = 42, min_count: int = 25
                             ) -> TailEstimate:
    """Measure of the proxy-distance neighborhoods of the singularity set.

    The proxy distance of a point is the nearest continuity-label change
    along the four axis directions in (arclength, angle), bisected to
    machine-level resolution; the estimate is the fraction of mu-random
    points within each requested distance.
    """
    seed, threads = _resolve(table, seed, threads)
    if deltas is None:
        deltas = np.logspace(-5.0, -2.0, 13)
    deltas = np.sort(np.asarray(deltas, dtype=np.float64))
    dmax = float(deltas[-1]) * 2.0

    def worker(rng, n):
        r, phi = sample_mu_batch(table, rng, n)
        return _k.neighborhood_probe(r, phi, dmax, iters, table.gp,
                                     table.x_nodes, table.s_nodes)

    parts = _run_chunks(worker, samples, seed, threads)
    prox = np.concatenate(parts)
    bad = np.isnan(prox)
    prox = prox[~bad]
    counts = np.array([(prox <= d).sum() for d in deltas], dtype=np.int64)
    frac = counts / samples
    usable = counts >= min_count
    if usable.sum() < 3:
        raise InsufficientCounts(
            "fewer than 3 distance levels hold >= "
            f"{min_count} hits; raise samples")
    slope, _, ci = fit_loglog(deltas[usable], frac[usable],
                              weights=counts[usable])
    order = np.argsort(deltas)[::-1]
    return TailEstimate(
        thresholds=deltas[order], survival=frac[order],
        fitted_exponent=float(slope), ci_halfwidth=float(ci),
        sample_count=int(samples),
        fit_window=(float(deltas[usable][0]), float(deltas[usable][-1])),
        censored=int(bad.sum()),
        details={"counts": counts[order],
                 "censored_at": float(dmax)})


def validate_distance_proxy(table: Table, n_list=(8, 12, 20),
                            points: int = 1000, seed: int | None = None,
                            offset_range=(1e-6, 1e-4)) -> dict:
    """Compare the proxy distance against true polyline distance near the
    traced count-transition curves; returns ratio quantiles."""
    from .cells import trace_singularity_s_n

    seed, _ = _resolve(table, seed, None)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ratios = []
    per_curve = points // len(n_list)
    for n in n_list:
        hw = 1.2 * _k.window_halfwidth(table.gp, n)
        grid = np.linspace(hw, 8.0 * hw, 160)
        tr = trace_singularity_s_n(table, n, grid)
        poly = np.column_stack([np.asarray(tr.r), np.asarray(tr.phi)])
        if len(poly) < 8:
            continue
        seg_a = poly[:-1]
        seg_b = poly[1:]
        for _ in range(per_curve):
            j = rng.integers(1, len(poly) - 2)
            u = math.exp(rng.uniform(math.log(offset_range[0]),
                                     math.log(offset_range[1])))
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            p = poly[j] + np.array([0.0, side * u])
            d = seg_a - p
            e = seg_b - seg_a
            tpar = np.clip(-(d * e).sum(axis=1) / (e * e).sum(axis=1), 0, 1)
            near = d + e * tpar[:, None]
            true_dist = float(np.sqrt((near * near).sum(axis=1)).min())
            prox = _k.neighborhood_probe(
                np.array([p[0] % table.perimeter]), np.array([p[1]]),
                max(64.0 * u, 1e-3), 48, table.gp,
                table.x_nodes, table.s_nodes)[0]
            if np.isnan(prox) or true_dist == 0:
                continue
            ratios.append(prox / true_dist)
    ratios = np.array(ratios)
    if ratios.size < points // 2:
        raise InsufficientCounts("proxy validation produced too few points")
    within = float(((ratios >= 0.5) & (ratios <= 2.0)).mean())
    return {
        "ratios": ratios,
        "within_factor2": within,
        "median": float(np.median(ratios)),
        "q05": float(np.quantile(ratios, 0.05)),
        "q95": float(np.quantile(ratios, 0.95)),
    }


# ---------------------------------------------------------------------------
# Lyapunov interval
# ---------------------------------------------------------------------------

def lyapunov_interval(table: Table, starts: int = 16, steps: int = 20_000,
                      seed: int | None = None, mode: str = "Torus"
                      ) -> tuple[float, float]:
    """Mean and 95% halfwidth of per-step log expansion over random starts."""
    seed, _ = _resolve(table, seed, None)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    md = _k.MODE_TORUS if mode == "Torus" else _k.MODE_RECTANGLE
    vals = []
    attempts = 0
    while len(vals) < starts and attempts < 4 * starts:
        attempts += 1
        x = sample_mu(table, rng)
        st, acc, done, *_ = _k.lyap_kernel(
            x.r, x.phi, x.component, md, steps, 16,
            table.gp, table.x_nodes, table.s_nodes)
        if done < steps // 2:
            continue
        vals.append(acc / done)
    if len(vals) < starts:
        raise InsufficientCounts("too many Lyapunov walks failed")
    v = np.array(vals)
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(len(v)))


# ---------------------------------------------------------------------------
# deterministic text artifacts
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, header, rows) -> None:
    """Plain deterministic CSV: fixed float formatting, LF line endings."""
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in sorted(obj.items(),
                                                        key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def write_summary(path, payload: dict) -> None:
    """Deterministic JSON summary (sorted keys, newline-terminated)."""
    with open(path, "w", newline="\n") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
