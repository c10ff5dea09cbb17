"""Worst-case constraint evaluation over the continuous horizon.

For a candidate schedule this module computes, per constraint row, the
maximum violation and a maximizing time.  The scan refines a uniform sample
grid (halving the step) until consecutive-sample differences meet the
requested tolerance, then polishes the winning sample by golden-section
search on the exact evaluator.  Shifted profile breakpoints are always
checked exactly as well, since constraint kinks sit there.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .lti_core import LtiSystem, Schedule, ScheduleResponse, TrajectoryCache, UserRequest

if TYPE_CHECKING:  # pragma: no cover
    from .ehsipa import DiscretizationState

_MIN_GRID_STEP = 1e-5
_MAX_REFINES = 12
_DUPLICATE_TOL = 1e-9


@dataclass(frozen=True)
class ViolationReport:
    """Per-row worst margins g_i^* and maximizers t_i^* of one schedule."""

    margins: np.ndarray      # (n_c,) worst C_i x(t) - c_i over [0, T]
    maximizers: np.ndarray   # (n_c,) a time achieving the worst margin
    tolerance: float         # consecutive-sample bound achieved by the scan
    grid_step: float         # grid step used for the scan

    def worst(self) -> float:
        return float(self.margins.max())


def is_sip_feasible(report: ViolationReport) -> bool:
    """True iff every row satisfies g_i^* <= 0."""
    return bool(np.all(report.margins <= 0.0))


def _polish(resp: ScheduleResponse, i: int, lo: float, hi: float,
            iters: int = 45) -> tuple[float, float]:
    """Golden-section maximization of row ``i`` margin on [lo, hi]."""
    inv_phi = 0.6180339887498949
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc = resp.margin(i, c)
    fd = resp.margin(i, d)
    for _ in range(iters):
        if b - a < 1e-10:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = resp.margin(i, c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = resp.margin(i, d)
    return (c, fc) if fc >= fd else (d, fd)


def solve_llp(sys: LtiSystem, requests: Sequence[UserRequest], sched: Schedule,
              tol: float, cache: TrajectoryCache,
              threads: int = 1) -> ViolationReport:
    """Maximum violation per row, within ``tol`` of the continuous maximum.

    Refines the cache grid until the largest consecutive-sample difference of
    any row is at most ``tol`` (subject to a hard floor on the step), then
    polishes each row's best sample exactly.  Among equal maximizers the
    earliest time wins.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    shifts = np.asarray(sched.shifts, dtype=float)
    jump = 0.0
    for _ in range(_MAX_REFINES + 1):
        samples = cache.row_samples(shifts)
        if samples.shape[1] > 1:
            jump = float(np.abs(np.diff(samples, axis=1)).max())
        if jump <= tol or cache.step * 0.5 < _MIN_GRID_STEP:
            break
        cache.refine()

    resp = cache.response(shifts)
    times = cache.grid_times
    n_c = sys.n_c
    breakpoints = cache.shifted_breakpoints(shifts)
    bp_margins = np.column_stack([resp.margins(t) for t in breakpoints]) \
        if len(breakpoints) else np.zeros((n_c, 0))

    def solve_row(i: int) -> tuple[float, float]:
        k = int(np.argmax(samples[i]))
        lo = times[max(k - 1, 0)]
        hi = times[min(k + 1, len(times) - 1)]
        candidates = [(float(times[k]), resp.margin(i, float(times[k])))]
        candidates.append(_polish(resp, i, lo, hi))
        for t_b, g_b in zip(breakpoints, bp_margins[i]):
            candidates.append((float(t_b), float(g_b)))
        best_g = max(g for _, g in candidates)
        best_t = min(t for t, g in candidates if g >= best_g - 1e-12)
        return best_g, best_t

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_row, range(n_c)))
    else:
        results = [solve_row(i) for i in range(n_c)]

    margins = np.array([g for g, _ in results])
    maximizers = np.array([t for _, t in results])
    return ViolationReport(margins=margins, maximizers=maximizers,
                           tolerance=min(tol, jump) if jump > 0.0 else tol,
                           grid_step=cache.step)


def verify_schedule(sys: LtiSystem, requests: Sequence[UserRequest],
                    sched: Schedule, cache: TrajectoryCache,
                    step: float = 0.01) -> ViolationReport:
    """Dense verification scan at the given step, with exact argmax polish.

    Used for final certification of a schedule; heavier but independent of
    the adaptive scan grid.
    """
    shifts = np.asarray(sched.shifts, dtype=float)
    resp = cache.response(shifts)
    times, margins = resp.dense_margins(step)
    out_g = np.empty(sys.n_c)
    out_t = np.empty(sys.n_c)
    for i in range(sys.n_c):
        k = int(np.argmax(margins[i]))
        lo = times[max(k - 1, 0)]
        hi = times[min(k + 1, len(times) - 1)]
        t_star, g_star = _polish(resp, i, lo, hi)
        if margins[i, k] >= g_star:
            t_star, g_star = float(times[k]), float(margins[i, k])
        out_g[i] = g_star
        out_t[i] = t_star
    return ViolationReport(margins=out_g, maximizers=out_t,
                           tolerance=step, grid_step=step)


def update_constraint_sets(state: "DiscretizationState",
                           report: ViolationReport) -> "DiscretizationState":
    """Grow the per-row time sets at violated rows' maximizers.

    Rows with g_i^* <= 0 are untouched; duplicate points (within 1e-9 min)
    are not re-added, which makes the update idempotent on feasible reports.
    """
    new_times = []
    for i, times_i in enumerate(state.time_sets):
        if report.margins[i] > 0.0:
            t_new = float(report.maximizers[i])
            if not len(times_i) or np.abs(times_i - t_new).min() > _DUPLICATE_TOL:
                merged = np.sort(np.append(times_i, t_new))
            else:
                merged = times_i
            new_times.append(merged)
        else:
            new_times.append(times_i)
    return state.with_time_sets(new_times)
