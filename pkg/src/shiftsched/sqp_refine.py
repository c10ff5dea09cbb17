"""Stage 2: feasibility-preserving SQP over the continuous shift intervals.

Starting from a continuous-time feasible schedule, each iteration linearizes
every constraint row at its near-active maximizers, solves a strictly convex
quadratic program (damped-BFGS Hessian model, box and trust-region bounds),
and backtracks a line search that enforces both continuous-time feasibility
and an Armijo decrease of the shift cost.  Every iterate therefore stays
feasible, and the cost strictly decreases whenever a nonzero step is taken.
Termination is on the step size dropping below ``step_tol``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .constraint_eval import _polish, is_sip_feasible, solve_llp, ViolationReport
from .lti_core import LtiSystem, Schedule, TrajectoryCache, UserRequest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SqpParams:
    """Stage-2 parameters (defaults follow the reference study)."""

    trust0: float = 5.0          # initial trust-region radius, minutes
    armijo: float = 0.33         # sufficient-decrease constant in (0, 1)
    step_tol: float = 0.5        # terminate when gamma * |p|_inf drops below
    max_iter: int = 500
    activation_band: float = 1e-3    # include maximizers with margin >= -band
    llp_tol: float = 1e-3            # feasibility-scan tolerance per iterate
    backtrack_start: float = 0.999   # line search starts just below 1
    backtrack_factor: float = 0.5
    min_step_scale: float = 2.0 ** -20
    trust_grow: float = 2.0
    trust_shrink: float = 0.5
    ratio_good: float = 0.75
    ratio_poor: float = 0.25

    def __post_init__(self):
        if not (0.0 < self.armijo < 1.0):
            raise ValueError("armijo constant must lie in (0, 1)")
        if self.trust0 <= 0 or self.step_tol <= 0:
            raise ValueError("trust radius and step tolerance must be positive")


@dataclass
class QpSubproblem:
    """Quadratic model at one feasible iterate.

    Rows are the linearized near-active constraints a^T p + b <= 0; the box
    is expressed relative to the current schedule, and the trust region caps
    the step in the max norm.  p = 0 is always feasible here because the
    base schedule is.
    """

    hessian: np.ndarray              # (m, m) positive definite
    gradient: np.ndarray             # (m,) shift-cost slopes
    constant: float                  # current cost
    rows_a: np.ndarray               # (n_rows, m)
    rows_b: np.ndarray               # (n_rows,)
    row_meta: tuple[tuple[int, float], ...]   # (constraint row, time)
    box_lo: np.ndarray               # (m,)
    box_hi: np.ndarray               # (m,)
    trust: float

    def __post_init__(self):
        w = np.linalg.eigvalsh(0.5 * (self.hessian + self.hessian.T))
        if w.min() <= 0:
            raise ValueError("QP Hessian must be positive definite")
        if len(self.rows_b) and self.rows_b.max() > 1e-9:
            raise ValueError("QP built at an infeasible schedule")

    def model(self, p: np.ndarray) -> float:
        return float(0.5 * p @ self.hessian @ p + self.gradient @ p
                     + self.constant)


def constraint_gradient(sys: LtiSystem, requests: Sequence[UserRequest],
                        sched: Schedule, i: int, t: float,
                        cache: TrajectoryCache) -> np.ndarray:
    """Gradient of C_i x(t) with respect to every shift.

    Component l is -C_i E_l v_l(t - tau_l) - C_i A xbar_l(t - tau_l); at a
    profile discontinuity the left limit of v_l is used.
    """
    row = sys.c_mat[i]
    row_a = row @ sys.a
    out = np.zeros(sys.m)
    for l, req in enumerate(requests):
        theta = t - sched.shifts[l]
        v = req.profile.value(theta, side="left")
        comp = cache.component(l, theta)
        out[l] = -(row @ sys.e[:, l]) * v - row_a @ comp
    return out


def _near_active_times(cache: TrajectoryCache, resp, i: int,
                       shifts: np.ndarray, band: float) -> list[tuple[float, float]]:
    """Polished local maximizers of row ``i`` with margin >= -band."""
    samples = cache.row_samples(shifts)[i]
    times = cache.grid_times
    n = len(samples)
    # sample-level pre-filter: slack by the largest consecutive jump so no
    # true near-active maximizer between samples is missed
    jump = float(np.abs(np.diff(samples)).max()) if n > 1 else 0.0
    idx = [k for k in range(n)
           if (k == 0 or samples[k] >= samples[k - 1])
           and (k == n - 1 or samples[k] >= samples[k + 1])
           and samples[k] >= -band - jump]
    found: list[tuple[float, float]] = []
    for k in idx:
        lo = times[max(k - 1, 0)]
        hi = times[min(k + 1, n - 1)]
        t_star, g_star = _polish(resp, i, lo, hi)
        g_grid = resp.margin(i, float(times[k]))
        if g_grid > g_star:
            t_star, g_star = float(times[k]), g_grid
        if g_star >= -band:
            found.append((t_star, g_star))
    for t_b in cache.shifted_breakpoints(shifts):
        g_b = resp.margin(i, float(t_b))
        if g_b >= -band:
            found.append((float(t_b), g_b))
    found.sort()
    dedup: list[tuple[float, float]] = []
    for t_star, g_star in found:
        if dedup and abs(t_star - dedup[-1][0]) <= 1e-6:
            if g_star > dedup[-1][1]:
                dedup[-1] = (t_star, g_star)
        else:
            dedup.append((t_star, g_star))
    return dedup


def build_qp(sys: LtiSystem, requests: Sequence[UserRequest], sched: Schedule,
             report: ViolationReport, hessian: np.ndarray, trust: float,
             cache: TrajectoryCache,
             activation_band: float = 1e-3) -> QpSubproblem:
    """Assemble the quadratic model at a feasible schedule.

    All detected near-active maximizers of every row enter as linear rows
    (margin at least ``-activation_band``), evaluated exactly; the rows of a
    feasible schedule keep p = 0 feasible.
    """
    if not is_sip_feasible(report):
        raise ValueError("QP must be built at a feasible schedule")
    shifts = np.asarray(sched.shifts, dtype=float)
    resp = cache.response(shifts)
    rows_a = []
    rows_b = []
    meta: list[tuple[int, float]] = []
    for i in range(sys.n_c):
        for t_star, g_star in _near_active_times(cache, resp, i, shifts,
                                                 activation_band):
            if g_star > 1e-9:
                raise ValueError("QP must be built at a feasible schedule")
            rows_a.append(constraint_gradient(sys, requests, sched, i,
                                              t_star, cache))
            # clamp sub-1e-9 positive noise so p = 0 stays QP-feasible
            rows_b.append(min(g_star, 0.0))
            meta.append((i, t_star))
    grad = np.array([req.cost_slope(tau)
                     for req, tau in zip(requests, shifts)])
    cost = sched.cost(requests)
    return QpSubproblem(
        hessian=hessian,
        gradient=grad,
        constant=cost,
        rows_a=np.array(rows_a).reshape(len(rows_b), sys.m),
        rows_b=np.array(rows_b),
        row_meta=tuple(meta),
        box_lo=np.array([r.shift_lo for r in requests]) - shifts,
        box_hi=np.array([r.shift_hi for r in requests]) - shifts,
        trust=float(trust),
    )


def solve_qp(qp: QpSubproblem, tol: float = 1e-10
             ) -> tuple[np.ndarray, np.ndarray]:
    """Primal active-set solve of the strictly convex QP.

    Returns the unique minimizer and the nonnegative multipliers of the
    linearized constraint rows (box and trust multipliers are internal).
    p = 0 is feasible by construction, so no phase-1 pass is needed.
    """
    m = len(qp.gradient)
    h_mat = 0.5 * (qp.hessian + qp.hessian.T)
    # box and trust region combine into effective elementwise bounds
    ub = np.minimum(qp.box_hi, qp.trust)
    lb = np.maximum(qp.box_lo, -qp.trust)
    if np.any(ub < -1e-12) or np.any(lb > 1e-12):
        raise ValueError("p = 0 violates the QP bounds")
    n_gen = len(qp.rows_b)
    rows = [qp.rows_a] if n_gen else []
    rows.append(np.eye(m))
    rows.append(-np.eye(m))
    g_all = np.vstack(rows)
    h_all = np.concatenate([(-qp.rows_b) if n_gen else np.zeros(0), ub, -lb])

    p = np.zeros(m)
    work: list[int] = [r for r in range(len(h_all)) if h_all[r] <= tol]
    # ensure the initial working set is independent
    keep: list[int] = []
    for r in work:
        cand = g_all[keep + [r]]
        if np.linalg.matrix_rank(cand) == len(keep) + 1:
            keep.append(r)
    work = keep

    lam_work = np.zeros(0)
    for _ in range(200 + 10 * len(h_all)):
        g_w = g_all[work] if work else np.zeros((0, m))
        kkt = np.zeros((m + len(work), m + len(work)))
        kkt[:m, :m] = h_mat
        if work:
            kkt[:m, m:] = g_w.T
            kkt[m:, :m] = g_w
        rhs = np.concatenate([-(h_mat @ p + qp.gradient), np.zeros(len(work))])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        d = sol[:m]
        lam_work = sol[m:]
        if np.abs(d).max() <= tol:
            if not work or lam_work.min() >= -1e-9:
                break
            lam_min = float(lam_work.min())
            drop = min((pos for pos in range(len(work))
                        if lam_work[pos] <= lam_min + 1e-15),
                       key=lambda pos: work[pos])
            work.pop(drop)
            continue
        alpha = 1.0
        blocking = -1
        for r in range(len(h_all)):
            if r in work:
                continue
            g_d = float(g_all[r] @ d)
            if g_d > 1e-12:
                a_r = (h_all[r] - float(g_all[r] @ p)) / g_d
                if a_r < alpha - 1e-12:
                    alpha = max(a_r, 0.0)
                    blocking = r
        p = p + alpha * d
        if blocking >= 0:
            work.append(blocking)
        # full step with no blocking row leaves the EQP optimum; loop once
        # more to collect multipliers and test optimality

    multipliers = np.zeros(n_gen)
    for pos, r in enumerate(work):
        if r < n_gen:
            multipliers[r] = max(float(lam_work[pos]), 0.0)
    return p, multipliers


def line_search(sys: LtiSystem, requests: Sequence[UserRequest],
                sched: Schedule, step: np.ndarray, armijo: float,
                llp_tol: float, cache: TrajectoryCache,
                params: SqpParams | None = None,
                threads: int = 1) -> float:
    """Largest backtracked gamma in [0, 1) keeping feasibility and decrease.

    Backtracks by halving from just below one; returns 0.0 when no step down
    to the resolution limit satisfies both the worst-case feasibility check
    and the Armijo condition on the shift cost.
    """
    if params is None:
        params = SqpParams()
    shifts = np.asarray(sched.shifts, dtype=float)
    slope = float(sum(req.cost_slope(tau) * p
                      for req, tau, p in zip(requests, shifts, step)))
    base_cost = sched.cost(requests)
    lo = np.array([r.shift_lo for r in requests])
    hi = np.array([r.shift_hi for r in requests])
    gamma = params.backtrack_start
    floor = params.backtrack_start * params.min_step_scale
    while gamma >= floor:
        candidate = np.clip(shifts + gamma * step, lo, hi)
        cand_sched = Schedule.checked(candidate, requests)
        new_cost = cand_sched.cost(requests)
        if new_cost <= base_cost + armijo * gamma * slope + 1e-12:
            report = solve_llp(sys, requests, cand_sched, llp_tol, cache,
                               threads=threads)
            if is_sip_feasible(report):
                return gamma
        gamma *= params.backtrack_factor
    return 0.0


def damped_bfgs_update(b_mat: np.ndarray, s: np.ndarray,
                       y: np.ndarray) -> np.ndarray:
    """Damped BFGS update keeping the approximation positive definite.

    The damping interpolates y toward B s so that s^T r >= 0.2 s^T B s,
    which preserves positive definiteness for any curvature sign.  A zero
    step is a no-op.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.any(s):
        return b_mat.copy()
    bs = b_mat @ s
    sbs = float(s @ bs)
    sy = float(s @ y)
    if sy >= 0.2 * sbs:
        theta = 1.0
    else:
        theta = 0.8 * sbs / (sbs - sy)
    r = theta * y + (1.0 - theta) * bs
    b_new = b_mat - np.outer(bs, bs) / sbs + np.outer(r, r) / float(s @ r)
    return 0.5 * (b_new + b_new.T)


def _lagrangian_gradient(sys, requests, sched, multipliers, row_meta, cache
                         ) -> np.ndarray:
    grad = np.array([req.cost_slope(tau)
                     for req, tau in zip(requests, sched.shifts)])
    for lam, (i, t) in zip(multipliers, row_meta):
        if lam > 0.0:
            grad = grad + lam * constraint_gradient(sys, requests, sched, i,
                                                    t, cache)
    return grad


def run_stage2(sys: LtiSystem, requests: Sequence[UserRequest],
               sched0: Schedule, params: SqpParams | None = None,
               cache: TrajectoryCache | None = None,
               threads: int = 1) -> tuple[Schedule, list[dict]]:
    """Iterate QP steps from a feasible schedule until the step stalls.

    Every iterate is verified feasible; the returned cost never exceeds the
    initial one and strictly improves whenever the first QP step is nonzero
    and a positive line-search step is accepted.  Raises ValueError for an
    infeasible starting schedule.
    """
    if params is None:
        params = SqpParams()
    if cache is None:
        cache = TrajectoryCache(sys, requests)
    report = solve_llp(sys, requests, sched0, params.llp_tol, cache,
                       threads=threads)
    if not is_sip_feasible(report):
        raise ValueError("stage 2 requires a feasible starting schedule")

    m = sys.m
    b_mat = np.eye(m)
    trust = params.trust0
    trust_cap = max(r.shift_hi - r.shift_lo for r in requests)
    sched = sched0
    trace: list[dict] = []

    for it in range(params.max_iter):
        t0 = time.perf_counter()
        qp = build_qp(sys, requests, sched, report, b_mat, trust, cache,
                      params.activation_band)
        p_star, lam = solve_qp(qp)
        step_norm = float(np.abs(p_star).max()) if m else 0.0
        if step_norm <= 1e-12:
            trace.append({"iter": it, "cost": sched.cost(requests),
                          "step_norm": 0.0, "gamma": 0.0, "trust": trust,
                          "active": len(qp.rows_b),
                          "worst_margin": report.worst(),
                          "wall": time.perf_counter() - t0})
            break
        gamma = line_search(sys, requests, sched, p_star, params.armijo,
                            params.llp_tol, cache, params, threads)
        old_cost = sched.cost(requests)
        new_sched = sched
        new_report = report
        if gamma > 0.0:
            lo = np.array([r.shift_lo for r in requests])
            hi = np.array([r.shift_hi for r in requests])
            shifts = np.clip(sched.shifts + gamma * p_star, lo, hi)
            new_sched = Schedule.checked(shifts, requests)
            new_report = solve_llp(sys, requests, new_sched, params.llp_tol,
                                   cache, threads=threads)
            if not is_sip_feasible(new_report):
                raise AssertionError("accepted line-search step lost "
                                     "feasibility")
            # trust region from model agreement on the accepted step
            predicted = qp.constant - qp.model(gamma * p_star)
            actual = old_cost - new_sched.cost(requests)
            if predicted > 1e-16:
                ratio = actual / predicted
                full_step = gamma >= params.backtrack_start - 1e-12
                if ratio < params.ratio_poor:
                    trust = max(trust * params.trust_shrink, 1e-9)
                elif ratio > params.ratio_good and full_step:
                    trust = min(trust * params.trust_grow, trust_cap)
            # damped BFGS with multipliers held fixed across the step
            grad_new = _lagrangian_gradient(sys, requests, new_sched, lam,
                                            qp.row_meta, cache)
            grad_old = _lagrangian_gradient(sys, requests, sched, lam,
                                            qp.row_meta, cache)
            s = new_sched.shifts - sched.shifts
            b_mat = damped_bfgs_update(b_mat, s, grad_new - grad_old)
        else:
            trust = max(trust * params.trust_shrink, 1e-9)
        trace.append({"iter": it, "cost": new_sched.cost(requests),
                      "step_norm": step_norm, "gamma": gamma, "trust": trust,
                      "active": len(qp.rows_b),
                      "worst_margin": new_report.worst(),
                      "wall": time.perf_counter() - t0})
        sched, report = new_sched, new_report
        if gamma * step_norm < params.step_tol:
            break
    return sched, trace
