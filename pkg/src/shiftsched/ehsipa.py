"""Stage 1: hybrid discretization loop with decision-space augmentation.

The loop alternates three finite subproblems over the discretized decision
sets and per-row constraint time sets:

* lower bound: the time-sampled relaxation; its proven bound under-estimates
  the discretized optimum.  An infeasible lower-bound problem raises a flag
  that triggers midpoint augmentation of the decision sets instead of any
  constraint-set update.
* upper bound: the same rows tightened uniformly by the restriction
  parameter; consecutive infeasibilities shrink the restriction at most
  ``k_r_max`` times before control returns to the lower-bound flow.  A
  minimizer that passes the continuous-time check becomes an upper bound.
* refinement: targets the midpoint of the current bounds with a budget row;
  a negative slack optimum proves the midpoint under-estimates the
  discretized optimum (raising the lower bound), a feasible minimizer yields
  both a restriction update and an improved upper bound, and anything else
  grows the time sets at most ``l_max`` consecutive times.

Every candidate schedule is checked by the continuous-time worst-case scan,
and violated rows gain their maximizer as a new sample time.  Termination:
upper minus lower within ``eps_f``, with the incumbent schedule feasible.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .constraint_eval import (ViolationReport, is_sip_feasible, solve_llp,
                              update_constraint_sets)
from .ilp_solver import IlpSolution, solve_ilp, transcribe
from .lti_core import LtiSystem, Schedule, TrajectoryCache, UserRequest

logger = logging.getLogger(__name__)

_DUPLICATE_TOL = 1e-9


@dataclass(frozen=True)
class DiscretizationState:
    """Working discretization: shift sets, per-row time sets, tolerances."""

    shift_sets: tuple[np.ndarray, ...]      # sorted candidate shifts per user
    shift_bounds: tuple[tuple[float, float], ...]
    time_sets: tuple[np.ndarray, ...]       # sorted sample times per row
    restriction: float                      # current uniform tightening
    llp_tol: float                          # current worst-case scan tolerance

    def __post_init__(self):
        if self.restriction <= 0:
            raise ValueError("restriction must be positive")
        if self.llp_tol <= 0:
            raise ValueError("scan tolerance must be positive")
        for ds, (lo, hi) in zip(self.shift_sets, self.shift_bounds):
            if len(ds) and (ds.min() < lo - 1e-9 or ds.max() > hi + 1e-9):
                raise ValueError("shift set outside its admissible window")

    @classmethod
    def initial(cls, requests: Sequence[UserRequest], horizon: float,
                shift_step: float, time_step: float | None,
                n_rows: int, restriction: float,
                llp_tol: float) -> "DiscretizationState":
        """Uniform initial sets: shifts at ``shift_step``, times at ``time_step``.

        ``time_step=None`` starts every row's time set empty.
        """
        shift_sets = []
        bounds = []
        for req in requests:
            lo, hi = req.shift_lo, req.shift_hi
            pts = np.arange(lo, hi + 1e-9, shift_step) if shift_step > 0 else \
                np.array([lo])
            if not len(pts):
                pts = np.array([lo])
            shift_sets.append(np.unique(pts))
            bounds.append((lo, hi))
        if time_step is None:
            times = [np.zeros(0) for _ in range(n_rows)]
        else:
            grid = np.arange(0.0, horizon + 1e-9, time_step)
            times = [grid.copy() for _ in range(n_rows)]
        return cls(shift_sets=tuple(shift_sets), shift_bounds=tuple(bounds),
                   time_sets=tuple(times), restriction=restriction,
                   llp_tol=llp_tol)

    def with_time_sets(self, time_sets) -> "DiscretizationState":
        return replace(self, time_sets=tuple(time_sets))

    def with_restriction(self, restriction: float) -> "DiscretizationState":
        return replace(self, restriction=restriction)

    def with_llp_tol(self, llp_tol: float) -> "DiscretizationState":
        return replace(self, llp_tol=llp_tol)

    def with_shift_sets(self, shift_sets) -> "DiscretizationState":
        return replace(self, shift_sets=tuple(shift_sets))

    @property
    def total_time_points(self) -> int:
        return int(sum(len(t) for t in self.time_sets))

    @property
    def total_shift_points(self) -> int:
        return int(sum(len(d) for d in self.shift_sets))


@dataclass(frozen=True)
class EhsipaParams:
    """Stage-1 algorithm parameters (defaults follow the reference study)."""

    eps_f: float = 5.0
    eps_g0: float = 1e-3
    r_g: float = 1.5
    r_llp: float = 1.2
    eps_lbp: float = 0.5
    eps_ubp: float = 0.5
    eps_res: float = 1e-4
    eps_llp0: float = 0.01
    l_max: int = 10
    k_r_max: int = 10
    max_subproblems: int = 10_000
    wall_clock_limit: float | None = None
    node_limit: int = 200_000

    def __post_init__(self):
        for name in ("eps_f", "eps_g0", "eps_lbp", "eps_ubp", "eps_res",
                     "eps_llp0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.r_g <= 1 or self.r_llp <= 1:
            raise ValueError("reduction ratios must exceed 1")
        if self.l_max < 1 or self.k_r_max < 1:
            raise ValueError("iteration caps must be at least 1")


@dataclass
class StageOneResult:
    schedule: Schedule | None
    upper_bound: float
    lower_bound: float
    state: DiscretizationState
    status: str          # optimal-within-eps-f | feasible-early-stop | failed
    counters: dict
    log: list
    wall_time: float
    report: ViolationReport | None = None

    @property
    def gap(self) -> float:
        return self.upper_bound - self.lower_bound


class BudgetExceeded(RuntimeError):
    """Subproblem-count or wall-clock safety rail tripped."""


class _Run:
    """Shared mutable context for one stage-1 run: budget, counters, log."""

    def __init__(self, sys: LtiSystem, requests, params: EhsipaParams,
                 cache: TrajectoryCache, threads: int):
        self.sys = sys
        self.requests = list(requests)
        self.params = params
        self.cache = cache
        self.threads = threads
        self.t0 = time.perf_counter()
        self.counters = {"LBD": 0, "UBD": 0, "RES": 0, "LLP": 0,
                         "augmentations": 0, "points_added": 0}
        self.runtimes = {"LBD": 0.0, "UBD": 0.0, "RES": 0.0, "LLP": 0.0}
        self.log: list[dict] = []
        self.lower = -np.inf
        self.upper = np.inf

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def charge(self, kind: str):
        total = self.counters["LBD"] + self.counters["UBD"] + self.counters["RES"]
        if total >= self.params.max_subproblems:
            raise BudgetExceeded(f"subproblem budget exhausted at {total}")
        if (self.params.wall_clock_limit is not None
                and self.elapsed() > self.params.wall_clock_limit):
            raise BudgetExceeded("wall-clock budget exhausted")
        self.counters[kind] += 1

    def solve_subproblem(self, kind: str, state: DiscretizationState,
                         opt_tol: float, budget: float | None = None
                         ) -> IlpSolution:
        self.charge(kind)
        t0 = time.perf_counter()
        inst = transcribe(kind, self.sys, self.requests, state.shift_sets,
                          state.time_sets, restriction=state.restriction,
                          budget=budget, cache=self.cache)
        sol = solve_ilp(inst, opt_tol=opt_tol,
                        node_limit=self.params.node_limit)
        wall = time.perf_counter() - t0
        self.runtimes[kind] += wall
        record = {"kind": kind, "status": sol.status,
                  "objective": sol.objective, "proven_bound": sol.proven_bound,
                  "nodes": sol.node_count,
                  "total_time_points": state.total_time_points,
                  "restriction": state.restriction, "llp_tol": state.llp_tol,
                  "lower": self.lower, "upper": self.upper, "wall": wall}
        self.log.append(record)
        logger.debug("subproblem %s", record)
        self._last_instance = inst
        return sol

    def schedule_of(self, sol: IlpSolution) -> Schedule:
        shifts = self._last_instance.selection_shifts(sol.selection)
        return Schedule.checked(shifts, self.requests)

    def llp(self, sched: Schedule, state: DiscretizationState) -> ViolationReport:
        self.counters["LLP"] += 1
        t0 = time.perf_counter()
        report = solve_llp(self.sys, self.requests, sched, state.llp_tol,
                           self.cache, threads=self.threads)
        wall = time.perf_counter() - t0
        self.runtimes["LLP"] += wall
        self.log.append({"kind": "LLP", "status": "done",
                         "objective": report.worst(),
                         "total_time_points": state.total_time_points,
                         "restriction": state.restriction,
                         "llp_tol": state.llp_tol, "lower": self.lower,
                         "upper": self.upper, "wall": wall})
        return report


@dataclass(frozen=True)
class LowerOutcome:
    feasible: bool
    bound: float = -np.inf
    schedule: Schedule | None = None
    report: ViolationReport | None = None
    sip_feasible: bool = False
    cost: float = np.inf


@dataclass(frozen=True)
class UpperOutcome:
    found: bool
    schedule: Schedule | None = None
    report: ViolationReport | None = None
    cost: float = np.inf


@dataclass(frozen=True)
class RefineOutcome:
    outcome: str        # lower-raised | restriction-updated | sets-grown | inconclusive
    schedule: Schedule | None = None
    report: ViolationReport | None = None
    cost: float = np.inf


def lower_bound_step(run: _Run, state: DiscretizationState
                     ) -> tuple[DiscretizationState, LowerOutcome]:
    """Solve the sampled relaxation; grow time sets unless already feasible.

    Returns the infeasibility flag without touching the time sets when the
    relaxation admits no selection, which triggers decision-space
    augmentation in the outer loop.
    """
    sol = run.solve_subproblem("LBD", state, run.params.eps_lbp)
    if sol.status == "infeasible":
        return state, LowerOutcome(feasible=False)
    if sol.selection is None:
        raise BudgetExceeded("lower-bound solve hit the node limit without "
                             "an incumbent")
    sched = run.schedule_of(sol)
    report = run.llp(sched, state)
    cost = sched.cost(run.requests)
    if is_sip_feasible(report):
        return state, LowerOutcome(feasible=True, bound=sol.proven_bound,
                                   schedule=sched, report=report,
                                   sip_feasible=True, cost=cost)
    state = update_constraint_sets(state, report)
    return state, LowerOutcome(feasible=True, bound=sol.proven_bound,
                               schedule=sched, report=report, cost=cost)


def upper_bound_step(run: _Run, state: DiscretizationState
                     ) -> tuple[DiscretizationState, UpperOutcome]:
    """Restricted solves until a continuous-time feasible minimizer appears.

    Infeasible restricted problems shrink the restriction, at most
    ``k_r_max`` consecutive times; then control returns to the lower-bound
    flow.  On acceptance the restriction is reduced one further step.
    """
    kr = 0
    while True:
        sol = run.solve_subproblem("UBD", state, run.params.eps_ubp)
        if sol.status == "infeasible":
            kr += 1
            state = state.with_restriction(state.restriction / run.params.r_g)
            if kr >= run.params.k_r_max:
                return state, UpperOutcome(found=False)
            continue
        if sol.selection is None:
            raise BudgetExceeded("upper-bound solve hit the node limit "
                                 "without an incumbent")
        kr = 0
        sched = run.schedule_of(sol)
        report = run.llp(sched, state)
        if is_sip_feasible(report):
            state = state.with_restriction(state.restriction / run.params.r_g)
            return state, UpperOutcome(found=True, schedule=sched,
                                       report=report,
                                       cost=sched.cost(run.requests))
        state = update_constraint_sets(state, report)


def refinement_step(run: _Run, state: DiscretizationState, f_target: float
                    ) -> tuple[DiscretizationState, RefineOutcome]:
    """One refinement pass against the mid-point target ``f_target``.

    A strictly negative slack optimum (or an infeasible budget row) proves
    the target under-estimates the discretized optimum.  A feasible
    minimizer updates the restriction from the achieved slack.  Otherwise
    the time sets grow, at most ``l_max`` consecutive times.
    """
    for _ in range(run.params.l_max):
        sol = run.solve_subproblem("RES", state, run.params.eps_res,
                                   budget=f_target)
        if sol.status == "infeasible":
            return state, RefineOutcome("lower-raised")
        if sol.status == "unbounded":
            return state, RefineOutcome("inconclusive")
        if sol.selection is None:
            raise BudgetExceeded("refinement solve hit the node limit "
                                 "without an incumbent")
        eta = float(sol.eta)
        if eta < -run.params.eps_res:
            return state, RefineOutcome("lower-raised")
        if abs(eta) <= run.params.eps_res:
            return state, RefineOutcome("inconclusive")
        sched = run.schedule_of(sol)
        report = run.llp(sched, state)
        if is_sip_feasible(report):
            new_restriction = max(eta / run.params.r_g,
                                  state.restriction / run.params.r_g)
            state = state.with_restriction(new_restriction)
            return state, RefineOutcome("restriction-updated", schedule=sched,
                                        report=report,
                                        cost=sched.cost(run.requests))
        state = update_constraint_sets(state, report)
    return state, RefineOutcome("sets-grown")


def augment_decision_spaces(state: DiscretizationState) -> DiscretizationState:
    """Grow every shift set with boundary and consecutive midpoints.

    Duplicates within 1e-9 collapse, so each set at most doubles plus one.
    """
    new_sets = []
    for ds, (lo, hi) in zip(state.shift_sets, state.shift_bounds):
        pts = list(ds)
        extra = [(lo + ds[0]) / 2.0, (ds[-1] + hi) / 2.0]
        extra.extend((a + b) / 2.0 for a, b in zip(ds, ds[1:]))
        merged = np.sort(np.concatenate([pts, extra]))
        keep = np.concatenate([[True], np.diff(merged) > _DUPLICATE_TOL])
        merged = merged[keep]
        if len(merged) > 2 * len(ds) + 1:
            raise AssertionError("augmentation grew a shift set beyond 2N+1")
        new_sets.append(merged)
    return state.with_shift_sets(new_sets)


def run_stage1(sys: LtiSystem, requests: Sequence[UserRequest],
               init_state: DiscretizationState, params: EhsipaParams,
               early_stop: bool = False, cache: TrajectoryCache | None = None,
               threads: int = 1) -> StageOneResult:
    """Run the full stage-1 loop to an eps_f-optimal feasible schedule.

    ``early_stop`` returns the first accepted upper bound (the schedule is
    already continuous-time feasible at that point).  Iteration and
    wall-clock caps turn into a ``failed`` status with diagnostics intact.
    """
    if cache is None:
        cache = TrajectoryCache(sys, requests)
    run = _Run(sys, requests, params, cache, threads)
    state = init_state
    initial_points = state.total_time_points
    best_sched: Schedule | None = None
    best_report: ViolationReport | None = None
    status = "failed"
    mode = "LB"
    lb_entries = 0

    def done_optimal() -> bool:
        return (best_sched is not None
                and run.upper - run.lower <= params.eps_f)

    try:
        while True:
            if mode == "LB":
                if lb_entries > 0:
                    state = state.with_llp_tol(state.llp_tol / params.r_llp)
                lb_entries += 1
                state, out = lower_bound_step(run, state)
                if not out.feasible:
                    state = augment_decision_spaces(state)
                    run.counters["augmentations"] += 1
                    run.lower = -np.inf
                    continue
                run.lower = max(run.lower, out.bound)
                if out.sip_feasible and out.cost < run.upper:
                    run.upper = out.cost
                    best_sched, best_report = out.schedule, out.report
                if done_optimal():
                    status = "optimal-within-eps-f"
                    break
                if early_stop and best_sched is not None:
                    status = "feasible-early-stop"
                    break
                mode = "UB"
            elif mode == "UB":
                state, out = upper_bound_step(run, state)
                if not out.found:
                    mode = "LB"
                    continue
                if out.cost < run.upper:
                    run.upper = out.cost
                    best_sched, best_report = out.schedule, out.report
                if done_optimal():
                    status = "optimal-within-eps-f"
                    break
                if early_stop:
                    status = "feasible-early-stop"
                    break
                mode = "REF"
            else:
                f_target = 0.5 * (run.upper + run.lower)
                state, out = refinement_step(run, state, f_target)
                if out.outcome == "lower-raised":
                    run.lower = max(run.lower, f_target)
                    if done_optimal():
                        status = "optimal-within-eps-f"
                        break
                    mode = "REF"
                elif out.outcome == "restriction-updated":
                    if out.cost < run.upper:
                        run.upper = out.cost
                        best_sched, best_report = out.schedule, out.report
                    if done_optimal():
                        status = "optimal-within-eps-f"
                        break
                    mode = "UB"
                else:
                    mode = "LB"
    except BudgetExceeded as exc:
        logger.warning("stage 1 stopped early: %s", exc)
        status = "failed"
        run.counters["budget_exceeded"] = 1

    run.counters["points_added"] = state.total_time_points - initial_points
    return StageOneResult(schedule=best_sched, upper_bound=run.upper,
                          lower_bound=run.lower, state=state, status=status,
                          counters=dict(run.counters), log=run.log,
                          wall_time=run.elapsed(), report=best_report)
