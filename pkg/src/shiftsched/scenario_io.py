"""Scenario files, the two-stage driver, and the bound-chain report.

Scenarios are single JSON documents with unit-bearing field names.  Two kinds
exist: ``channel`` (pool cascade built by :mod:`channel_model`) and ``raw``
(explicit matrices plus user requests, used by the bundled synthetic toy).
The driver runs stage 1, optionally stage 2, re-verifies the final schedule
with a dense scan, and assembles the certificate chain

    unconstrained lower bound <= final cost <= stage-1 upper bound,

which is asserted on every successful run.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel_model import OfftakeParams, PoolParams, build_channel
from .constraint_eval import ViolationReport, verify_schedule
from .ehsipa import (DiscretizationState, EhsipaParams, StageOneResult,
                     run_stage1)
from .ilp_solver import solve_ilp, transcribe
from .lti_core import (ConfigurationError, LoadProfile, LtiSystem, Schedule,
                       TrajectoryCache, UserRequest, make_system)
from .sqp_refine import SqpParams, run_stage2

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """Stage failure or broken certificate chain."""


#: initial uniform discretization per study configuration:
#: (shift step, time step); None means an empty initial time set.
CONFIGURATIONS: dict[int, tuple[float, float | None]] = {
    1: (60.0, 15.0),
    2: (30.0, 15.0),
    3: (15.0, 15.0),
    4: (5.0, 15.0),
    5: (15.0, None),
    6: (15.0, 30.0),
    7: (15.0, 1.0),
    9: (15.0, 0.25),
}
RECENTER_CONFIG = 8          # rerun of config 2 recentred at its optimum
UNIFORM_BASELINE_CONFIG = 9  # single lower-bound solve, no updates


@dataclass(frozen=True)
class ScenarioFile:
    """Parsed scenario: problem data plus default discretization/overrides."""

    kind: str
    name: str
    horizon: float
    shift_step: float
    time_step: float | None
    pools: tuple[PoolParams, ...] = ()
    offtakes: tuple[tuple[OfftakeParams, ...], ...] = ()
    setpoint: float = 0.0
    dynamics: dict | None = None
    users: tuple[dict, ...] = ()
    ehsipa_overrides: dict = field(default_factory=dict)
    sqp_overrides: dict = field(default_factory=dict)

    def build(self) -> tuple[LtiSystem, list[UserRequest]]:
        """Materialize the plant and requests."""
        if self.kind == "channel":
            return build_channel(list(self.pools),
                                 [list(g) for g in self.offtakes],
                                 self.horizon, self.setpoint)
        dyn = self.dynamics
        e_cols = np.column_stack([np.asarray(u["load_column"], dtype=float)
                                  for u in self.users])
        sys = make_system(dyn["a"], dyn["b"], e_cols, dyn["x0"], dyn["u0"],
                          dyn["c_mat"], dyn["c_vec"], self.horizon)
        requests = []
        for u in self.users:
            prof = u["profile"]
            requests.append(UserRequest(
                profile=LoadProfile(
                    segments=tuple((float(s), float(v))
                                   for s, v in prof["segments"]),
                    duration=float(prof["duration_minutes"])),
                shift_lo=float(u["shift_lo_minutes"]),
                shift_hi=float(u["shift_hi_minutes"]),
                cost=tuple(float(c) for c in u["cost"])))
        return sys, requests

    def ehsipa_params(self, extra: dict | None = None) -> EhsipaParams:
        kw = dict(self.ehsipa_overrides)
        kw.update(extra or {})
        return EhsipaParams(**kw)

    def sqp_params(self, extra: dict | None = None) -> SqpParams:
        kw = dict(self.sqp_overrides)
        kw.update(extra or {})
        return SqpParams(**kw)


def parse_scenario(doc: dict) -> ScenarioFile:
    """Validate and load a scenario document."""
    try:
        kind = doc["kind"]
        if kind not in ("channel", "raw"):
            raise ConfigurationError(f"unknown scenario kind {kind!r}")
        disc = doc.get("discretization", {})
        time_step = disc.get("time_step_minutes")
        common = dict(
            kind=kind,
            name=str(doc.get("name", "scenario")),
            horizon=float(doc["horizon_minutes"]),
            shift_step=float(disc.get("shift_step_minutes", 15.0)),
            time_step=None if time_step in (None, "none") else float(time_step),
            ehsipa_overrides=dict(doc.get("params", {}).get("ehsipa", {})),
            sqp_overrides=dict(doc.get("params", {}).get("sqp", {})),
        )
        if kind == "channel":
            pools = tuple(PoolParams(
                c_in=float(p["c_in"]), c_out=float(p["c_out"]),
                t_d=float(p["delay_minutes"]), kappa=float(p["kappa"]),
                phi=float(p["phi"]), rho=float(p["rho"]),
                gamma=float(p["feedforward_gain"]),
                level_lo=float(p["level_lo_meters"]),
                level_hi=float(p["level_hi_meters"]))
                for p in doc["pools"])
            offtakes = tuple(tuple(OfftakeParams(
                start=float(o["start_minutes"]),
                width=float(o["duration_minutes"]),
                magnitude=float(o["magnitude"]),
                shift_lo=float(o["shift_lo_minutes"]),
                shift_hi=float(o["shift_hi_minutes"]),
                cost_weight=float(o["cost_weight"]))
                for o in group) for group in doc["offtakes"])
            return ScenarioFile(pools=pools, offtakes=offtakes,
                                setpoint=float(doc["setpoint_meters"]),
                                **common)
        return ScenarioFile(dynamics=doc["dynamics"],
                            users=tuple(doc["users"]), **common)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"malformed scenario document: {exc}") from exc


def scenario_to_dict(scn: ScenarioFile) -> dict:
    """Serialize back to the document form (parse round-trips exactly)."""
    disc = {"shift_step_minutes": scn.shift_step,
            "time_step_minutes": "none" if scn.time_step is None
            else scn.time_step}
    doc: dict = {"kind": scn.kind, "name": scn.name,
                 "horizon_minutes": scn.horizon, "discretization": disc}
    if scn.kind == "channel":
        doc["setpoint_meters"] = scn.setpoint
        doc["pools"] = [{
            "c_in": p.c_in, "c_out": p.c_out, "delay_minutes": p.t_d,
            "kappa": p.kappa, "phi": p.phi, "rho": p.rho,
            "feedforward_gain": p.gamma, "level_lo_meters": p.level_lo,
            "level_hi_meters": p.level_hi} for p in scn.pools]
        doc["offtakes"] = [[{
            "start_minutes": o.start, "duration_minutes": o.width,
            "magnitude": o.magnitude, "shift_lo_minutes": o.shift_lo,
            "shift_hi_minutes": o.shift_hi, "cost_weight": o.cost_weight}
            for o in group] for group in scn.offtakes]
    else:
        doc["dynamics"] = scn.dynamics
        doc["users"] = list(scn.users)
    if scn.ehsipa_overrides or scn.sqp_overrides:
        doc["params"] = {}
        if scn.ehsipa_overrides:
            doc["params"]["ehsipa"] = dict(scn.ehsipa_overrides)
        if scn.sqp_overrides:
            doc["params"]["sqp"] = dict(scn.sqp_overrides)
    return doc


def load_scenario(path: str | Path) -> ScenarioFile:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(json.load(fh))


def save_scenario(scn: ScenarioFile, path: str | Path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scn), fh, indent=1)
        fh.write("\n")
    tmp.replace(path)


def bundled_scenario(name: str) -> ScenarioFile:
    """Load one of the packaged scenarios by stem name."""
    ref = resources.files("shiftsched").joinpath(f"scenarios/{name}.json")
    return parse_scenario(json.loads(ref.read_text(encoding="utf-8")))


def unconstrained_lower_bound(requests: Sequence[UserRequest]) -> float:
    """Sum of per-user cost minima over the shift windows (dynamics ignored)."""
    total = 0.0
    for req in requests:
        a2, a1, _ = req.cost
        candidates = [req.shift_lo, req.shift_hi]
        if a2 > 0:
            vertex = -a1 / (2.0 * a2)
            if req.shift_lo <= vertex <= req.shift_hi:
                candidates.append(vertex)
        total += min(req.cost_value(t) for t in candidates)
    return total


@dataclass
class RunReport:
    """Everything a run produced: schedules, bounds, logs, plot samples."""

    scenario_name: str
    config_label: str
    status: str
    stage1: StageOneResult | None
    stage2_trace: list
    schedule: Schedule | None
    final_cost: float
    bounds: dict
    verification: ViolationReport | None
    monitors: list          # [{name, values, lo, hi}] sampled on plot_times
    plot_times: np.ndarray
    offtake_series: list    # [{name, requested, scheduled}] on plot_times
    runtimes: dict
    log: list
    wall_time: float
    requests: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.verification is not None and \
            bool(np.all(self.verification.margins <= 0.0))


def _initial_state(scn: ScenarioFile, requests, n_rows: int,
                   params: EhsipaParams,
                   config: int | None) -> DiscretizationState:
    shift_step, time_step = scn.shift_step, scn.time_step
    if config is not None:
        if config == RECENTER_CONFIG:
            shift_step, time_step = CONFIGURATIONS[2]
        else:
            shift_step, time_step = CONFIGURATIONS[config]
    return DiscretizationState.initial(
        requests, scn.horizon, shift_step=shift_step, time_step=time_step,
        n_rows=n_rows, restriction=params.eps_g0, llp_tol=params.eps_llp0)


def _plot_samples(sys: LtiSystem, requests, cache: TrajectoryCache,
                  sched: Schedule, scn: ScenarioFile,
                  step: float) -> tuple[np.ndarray, list, list]:
    resp = cache.response(np.asarray(sched.shifts, dtype=float))
    times, margins = resp.dense_margins(step)
    monitors = []
    if scn.kind == "channel":
        for i in range(len(scn.pools)):
            monitors.append({
                "name": f"level_{i + 1}",
                "values": margins[2 * i] + sys.c_vec[2 * i],
                "lo": -sys.c_vec[2 * i + 1],
                "hi": sys.c_vec[2 * i]})
    else:
        for i in range(sys.n_c):
            monitors.append({
                "name": f"row_{i + 1}",
                "values": margins[i] + sys.c_vec[i],
                "lo": None,
                "hi": sys.c_vec[i]})
    offtakes = []
    for j, req in enumerate(requests):
        requested = np.array([req.profile.value(t) for t in times])
        scheduled = np.array([req.profile.value(t - sched.shifts[j])
                              for t in times])
        offtakes.append({"name": f"user_{j + 1}", "requested": requested,
                         "scheduled": scheduled})
    return times, monitors, offtakes


def _uniform_baseline(scn: ScenarioFile, sys, requests, cache, params,
                      threads: int, t0: float) -> RunReport:
    """Single lower-bound solve on the dense uniform sets, no updates."""
    state = _initial_state(scn, requests, sys.n_c, params,
                           UNIFORM_BASELINE_CONFIG)
    t_solve = time.perf_counter()
    inst = transcribe("LBD", sys, requests, state.shift_sets, state.time_sets,
                      cache=cache)
    sol = solve_ilp(inst, opt_tol=params.eps_lbp, node_limit=params.node_limit)
    wall_solve = time.perf_counter() - t_solve
    sched = None
    verification = None
    monitors: list = []
    offtakes: list = []
    times = np.zeros(0)
    cost = np.inf
    status = "uniform-baseline-infeasible"
    if sol.selection is not None:
        sched = Schedule.checked(inst.selection_shifts(sol.selection), requests)
        cost = sched.cost(requests)
        verification = verify_schedule(sys, requests, sched, cache)
        times, monitors, offtakes = _plot_samples(
            sys, requests, cache, sched, scn, max(scn.horizon / 1440.0, 0.25))
        status = "uniform-baseline"
    return RunReport(
        scenario_name=scn.name, config_label="9", status=status,
        stage1=None, stage2_trace=[], schedule=sched, final_cost=cost,
        bounds={"unconstrained_lower": unconstrained_lower_bound(requests),
                "baseline_objective": cost},
        verification=verification, monitors=monitors, plot_times=times,
        offtake_series=offtakes,
        runtimes={"LBD": wall_solve, "UBD": 0.0, "RES": 0.0, "LLP": 0.0,
                  "stage2": 0.0, "overhead": time.perf_counter() - t0 - wall_solve},
        log=[{"kind": "LBD", "status": sol.status, "objective": sol.objective,
              "proven_bound": sol.proven_bound, "nodes": sol.node_count,
              "total_time_points": state.total_time_points,
              "restriction": state.restriction, "llp_tol": state.llp_tol,
              "lower": sol.proven_bound, "upper": np.inf, "wall": wall_solve}],
        wall_time=time.perf_counter() - t0, requests=list(requests))


def run_pipeline(scn: ScenarioFile, config: int | None = None,
                 stage1_only: bool = False, early_stop: bool = False,
                 threads: int = 1, verify_step: float = 0.01,
                 cache_step: float = 0.1,
                 ehsipa_overrides: dict | None = None,
                 sqp_overrides: dict | None = None) -> RunReport:
    """Build the model, run both stages, verify, and assemble the report.

    ``config`` picks one of the nine study initializations (8 = recentred
    rerun of 2, 9 = single dense lower-bound solve); None uses the
    scenario's own discretization block.
    """
    t0 = time.perf_counter()
    sys, requests = scn.build()
    cache = TrajectoryCache(sys, requests, step=cache_step)
    params = scn.ehsipa_params(ehsipa_overrides)
    sqp_params = scn.sqp_params(sqp_overrides)

    if config == UNIFORM_BASELINE_CONFIG:
        return _uniform_baseline(scn, sys, requests, cache, params, threads, t0)

    state = _initial_state(scn, requests, sys.n_c, params, config)
    stage1 = run_stage1(sys, requests, state, params, early_stop=early_stop,
                        cache=cache, threads=threads)
    if config == RECENTER_CONFIG and stage1.schedule is not None:
        stage1 = _recenter_stage1(scn, sys, requests, cache, params,
                                  stage1, new_shift_step=2.5, window=30.0,
                                  early_stop=early_stop, threads=threads)
    if stage1.schedule is None:
        raise PipelineError(f"stage 1 failed: status {stage1.status}, "
                            f"counters {stage1.counters}")

    sched = stage1.schedule
    trace: list = []
    t_stage2 = time.perf_counter()
    if not stage1_only:
        sched, trace = run_stage2(sys, requests, stage1.schedule, sqp_params,
                                  cache, threads=threads)
    wall_stage2 = time.perf_counter() - t_stage2

    verification = verify_schedule(sys, requests, sched, cache,
                                   step=verify_step)
    final_cost = sched.cost(requests)
    f_lower = unconstrained_lower_bound(requests)
    stage1_cost = stage1.schedule.cost(requests)
    bounds = {
        "unconstrained_lower": f_lower,
        "stage1_lower": stage1.lower_bound,
        "stage1_upper": stage1.upper_bound,
        "stage1_cost": stage1_cost,
        "final_cost": final_cost,
        "eps_f": params.eps_f,
    }
    if not (f_lower <= final_cost + 1e-9
            and final_cost <= stage1_cost + 1e-9):
        raise PipelineError(f"bound chain violated: {bounds}")
    if not np.all(verification.margins <= 0.0):
        raise PipelineError("final schedule failed dense verification: "
                            f"worst margin {verification.worst():.3e}")

    times, monitors, offtakes = _plot_samples(
        sys, requests, cache, sched, scn, max(scn.horizon / 1440.0, 0.25))
    runtimes = _stage1_runtimes(stage1)
    runtimes["stage2"] = wall_stage2
    wall_total = time.perf_counter() - t0
    runtimes["overhead"] = max(0.0, wall_total - sum(runtimes.values()))
    return RunReport(
        scenario_name=scn.name,
        config_label=str(config) if config is not None else "custom",
        status=stage1.status, stage1=stage1, stage2_trace=trace,
        schedule=sched, final_cost=final_cost, bounds=bounds,
        verification=verification, monitors=monitors, plot_times=times,
        offtake_series=offtakes, runtimes=runtimes, log=stage1.log,
        wall_time=wall_total, requests=list(requests))


def _stage1_runtimes(stage1: StageOneResult) -> dict:
    out = {"LBD": 0.0, "UBD": 0.0, "RES": 0.0, "LLP": 0.0}
    for rec in stage1.log:
        kind = rec.get("kind")
        if kind in out:
            out[kind] += float(rec.get("wall", 0.0))
    return out


def _recenter_stage1(scn, sys, requests, cache, params, prev: StageOneResult,
                     new_shift_step: float, window: float,
                     early_stop: bool, threads: int) -> StageOneResult:
    state = recentered_state(requests, prev.schedule, scn, params,
                             new_shift_step, window, sys.n_c)
    rerun = run_stage1(sys, requests, state, params, early_stop=early_stop,
                       cache=cache, threads=threads)
    # merge logs so runtime accounting covers both passes
    rerun.log[:0] = prev.log
    for key, val in prev.counters.items():
        rerun.counters[key] = rerun.counters.get(key, 0) + val
    rerun.wall_time += prev.wall_time
    if rerun.schedule is None or (prev.schedule is not None and
                                  prev.schedule.cost(requests) <
                                  rerun.schedule.cost(requests)):
        return prev
    return rerun


def recentered_state(requests, schedule: Schedule, scn: ScenarioFile,
                     params: EhsipaParams, new_shift_step: float,
                     window: float, n_rows: int) -> DiscretizationState:
    """Shift sets of the same cardinality centred at a previous optimum."""
    shift_sets = []
    bounds = []
    for req, tau in zip(requests, schedule.shifts):
        pts = np.arange(tau - window, tau + window + 1e-9, new_shift_step)
        pts = np.clip(pts, req.shift_lo, req.shift_hi)
        pts = np.unique(pts)
        shift_sets.append(pts)
        bounds.append((req.shift_lo, req.shift_hi))
    _, time_step = CONFIGURATIONS[2]
    grid = np.arange(0.0, scn.horizon + 1e-9, time_step)
    return DiscretizationState(
        shift_sets=tuple(shift_sets), shift_bounds=tuple(bounds),
        time_sets=tuple(grid.copy() for _ in range(n_rows)),
        restriction=params.eps_g0, llp_tol=params.eps_llp0)


def recenter_and_rerun(scn: ScenarioFile, prev: RunReport,
                       new_shift_step: float, window: float = 30.0,
                       threads: int = 1) -> RunReport:
    """Rerun stage 1 with shift sets centred at the previous schedule."""
    if prev.schedule is None:
        raise ValueError("previous run has no schedule to recentre on")
    t0 = time.perf_counter()
    sys, requests = scn.build()
    cache = TrajectoryCache(sys, requests)
    params = scn.ehsipa_params()
    state = recentered_state(requests, prev.schedule, scn, params,
                             new_shift_step, window, sys.n_c)
    stage1 = run_stage1(sys, requests, state, params, cache=cache,
                        threads=threads)
    if stage1.schedule is None:
        raise PipelineError(f"recentred stage 1 failed: {stage1.status}")
    sched = stage1.schedule
    verification = verify_schedule(sys, requests, sched, cache)
    times, monitors, offtakes = _plot_samples(
        sys, requests, cache, sched, scn, max(scn.horizon / 1440.0, 0.25))
    final_cost = sched.cost(requests)
    runtimes = _stage1_runtimes(stage1)
    runtimes["stage2"] = 0.0
    wall_total = time.perf_counter() - t0
    runtimes["overhead"] = max(0.0, wall_total - sum(runtimes.values()))
    return RunReport(
        scenario_name=scn.name, config_label="recentered",
        status=stage1.status, stage1=stage1, stage2_trace=[],
        schedule=sched, final_cost=final_cost,
        bounds={"unconstrained_lower": unconstrained_lower_bound(requests),
                "stage1_lower": stage1.lower_bound,
                "stage1_upper": stage1.upper_bound,
                "stage1_cost": final_cost, "final_cost": final_cost,
                "eps_f": params.eps_f},
        verification=verification, monitors=monitors, plot_times=times,
        offtake_series=offtakes, runtimes=runtimes, log=stage1.log,
        wall_time=wall_total, requests=list(requests))
