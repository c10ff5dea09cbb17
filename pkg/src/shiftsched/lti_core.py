"""Exact state responses of an LTI system driven by shifted piecewise-constant loads.

The plant is

    dx/dt = A x + B u0 + sum_j E_j v_j(t - tau_j),    x(0) = x0,

with constant control u0 and per-user load profiles v_j that are piecewise
constant on a finite support.  By superposition the state splits into a
control/initial-condition response and one convolution response per user,

    x(t) = xbar0(t) + sum_j xbar_j(t - tau_j),

and every quantity in this module is computed from matrix exponentials of
augmented block matrices, which stay exact even when A is singular (the
channel application contains pure integrators in open loop).

:class:`TrajectoryCache` holds uniformly sampled copies of the component
responses for fast scanning, plus a memoized exact evaluator used whenever a
value feeds a feasibility verdict.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg


class ConfigurationError(ValueError):
    """Inconsistent problem-building inputs."""


def expm(matrix: np.ndarray, t: float = 1.0) -> np.ndarray:
    """Matrix exponential exp(matrix * t).

    Scaling-and-squaring with a Pade rational core (delegated to
    ``scipy.linalg.expm``).  Relative error is at the 1e-12 level for
    well-conditioned inputs.

    Raises
    ------
    ValueError
        If the input is not square or contains non-finite entries.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expm needs a square matrix, got shape {m.shape}")
    if not np.isfinite(t) or not np.all(np.isfinite(m)):
        raise ValueError("expm requires finite entries")
    if m.shape[0] == 0:
        return np.zeros((0, 0))
    return scipy.linalg.expm(m * float(t))


def step_response_block(a: np.ndarray, g: np.ndarray, t: float) -> np.ndarray:
    """Integral int_0^t exp(A (t - s)) G ds via the augmented block exponential.

    Exponentiates [[A, G], [0, 0]]; the upper-right block of the result is the
    integral.  Never inverts A, so singular A is fine.

    Parameters
    ----------
    a : (n, n) array
    g : (n,) or (n, k) array
    t : float, must be >= 0

    Returns
    -------
    Array with the shape of ``g``.
    """
    if t < 0:
        raise ValueError(f"step_response_block needs t >= 0, got {t}")
    a = np.asarray(a, dtype=float)
    g2 = np.asarray(g, dtype=float)
    squeeze = g2.ndim == 1
    if squeeze:
        g2 = g2[:, None]
    n, k = g2.shape
    if a.shape != (n, n):
        raise ValueError(f"incompatible shapes A{a.shape} G{g2.shape}")
    blk = np.zeros((n + k, n + k))
    blk[:n, :n] = a
    blk[:n, n:] = g2
    out = expm(blk, t)[:n, n:]
    return out[:, 0] if squeeze else out


@dataclass(frozen=True)
class LoadProfile:
    """Piecewise-constant load on [0, duration); zero outside.

    ``segments`` is a sorted tuple of (start, value) pairs; each value holds
    until the next start, the last one until ``duration``.
    """

    segments: tuple[tuple[float, float], ...]
    duration: float

    def __post_init__(self):
        if not self.segments:
            raise ValueError("profile needs at least one segment")
        starts = [s for s, _ in self.segments]
        if starts[0] != 0.0:
            raise ValueError("first segment must start at 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("segment starts must be strictly increasing")
        if self.duration < starts[-1]:
            raise ValueError("duration must cover the last segment start")
        vals = [v for _, v in self.segments]
        if not all(np.isfinite(starts)) or not all(np.isfinite(vals)):
            raise ValueError("profile entries must be finite")

    @classmethod
    def pulse(cls, start: float, width: float, magnitude: float) -> "LoadProfile":
        """Rectangular pulse of the given magnitude on [start, start + width)."""
        if width <= 0:
            raise ValueError("pulse width must be positive")
        if start < 0:
            raise ValueError("pulse start must be >= 0")
        if start == 0.0:
            segs: tuple[tuple[float, float], ...] = ((0.0, magnitude),)
        else:
            segs = ((0.0, 0.0), (start, magnitude))
        return cls(segments=segs, duration=start + width)

    def edges(self) -> list[tuple[float, float]]:
        """Step edges as (time, jump) pairs, including the final drop."""
        out = []
        prev = 0.0
        for start, val in self.segments:
            if val != prev:
                out.append((start, val - prev))
                prev = val
        if prev != 0.0:
            out.append((self.duration, -prev))
        return out

    def value(self, t: float, side: str = "right") -> float:
        """Profile value at ``t``; ``side='left'`` takes the limit from below."""
        if side == "left":
            if t <= 0.0 or t > self.duration:
                return 0.0
            val = 0.0
            for start, v in self.segments:
                if start < t:
                    val = v
            return val
        if t < 0.0 or t >= self.duration:
            return 0.0
        val = 0.0
        for start, v in self.segments:
            if start <= t:
                val = v
        return val


@dataclass(frozen=True)
class UserRequest:
    """One user's rigid load profile, admissible shift window, and shift cost.

    The cost is the quadratic a2*tau^2 + a1*tau + a0, which must be
    nonnegative on [shift_lo, shift_hi] with a2 >= 0.
    """

    profile: LoadProfile
    shift_lo: float
    shift_hi: float
    cost: tuple[float, float, float]

    def __post_init__(self):
        if self.shift_lo > self.shift_hi:
            raise ValueError("shift_lo must be <= shift_hi")
        a2, a1, a0 = self.cost
        if a2 < 0:
            raise ValueError("quadratic cost coefficient must be >= 0")
        lo = min(self.cost_value(self.shift_lo), self.cost_value(self.shift_hi))
        if a2 > 0:
            vertex = -a1 / (2.0 * a2)
            if self.shift_lo <= vertex <= self.shift_hi:
                lo = min(lo, self.cost_value(vertex))
        if lo < -1e-12:
            raise ValueError("shift cost must be nonnegative on the shift window")

    def cost_value(self, tau: float) -> float:
        a2, a1, a0 = self.cost
        return a2 * tau * tau + a1 * tau + a0

    def cost_slope(self, tau: float) -> float:
        a2, a1, _ = self.cost
        return 2.0 * a2 * tau + a1


@dataclass(frozen=True)
class Schedule:
    """Vector of per-user shifts, validated against the shift windows."""

    shifts: np.ndarray

    @classmethod
    def checked(cls, shifts: Sequence[float], requests: Sequence[UserRequest],
                tol: float = 1e-9) -> "Schedule":
        arr = np.asarray(shifts, dtype=float).copy()
        if arr.shape != (len(requests),):
            raise ValueError("one shift per user required")
        for j, (tau, req) in enumerate(zip(arr, requests)):
            if tau < req.shift_lo - tol or tau > req.shift_hi + tol:
                raise ValueError(f"shift {tau} for user {j} outside "
                                 f"[{req.shift_lo}, {req.shift_hi}]")
        arr = np.clip(arr, [r.shift_lo for r in requests],
                      [r.shift_hi for r in requests])
        arr.setflags(write=False)
        return cls(shifts=arr)

    def cost(self, requests: Sequence[UserRequest]) -> float:
        return float(sum(r.cost_value(t) for r, t in zip(requests, self.shifts)))


@dataclass(frozen=True)
class LtiSystem:
    """Plant data: dynamics, load columns, constant control, constraint rows."""

    a: np.ndarray            # (n_x, n_x), 1/min
    b: np.ndarray            # (n_x, n_u)
    e: np.ndarray            # (n_x, m), one load column per user
    x0: np.ndarray           # (n_x,)
    u0: np.ndarray           # (n_u,)
    c_mat: np.ndarray        # (n_c, n_x)
    c_vec: np.ndarray        # (n_c,)
    horizon: float           # minutes

    def __post_init__(self):
        n = self.a.shape[0]
        if self.a.shape != (n, n):
            raise ValueError("A must be square")
        if self.b.ndim != 2 or self.b.shape[0] != n:
            raise ValueError("B row count must match A")
        if self.e.ndim != 2 or self.e.shape[0] != n or self.e.shape[1] < 1:
            raise ValueError("E must be (n_x, m) with m >= 1")
        if self.x0.shape != (n,):
            raise ValueError("x0 size must match A")
        if self.u0.shape != (self.b.shape[1],):
            raise ValueError("u0 size must match B columns")
        if self.c_mat.ndim != 2 or self.c_mat.shape[1] != n or self.c_mat.shape[0] < 1:
            raise ValueError("C must be (n_c, n_x) with n_c >= 1")
        if self.c_vec.shape != (self.c_mat.shape[0],):
            raise ValueError("c size must match C rows")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]

    @property
    def n_c(self) -> int:
        return self.c_mat.shape[0]

    @property
    def m(self) -> int:
        return self.e.shape[1]


def make_system(a, b, e, x0, u0, c_mat, c_vec, horizon) -> LtiSystem:
    """Build an :class:`LtiSystem` from array-likes, copying and locking them."""
    def arr(x, ndim):
        out = np.array(x, dtype=float)
        if out.ndim != ndim:
            raise ValueError(f"expected {ndim}-d array, got {out.ndim}-d")
        out.setflags(write=False)
        return out
    return LtiSystem(a=arr(a, 2), b=arr(b, 2), e=arr(e, 2), x0=arr(x0, 1),
                     u0=arr(u0, 1), c_mat=arr(c_mat, 2), c_vec=arr(c_vec, 1),
                     horizon=float(horizon))


def response_component(sys: LtiSystem, j: int, t: float,
                       profile: LoadProfile) -> np.ndarray:
    """Exact load response xbar_j(t) for user ``j`` carrying ``profile``.

    Causal: returns the zero vector for t <= 0.  The profile decomposes into
    step edges, each contributing jump * int_0^{t-b} exp(A s) E_j ds.
    """
    out = np.zeros(sys.n_x)
    if t <= 0.0:
        return out
    col = sys.e[:, j]
    for edge_time, jump in profile.edges():
        lag = t - edge_time
        if lag > 0.0:
            out += jump * step_response_block(sys.a, col, lag)
    return out


def control_response(sys: LtiSystem, t: float) -> np.ndarray:
    """xbar0(t) = exp(A t) x0 + int_0^t exp(A (t-s)) B u0 ds."""
    if t < 0:
        raise ValueError("control_response needs t >= 0")
    return expm(sys.a, t) @ sys.x0 + step_response_block(sys.a, sys.b @ sys.u0, t)


def state_at(sys: LtiSystem, requests: Sequence[UserRequest], sched: Schedule,
             t: float, cache: "TrajectoryCache | None" = None) -> np.ndarray:
    """State x(t) under the given schedule, by superposition.

    With a cache the memoized exact evaluator is used; otherwise each
    component is computed from scratch.  ``t`` must lie in [0, horizon].
    """
    if t < 0.0 or t > sys.horizon:
        raise ValueError(f"t={t} outside [0, {sys.horizon}]")
    if cache is not None:
        return cache.state(t, np.asarray(sched.shifts, dtype=float))
    x = control_response(sys, t)
    for j, req in enumerate(requests):
        x = x + response_component(sys, j, t - sched.shifts[j], req.profile)
    return x


class _ExactKernel:
    """Exact evaluation of exp(A t) and int_0^t exp(A s) G ds.

    G stacks the constant-control drive B u0 (column 0) and the distinct load
    columns of E, so one augmented-block exponential per distinct time covers
    every response component.  Values are memoized only on request; transient
    query times (line polish, finite differences) would otherwise bloat the
    memo with large arrays.
    """

    def __init__(self, sys: LtiSystem):
        self.sys = sys
        n = sys.n_x
        cols = [sys.b @ sys.u0]
        self.user_col = np.zeros(sys.m, dtype=int)
        distinct: list[np.ndarray] = []
        for j in range(sys.m):
            col = sys.e[:, j]
            found = False
            for k, ref in enumerate(distinct):
                if np.array_equal(ref, col):
                    self.user_col[j] = k + 1
                    found = True
                    break
            if not found:
                distinct.append(col.copy())
                self.user_col[j] = len(distinct)
        cols.extend(distinct)
        self.gblock = np.column_stack(cols)        # (n, 1 + K)
        self.nk = self.gblock.shape[1]
        self._aug = np.zeros((n + self.nk, n + self.nk))
        self._aug[:n, :n] = sys.a
        self._aug[:n, n:] = self.gblock
        self._memo: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def pair(self, t: float, store: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """(exp(A t), int_0^t exp(A s) G ds) at ``t`` >= 0."""
        hit = self._memo.get(t)
        if hit is not None:
            return hit
        n = self.sys.n_x
        big = scipy.linalg.expm(self._aug * t)
        out = (big[:n, :n], big[:n, n:])
        if store:
            self._memo[t] = out
        return out


class TrajectoryCache:
    """Sampled component responses on a uniform grid plus an exact evaluator.

    The grid step halves on :meth:`refine`; regenerated samples agree with the
    previous grid to matrix-exponential accuracy because stepping is exact.
    Off-grid scan queries interpolate linearly (``interpolation`` flag); any
    value feeding a feasibility verdict goes through the exact evaluator.

    Construction is the only mutating phase apart from memo-dict fills; reads
    are safe to share across threads afterwards.
    """

    interpolation = "linear"

    def __init__(self, sys: LtiSystem, requests: Sequence[UserRequest],
                 step: float = 0.1):
        if step <= 0:
            raise ValueError("grid step must be positive")
        if len(requests) != sys.m:
            raise ValueError("one request per load column required")
        self.sys = sys
        self.requests = list(requests)
        self.kernel = _ExactKernel(sys)
        self._user_rows_memo: dict[tuple[int, float], np.ndarray] = {}
        self._base_rows_memo: dict[float, np.ndarray] = {}
        self.step = float(step)
        # shifted-argument range of xbar_j is [-shift_hi, horizon - shift_lo]
        self._spans = [sys.horizon + max(r.shift_hi - r.shift_lo, -r.shift_lo, 0.0)
                       for r in requests]
        self._build_grids()

    # -- construction ------------------------------------------------------

    def _build_grids(self) -> None:
        sys = self.sys
        h = self.step
        n_base = int(np.floor(sys.horizon / h + 1e-9)) + 1
        self.grid_times = np.arange(n_base) * h
        if self.grid_times[-1] < sys.horizon - 1e-9:
            self.grid_times = np.append(self.grid_times, sys.horizon)
        base_states = self._step_base(self.grid_times)
        self.base_rows = sys.c_mat @ base_states          # (n_c, N)
        self.user_rows = []
        for j, req in enumerate(self.requests):
            n_j = int(np.ceil(self._spans[j] / h - 1e-9)) + 2
            times = np.arange(n_j) * h
            states = self._step_user(j, req.profile, times)
            self.user_rows.append(sys.c_mat @ states)     # (n_c, N_j)

    def _step_base(self, times: np.ndarray) -> np.ndarray:
        """Exact x_bar0 samples by stepping with the grid-step exponential."""
        sys = self.sys
        n = sys.n_x
        out = np.empty((n, len(times)))
        x = sys.x0.astype(float).copy()
        out[:, 0] = x
        for k in range(1, len(times)):
            dt = times[k] - times[k - 1]
            exp_a, phi = self.kernel.pair(dt, store=True)
            x = exp_a @ x + phi[:, 0]
            out[:, k] = x
        return out

    def _step_user(self, j: int, profile: LoadProfile,
                   times: np.ndarray) -> np.ndarray:
        """Exact x_bar_j samples; steps split at profile breakpoints."""
        sys = self.sys
        col = self.kernel.user_col[j]
        breaks = sorted({s for s, _ in profile.segments} | {profile.duration})
        out = np.empty((sys.n_x, len(times)))
        x = np.zeros(sys.n_x)
        out[:, 0] = x
        for k in range(1, len(times)):
            t0, t1 = times[k - 1], times[k]
            cuts = [t0] + [b for b in breaks if t0 < b < t1] + [t1]
            for a, b in zip(cuts, cuts[1:]):
                v = profile.value(0.5 * (a + b))
                exp_a, phi = self.kernel.pair(b - a, store=True)
                x = exp_a @ x + v * phi[:, col]
            out[:, k] = x
        return out

    def refine(self) -> None:
        """Halve the grid step and regenerate all sampled trajectories."""
        self.step *= 0.5
        self._build_grids()

    # -- exact evaluation ---------------------------------------------------

    def base_state(self, t: float) -> np.ndarray:
        """Exact xbar0(t)."""
        exp_a, phi = self.kernel.pair(t)
        return exp_a @ self.sys.x0 + phi[:, 0]

    def component(self, j: int, theta: float) -> np.ndarray:
        """Exact xbar_j(theta); zero for theta <= 0."""
        if theta <= 0.0:
            return np.zeros(self.sys.n_x)
        col = self.kernel.user_col[j]
        out = np.zeros(self.sys.n_x)
        for edge_time, jump in self.requests[j].profile.edges():
            lag = theta - edge_time
            if lag > 0.0:
                out += jump * self.kernel.pair(lag)[1][:, col]
        return out

    def state(self, t: float, shifts: np.ndarray) -> np.ndarray:
        """Exact x(t) under ``shifts``."""
        x = self.base_state(t)
        for j in range(self.sys.m):
            x = x + self.component(j, t - shifts[j])
        return x

    def base_row_values(self, t: float) -> np.ndarray:
        """Exact C xbar0(t), memoized per time."""
        hit = self._base_rows_memo.get(t)
        if hit is None:
            hit = self.sys.c_mat @ self.base_state(t)
            self._base_rows_memo[t] = hit
        return hit

    def user_row_values(self, j: int, theta: float) -> np.ndarray:
        """Exact C xbar_j(theta), memoized per (user, time)."""
        key = (j, theta)
        hit = self._user_rows_memo.get(key)
        if hit is None:
            hit = self.sys.c_mat @ self.component(j, theta)
            self._user_rows_memo[key] = hit
        return hit

    def exact_rows(self, t: float, shifts: np.ndarray) -> np.ndarray:
        """Exact C x(t) - c for all constraint rows."""
        vals = self.base_row_values(t).copy()
        for j in range(self.sys.m):
            vals = vals + self.user_row_values(j, t - shifts[j])
        return vals - self.sys.c_vec

    def exact_row(self, i: int, t: float, shifts: np.ndarray) -> float:
        """Exact C_i x(t) - c_i for one constraint row."""
        return float(self.exact_rows(t, shifts)[i])

    # -- sampled scanning ----------------------------------------------------

    def row_samples(self, shifts: np.ndarray) -> np.ndarray:
        """C x(t_k) - c on the grid; shifted components interpolate linearly.

        Shifts that are exact grid multiples read samples without
        interpolation, so stage-1 grid-aligned schedules are exact here.
        """
        out = self.base_rows.copy()
        k_idx = self.grid_times / self.step
        for j in range(self.sys.m):
            rows = self.user_rows[j]
            n_j = rows.shape[1]
            pos = k_idx - shifts[j] / self.step
            base = np.floor(pos).astype(int)
            frac = pos - base
            # snap near-integer positions to avoid spurious interpolation
            snap = frac < 1e-9
            frac = np.where(snap, 0.0, frac)
            snap_hi = frac > 1.0 - 1e-9
            base = np.where(snap_hi, base + 1, base)
            frac = np.where(snap_hi, 0.0, frac)
            valid0 = (base >= 0) & (base <= n_j - 1)
            valid1 = (base + 1 >= 0) & (base + 1 <= n_j - 1) & (frac > 0.0)
            i0 = np.clip(base, 0, n_j - 1)
            i1 = np.clip(base + 1, 0, n_j - 1)
            out += np.where(valid0, (1.0 - frac) * rows[:, i0], 0.0)
            out += np.where(valid1, frac * rows[:, i1], 0.0)
        return out - self.sys.c_vec[:, None]

    def shifted_breakpoints(self, shifts: np.ndarray) -> np.ndarray:
        """Shifted profile breakpoints that land inside [0, horizon]."""
        pts = []
        for j, req in enumerate(self.requests):
            for edge_time, _ in req.profile.edges():
                t = edge_time + shifts[j]
                if 0.0 < t < self.sys.horizon:
                    pts.append(t)
        return np.array(sorted(set(pts)))

    def response(self, shifts: np.ndarray) -> "ScheduleResponse":
        """Exact point evaluator specialized to one fixed schedule."""
        return ScheduleResponse(self, np.asarray(shifts, dtype=float))


class ScheduleResponse:
    """Exact response under one fixed schedule, cheap at arbitrary times.

    The combined load input is piecewise constant with one breakpoint per
    shifted profile edge.  States at the breakpoints are computed once by
    exact stepping; a point query then costs a single augmented exponential
    over the residual interval.
    """

    def __init__(self, cache: TrajectoryCache, shifts: np.ndarray):
        sys = cache.sys
        kernel = cache.kernel
        if shifts.shape != (sys.m,):
            raise ValueError("one shift per user required")
        self.sys = sys
        self.kernel = kernel
        self.shifts = shifts
        cuts = {0.0, sys.horizon}
        for j, req in enumerate(cache.requests):
            for edge_time, _ in req.profile.edges():
                t = edge_time + shifts[j]
                if 0.0 < t < sys.horizon:
                    cuts.add(t)
        self.breaks = np.array(sorted(cuts))
        # weight vector per interval: G @ w reproduces B u0 + sum_j E_j v_j
        n_int = len(self.breaks) - 1
        self.weights = np.zeros((n_int, kernel.nk))
        self.weights[:, 0] = 1.0
        for k in range(n_int):
            mid = 0.5 * (self.breaks[k] + self.breaks[k + 1])
            for j, req in enumerate(cache.requests):
                self.weights[k, kernel.user_col[j]] += \
                    req.profile.value(mid - shifts[j])
        self.knot_states = np.empty((n_int + 1, sys.n_x))
        x = sys.x0.astype(float).copy()
        self.knot_states[0] = x
        for k in range(n_int):
            exp_a, phi = kernel.pair(self.breaks[k + 1] - self.breaks[k],
                                     store=True)
            x = exp_a @ x + phi @ self.weights[k]
            self.knot_states[k + 1] = x

    def _interval(self, t: float) -> int:
        k = int(np.searchsorted(self.breaks, t, side="right")) - 1
        return min(max(k, 0), len(self.breaks) - 2)

    def state(self, t: float) -> np.ndarray:
        """Exact x(t) for t in [0, horizon]."""
        if t < 0.0 or t > self.sys.horizon:
            raise ValueError(f"t={t} outside [0, {self.sys.horizon}]")
        k = self._interval(t)
        theta = t - self.breaks[k]
        if theta == 0.0:
            return self.knot_states[k].copy()
        exp_a, phi = self.kernel.pair(theta)
        return exp_a @ self.knot_states[k] + phi @ self.weights[k]

    def margins(self, t: float) -> np.ndarray:
        """Exact C x(t) - c for all rows."""
        return self.sys.c_mat @ self.state(t) - self.sys.c_vec

    def margin(self, i: int, t: float) -> float:
        return float(self.sys.c_mat[i] @ self.state(t) - self.sys.c_vec[i])

    def dense_margins(self, step: float) -> tuple[np.ndarray, np.ndarray]:
        """Exact margins on a uniform grid of the given step plus breakpoints.

        Returns (times, margins) with margins shaped (n_c, len(times)).
        Stepping is exact per interval, so this doubles as the dense-grid
        verification scan.
        """
        if step <= 0:
            raise ValueError("step must be positive")
        sys = self.sys
        times: list[float] = []
        states: list[np.ndarray] = []
        for k in range(len(self.breaks) - 1):
            t0, t1 = self.breaks[k], self.breaks[k + 1]
            n = max(1, int(np.ceil((t1 - t0) / step - 1e-9)))
            dt = (t1 - t0) / n
            exp_a, phi = self.kernel.pair(dt, store=True)
            drive = phi @ self.weights[k]
            x = self.knot_states[k].copy()
            for r in range(n):
                times.append(t0 + dt * r)
                states.append(x)
                x = exp_a @ x + drive
        times.append(self.breaks[-1])
        states.append(self.knot_states[-1])
        arr = np.column_stack(states)
        return np.array(times), sys.c_mat @ arr - sys.c_vec[:, None]
