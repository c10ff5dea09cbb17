"""State-space model of a cascade of controlled irrigation pools.

Each pool couples a level integrator fed by the delayed upstream gate flow,
a first-order Pade stand-in for the transport delay, and a local PI-with-lag
level controller plus a feedforward of the downstream gate flow:

    level:      dy_i/dt = c_in_i * w_i - c_out_i * q_{i+1} - c_out_i * o_i
    delay:      w_i = z_i - q_i,   dz_i/dt = -(2/t_d_i) z_i + (4/t_d_i) q_i
    controller: q_i = kappa_i * xi1_i + kappa_i (phi_i - rho_i)/rho_i * xi2_i
                      + gamma_i * q_{i+1}
                dxi1_i/dt = u_i - y_i
                dxi2_i/dt = -(1/rho_i) xi2_i + u_i - y_i

The Pade substitution is exp(-t_d s) ~ (1 - t_d s / 2) / (1 + t_d s / 2),
realized as w = -q + z above.  The most-downstream pool has no gate outflow
term (q_{N+1} = 0); off-takes are the only remaining drain there.

State ordering is four per pool: [level, pade, controller-integrator,
controller-lag].  Constraint rows come in pairs per pool: level <= hi then
-level <= -lo.  Off-takes map one per user to load columns of -c_out_i into
the pool's level equation, ordered pool-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lti_core import (ConfigurationError, LoadProfile, LtiSystem, UserRequest,
                       make_system)


class ModelError(RuntimeError):
    """Structurally invalid model (e.g. no forced equilibrium)."""


@dataclass(frozen=True)
class PoolParams:
    """Physical and controller parameters of one pool."""

    c_in: float          # 1/(min sqrt(m))
    c_out: float         # 1/(min sqrt(m))
    t_d: float           # transport delay, minutes
    kappa: float
    phi: float
    rho: float
    gamma: float         # feedforward gain on the downstream gate flow
    level_lo: float      # meters
    level_hi: float      # meters

    def __post_init__(self):
        if self.c_in <= 0 or self.c_out <= 0:
            raise ConfigurationError("discharge rates must be positive")
        if self.t_d <= 0:
            raise ConfigurationError("transport delay must be positive")
        if self.rho <= 0:
            raise ConfigurationError("controller lag rho must be positive")
        if not self.level_lo < self.level_hi:
            raise ConfigurationError("level envelope must satisfy lo < hi")


@dataclass(frozen=True)
class OfftakeParams:
    """One requested off-take: pulse shape, shift window, quadratic cost weight."""

    start: float         # requested start, minutes
    width: float         # duration, minutes
    magnitude: float     # flow-proportional (discharge coefficient absorbed)
    shift_lo: float
    shift_hi: float
    cost_weight: float   # h(tau) = cost_weight * tau^2

    def __post_init__(self):
        if self.width <= 0:
            raise ConfigurationError("off-take duration must be positive")
        if self.magnitude < 0:
            raise ConfigurationError("off-take magnitude must be >= 0")
        if not (self.shift_lo <= 0.0 <= self.shift_hi):
            raise ConfigurationError("shift window must contain 0")
        if self.cost_weight < 0:
            raise ConfigurationError("cost weight must be >= 0")


def build_channel(pools: Sequence[PoolParams],
                  offtakes: Sequence[Sequence[OfftakeParams]],
                  horizon: float,
                  setpoint: float) -> tuple[LtiSystem, list[UserRequest]]:
    """Assemble the cascade model and its user requests.

    Parameters
    ----------
    pools : pool parameter list, upstream first
    offtakes : per-pool lists of off-take requests (may be empty)
    horizon : scheduling horizon in minutes
    setpoint : common water-level reference in meters

    Returns
    -------
    (system, requests) with n_x = 4 * #pools, one load column per off-take,
    and 2 * #pools envelope constraint rows.  The initial state is the
    zero-load equilibrium, so levels start at the set-point.
    """
    n_pools = len(pools)
    if n_pools < 1:
        raise ConfigurationError("need at least one pool")
    if len(offtakes) != n_pools:
        raise ConfigurationError("need one off-take list per pool")
    n_x = 4 * n_pools
    a = np.zeros((n_x, n_x))
    b = np.zeros((n_x, n_pools))

    def gate_flow_coeffs(i: int) -> np.ndarray:
        """State coefficients of q_i (zero vector for i == n_pools)."""
        row = np.zeros(n_x)
        gain = 1.0
        for k in range(i, n_pools):
            p = pools[k]
            row[4 * k + 2] += gain * p.kappa
            row[4 * k + 3] += gain * p.kappa * (p.phi - p.rho) / p.rho
            gain *= p.gamma
        return row

    for i, p in enumerate(pools):
        base = 4 * i
        q_i = gate_flow_coeffs(i)
        q_next = gate_flow_coeffs(i + 1) if i + 1 < n_pools else np.zeros(n_x)
        # level: inflow through the Pade-delayed gate flow, outflow downstream
        a[base] = -p.c_in * q_i - p.c_out * q_next
        a[base, base + 1] += p.c_in
        # Pade state
        a[base + 1] = (4.0 / p.t_d) * q_i
        a[base + 1, base + 1] += -2.0 / p.t_d
        # controller integrator and lag, both driven by the level error
        a[base + 2, base] = -1.0
        a[base + 3, base] = -1.0
        a[base + 3, base + 3] = -1.0 / p.rho
        b[base + 2, i] = 1.0
        b[base + 3, i] = 1.0

    m = sum(len(group) for group in offtakes)
    if m < 1:
        raise ConfigurationError("need at least one off-take")
    e = np.zeros((n_x, m))
    requests: list[UserRequest] = []
    col = 0
    for i, group in enumerate(offtakes):
        for off in group:
            e[4 * i, col] = -pools[i].c_out
            requests.append(UserRequest(
                profile=LoadProfile.pulse(off.start, off.width, off.magnitude),
                shift_lo=off.shift_lo,
                shift_hi=off.shift_hi,
                cost=(off.cost_weight, 0.0, 0.0)))
            col += 1

    n_c = 2 * n_pools
    c_mat = np.zeros((n_c, n_x))
    c_vec = np.zeros(n_c)
    for i, p in enumerate(pools):
        c_mat[2 * i, 4 * i] = 1.0
        c_vec[2 * i] = p.level_hi
        c_mat[2 * i + 1, 4 * i] = -1.0
        c_vec[2 * i + 1] = -p.level_lo

    u0 = np.full(n_pools, float(setpoint))
    sys = make_system(a, b, e, np.zeros(n_x), u0, c_mat, c_vec, horizon)
    x0 = equilibrium_state(sys)
    return make_system(a, b, e, x0, u0, c_mat, c_vec, horizon), requests


def equilibrium_state(sys: LtiSystem) -> np.ndarray:
    """State with dx/dt = 0 under the constant control and zero loads."""
    try:
        x0 = np.linalg.solve(sys.a, -(sys.b @ sys.u0))
    except np.linalg.LinAlgError as exc:
        raise ModelError("closed loop has no unique forced equilibrium") from exc
    residual = np.abs(sys.a @ x0 + sys.b @ sys.u0).max()
    if not np.isfinite(residual) or residual > 1e-8 * (1.0 + np.abs(x0).max()):
        raise ModelError("equilibrium solve failed to converge")
    return x0
