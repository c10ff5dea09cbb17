"""Binary linear programs over one-hot shift selections, solved in-tree.

The finite subproblems of the hybrid loop (lower bound, restricted upper
bound, refinement) all share one shape: pick exactly one shift per user from
its discretized set, subject to stacked linear constraint rows built from the
cached load responses.  ``transcribe`` builds that instance; ``solve_ilp``
runs a best-first branch-and-bound on LP relaxations with SOS1-style interval
branching (split a group's support in half).  The refinement variant carries
one free continuous column (the uniform restriction level) which is never
branched.

Tie-breaking is deterministic everywhere: lowest index wins, and incumbents
with equal objective prefer the lexicographically smaller selection.
Feasibility of integer candidates is certified by exact residual recomputes
at 1e-9 rather than trusting LP tolerances.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse
from scipy.optimize import linprog

from .lti_core import ConfigurationError, LtiSystem, TrajectoryCache, UserRequest

_KINDS = ("LBD", "UBD", "RES")
_RESIDUAL_TOL = 1e-9
_INT_TOL = 1e-7
_LP_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
    "presolve": True,
}


@dataclass
class IlpInstance:
    """One-hot selection problem with stacked linear rows.

    ``blocks[j]`` holds the constraint coefficients of group ``j`` (shape
    (n_rows, N_j)); selecting column l of every group must satisfy
    sum_j blocks[j][:, l_j] <= rhs.  For the refinement kind a free scalar
    enters every row with coefficient +1 and the objective is its negative;
    a budget row bounds the summed selection cost instead.
    """

    kind: str
    group_sizes: tuple[int, ...]
    costs: list[np.ndarray]                   # f_j, one per group
    blocks: list[np.ndarray]                  # (n_rows, N_j) per group
    rhs: np.ndarray                           # (n_rows,)
    choices: list[np.ndarray]                 # shift value per column, per group
    row_meta: tuple[tuple[int, float], ...]   # (constraint row, sample time)
    budget_rhs: float | None = None
    has_eta: bool = False

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)

    @property
    def n_binaries(self) -> int:
        return int(sum(self.group_sizes))

    def selection_cost(self, selection: Sequence[int]) -> float:
        return float(sum(f[l] for f, l in zip(self.costs, selection)))

    def selection_shifts(self, selection: Sequence[int]) -> np.ndarray:
        return np.array([c[l] for c, l in zip(self.choices, selection)])

    def residuals(self, selection: Sequence[int]) -> np.ndarray:
        """Row left-hand sides minus rhs for an integer selection (eta at 0)."""
        if self.n_rows == 0:
            return np.zeros(0)
        lhs = np.zeros(self.n_rows)
        for blk, l in zip(self.blocks, selection):
            lhs += blk[:, l]
        return lhs - self.rhs

    def lp_text(self) -> str:
        """Instance dump in LP text format, for external cross-checks."""
        def var(j, l):
            return f"z_{j}_{l}"

        lines = [f"\\ {self.kind} one-hot instance", "Minimize"]
        terms = []
        for j, f in enumerate(self.costs):
            if self.kind != "RES":
                terms.extend(f"{f[l]:+.17g} {var(j, l)}" for l in range(len(f)))
        if self.has_eta:
            terms.append("-1 eta")
        lines.append(" obj: " + " ".join(terms))
        lines.append("Subject To")
        for r in range(self.n_rows):
            terms = []
            for j in range(self.n_groups):
                col = self.blocks[j][r]
                terms.extend(f"{col[l]:+.17g} {var(j, l)}"
                             for l in range(len(col)) if col[l] != 0.0)
            if self.has_eta:
                terms.append("+1 eta")
            lines.append(f" r{r}: " + " ".join(terms) + f" <= {self.rhs[r]:.17g}")
        if self.budget_rhs is not None:
            terms = []
            for j, f in enumerate(self.costs):
                terms.extend(f"{f[l]:+.17g} {var(j, l)}" for l in range(len(f)))
            lines.append(" budget: " + " ".join(terms) +
                         f" <= {self.budget_rhs:.17g}")
        for j, size in enumerate(self.group_sizes):
            terms = " + ".join(var(j, l) for l in range(size))
            lines.append(f" onehot_{j}: {terms} = 1")
        if self.has_eta:
            lines.append("Bounds")
            lines.append(" eta free")
        lines.append("Binaries")
        lines.append(" " + " ".join(var(j, l) for j, size in
                                    enumerate(self.group_sizes)
                                    for l in range(size)))
        lines.append("End")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class IlpSolution:
    objective: float
    selection: tuple[int, ...] | None
    status: str                   # optimal | infeasible | node-limit | unbounded
    node_count: int
    bound_gap: float
    proven_bound: float
    eta: float | None = None


def transcribe(kind: str, sys: LtiSystem, requests: Sequence[UserRequest],
               shift_sets: Sequence[np.ndarray],
               time_sets: Sequence[np.ndarray],
               restriction: float = 0.0,
               budget: float | None = None,
               cache: TrajectoryCache | None = None) -> IlpInstance:
    """Build the binary program for one subproblem kind.

    Row order is constraint-major: all sample times of row 0, then row 1,
    and so on.  The upper-bound kind tightens every right-hand side by
    ``restriction``; the refinement kind instead adds the free restriction
    column and a budget row at ``budget``.
    """
    if kind not in _KINDS:
        raise ValueError(f"unknown subproblem kind {kind!r}")
    if len(shift_sets) != sys.m or len(time_sets) != sys.n_c:
        raise ConfigurationError("one shift set per user and one time set "
                                 "per constraint row required")
    for j, ds in enumerate(shift_sets):
        if len(ds) == 0:
            raise ConfigurationError(f"empty shift set for user {j}")
    if cache is None:
        cache = TrajectoryCache(sys, requests)
    if kind == "RES" and budget is None:
        raise ValueError("refinement transcription needs a budget")

    costs = [np.array([req.cost_value(float(t)) for t in ds])
             for req, ds in zip(requests, shift_sets)]
    choices = [np.asarray(ds, dtype=float).copy() for ds in shift_sets]

    meta = [(i, float(t)) for i in range(sys.n_c) for t in time_sets[i]]
    n_rows = len(meta)
    tighten = restriction if kind == "UBD" else 0.0
    rhs = np.empty(n_rows)
    blocks = [np.empty((n_rows, len(ds))) for ds in shift_sets]
    for r, (i, t) in enumerate(meta):
        rhs[r] = sys.c_vec[i] - tighten - cache.base_row_values(t)[i]
        for j, ds in enumerate(shift_sets):
            blk = blocks[j]
            for l, tau in enumerate(ds):
                blk[r, l] = cache.user_row_values(j, t - float(tau))[i]
    return IlpInstance(
        kind=kind,
        group_sizes=tuple(len(ds) for ds in shift_sets),
        costs=costs,
        blocks=blocks,
        rhs=rhs,
        choices=choices,
        row_meta=tuple(meta),
        budget_rhs=float(budget) if kind == "RES" else None,
        has_eta=(kind == "RES"),
    )


class _LpData:
    """Shared LP arrays for an instance; node solves only swap variable bounds."""

    def __init__(self, inst: IlpInstance):
        self.inst = inst
        n_bin = inst.n_binaries
        self.n_var = n_bin + (1 if inst.has_eta else 0)
        self.offsets = np.concatenate([[0], np.cumsum(inst.group_sizes)])
        cost = np.concatenate(inst.costs) if n_bin else np.zeros(0)
        if inst.has_eta:
            self.c = np.concatenate([np.zeros(n_bin), [-1.0]])
        else:
            self.c = cost
        self.cost_row = cost

        rows, rhs = self._dedup_rows()
        a_ub = rows
        b_ub = rhs
        if inst.budget_rhs is not None:
            budget = np.concatenate([cost, [0.0]]) if inst.has_eta else cost
            a_ub = np.vstack([a_ub, budget[None, :]]) if a_ub.size else budget[None, :]
            b_ub = np.append(b_ub, inst.budget_rhs)
        self.a_ub = scipy.sparse.csr_matrix(a_ub) if a_ub.size else None
        self.b_ub = b_ub if a_ub.size else None

        eq = np.zeros((inst.n_groups, self.n_var))
        for j in range(inst.n_groups):
            eq[j, self.offsets[j]:self.offsets[j + 1]] = 1.0
        self.a_eq = scipy.sparse.csr_matrix(eq)
        self.b_eq = np.ones(inst.n_groups)

    def _dedup_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack constraint rows, dropping exact duplicates (tightest rhs kept)."""
        inst = self.inst
        if inst.n_rows == 0:
            return np.zeros((0, self.n_var)), np.zeros(0)
        dense = np.hstack([blk for blk in inst.blocks])
        if inst.has_eta:
            dense = np.hstack([dense, np.ones((inst.n_rows, 1))])
        seen: dict[bytes, int] = {}
        keep_rows: list[int] = []
        rhs = inst.rhs.copy()
        for r in range(inst.n_rows):
            sig = dense[r].tobytes()
            k = seen.get(sig)
            if k is None:
                seen[sig] = len(keep_rows)
                keep_rows.append(r)
            else:
                rhs[keep_rows[k]] = min(rhs[keep_rows[k]], rhs[r])
        sel = np.array(keep_rows, dtype=int)
        return dense[sel], rhs[sel]

    def solve(self, allowed: tuple[tuple[int, int], ...]):
        """LP relaxation restricted to the allowed index window per group."""
        ub = np.zeros(self.n_var)
        for j, (lo, hi) in enumerate(allowed):
            ub[self.offsets[j] + lo:self.offsets[j] + hi + 1] = 1.0
        bounds = [(0.0, u) for u in ub[:self.inst.n_binaries]]
        if self.inst.has_eta:
            bounds.append((None, None))
        res = linprog(self.c, A_ub=self.a_ub, b_ub=self.b_ub,
                      A_eq=self.a_eq, b_eq=self.b_eq, bounds=bounds,
                      method="highs", options=_LP_OPTIONS)
        if res.status == 4:
            # presolve at tight tolerances misclassifies some infeasible
            # problems as "not set"; retry without it
            retry = dict(_LP_OPTIONS)
            retry["presolve"] = False
            res = linprog(self.c, A_ub=self.a_ub, b_ub=self.b_ub,
                          A_eq=self.a_eq, b_eq=self.b_eq, bounds=bounds,
                          method="highs", options=retry)
        return res


def lp_relax(inst: IlpInstance) -> tuple[float, list[np.ndarray], float | None]:
    """Solve the box relaxation of the full instance.

    Returns (objective bound, per-group fractional selection, eta value or
    None).  Raises ValueError when the relaxation is infeasible, which
    certifies infeasibility of the binary program, or unbounded.
    """
    data = _LpData(inst)
    root = tuple((0, n - 1) for n in inst.group_sizes)
    res = data.solve(root)
    if res.status == 2:
        raise ValueError("LP relaxation infeasible")
    if res.status == 3:
        raise ValueError("LP relaxation unbounded")
    if res.status != 0:
        raise RuntimeError(f"LP solver failure: {res.message}")
    frac = [res.x[data.offsets[j]:data.offsets[j + 1]]
            for j in range(inst.n_groups)]
    eta = float(res.x[-1]) if inst.has_eta else None
    return float(res.fun), frac, eta


def _exact_candidate(inst: IlpInstance, selection: tuple[int, ...]):
    """Exact objective of an integer selection, or None when infeasible.

    For the refinement kind the free column is set to the smallest row slack,
    which is its optimum for a fixed selection.
    """
    cost = inst.selection_cost(selection)
    resid = inst.residuals(selection)
    if inst.has_eta:
        if inst.budget_rhs is not None and cost > inst.budget_rhs + _RESIDUAL_TOL:
            return None
        eta = float((-resid).min()) if inst.n_rows else np.inf
        return -eta, eta
    if inst.budget_rhs is not None and cost > inst.budget_rhs + _RESIDUAL_TOL:
        return None
    if inst.n_rows and resid.max() > _RESIDUAL_TOL:
        return None
    return cost, None


def solve_ilp(inst: IlpInstance, opt_tol: float = 1e-9,
              node_limit: int = 200_000) -> IlpSolution:
    """Best-first branch-and-bound over LP relaxations.

    Branches the group with the most fractional relaxed selection, splitting
    its allowed index window in half.  Terminates when the incumbent is
    within ``opt_tol`` of the proven bound, all nodes are exhausted, or the
    node limit is hit (best incumbent and proven bound are still returned).
    """
    if opt_tol <= 0:
        raise ValueError("optimality tolerance must be positive")
    data = _LpData(inst)
    root = tuple((0, n - 1) for n in inst.group_sizes)

    best_obj = np.inf
    best_sel: tuple[int, ...] | None = None
    best_eta: float | None = None
    nodes = 0
    counter = 0
    heap: list[tuple] = []  # (bound, push order, allowed windows, LP solution)
    hit_limit = False

    res = data.solve(root)
    if res.status == 2:
        return IlpSolution(np.inf, None, "infeasible", 1, 0.0, np.inf)
    if res.status == 3:
        return IlpSolution(-np.inf, None, "unbounded", 1, np.inf, -np.inf,
                           eta=np.inf if inst.has_eta else None)
    if res.status != 0:
        raise RuntimeError(f"LP solver failure at root: {res.message}")
    heapq.heappush(heap, (float(res.fun), counter, root, res.x))

    def frac_and_sel(x: np.ndarray, allowed):
        """Per-group argmax selection and the most fractional branchable group."""
        sel = []
        worst = -1.0
        worst_j = -1
        for j, (lo, hi) in enumerate(allowed):
            seg = x[data.offsets[j] + lo:data.offsets[j] + hi + 1]
            l = int(np.argmax(seg))
            sel.append(lo + l)
            frac = 1.0 - float(seg[l])
            if hi > lo and frac > worst + 1e-12:
                worst = frac
                worst_j = j
        return tuple(sel), worst, worst_j

    while heap:
        bound, _, allowed, x = heapq.heappop(heap)
        if bound >= best_obj - 1e-12 or best_obj - bound <= opt_tol:
            heapq.heappush(heap, (bound, counter + 1, allowed, x))
            break
        if nodes >= node_limit:
            hit_limit = True
            heapq.heappush(heap, (bound, counter + 1, allowed, x))
            break
        nodes += 1
        sel, worst_frac, worst_j = frac_and_sel(x, allowed)
        if worst_frac <= _INT_TOL:
            cand = _exact_candidate(inst, sel)
            if cand is not None:
                obj, eta = cand
                better = obj < best_obj - 1e-12
                tied = abs(obj - best_obj) <= 1e-12 and best_sel is not None \
                    and sel < best_sel
                if better or tied or best_sel is None:
                    best_obj, best_sel, best_eta = obj, sel, eta
                continue
            if all(hi == lo for lo, hi in allowed):
                continue  # exact-infeasible leaf
            worst_j = next(j for j, (lo, hi) in enumerate(allowed) if hi > lo)
        lo, hi = allowed[worst_j]
        mid = (lo + hi) // 2
        for child_window in ((lo, mid), (mid + 1, hi)):
            child = tuple(child_window if j == worst_j else w
                          for j, w in enumerate(allowed))
            child_res = data.solve(child)
            if child_res.status == 2:
                continue
            if child_res.status != 0:
                raise RuntimeError(f"LP solver failure: {child_res.message}")
            child_bound = float(child_res.fun)
            if child_bound >= best_obj - 1e-12:
                continue
            counter += 1
            heapq.heappush(heap, (child_bound, counter, child, child_res.x))

    proven = min(min((entry[0] for entry in heap), default=best_obj), best_obj)
    if best_sel is None:
        if hit_limit:
            return IlpSolution(np.inf, None, "node-limit", nodes, np.inf, proven)
        return IlpSolution(np.inf, None, "infeasible", nodes, 0.0, np.inf)
    gap = max(0.0, best_obj - proven)
    status = "node-limit" if (hit_limit and gap > opt_tol) else "optimal"
    return IlpSolution(best_obj, best_sel, status, nodes, gap, proven,
                       eta=best_eta)
