"""Lookahead pull planning under budget, window, frequency, and fairness constraints.

The planner maximizes the sum of forecast Whittle indices of pulled
(arm, step) pairs.  The base problem (each arm pulled exactly or at most
once) has a totally unimodular constraint matrix, so it is solved
through its LP relaxation; an integrality check guards the result and an
exact integer solve takes over whenever the relaxation comes back
fractional (possible once fairness or two-pull constraints are added).

Second pulls are valued at the post-pull index: for every earlier pull
candidate t0 < t the effective value z of a pull at t satisfies
    z <= w[t] * a[t]                and
    z <= w[t] - (w[t] - w'[t0, t]) * a[t0],
so a pull preceded by another is worth min(w[t], w'[t0, t]).

A brute-force enumerator over all feasible action matrices serves as the
correctness oracle for every solver path.

Ties between equally good plans are broken deterministically toward the
plan whose pull list is lexicographically smallest in (arm, step): the
objective carries an infinitesimal penalty per selected cell, strictly
increasing and concave in the cell's (arm-major) rank.  The penalty also
makes the zero-index solver prefer the fewest, earliest pulls, which is
exactly the reward-oblivious baseline behaviour.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from .arm_model import FrequencyConstraint
from .errors import ParseError, SearchSpaceError, ValidationError
from .whittle import IndexTable, forecast_indices

INTEGRALITY_TOL = 1e-6
_TIE_SCALE = 1e-10
_LP_OPTIONS = {
    "presolve": True,
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


@dataclass(frozen=True, eq=False)
class LookaheadProblem:
    """One planning horizon: index forecasts plus the constraint data."""

    index: np.ndarray                      # (N, T) forecast index per arm and step
    eligible: np.ndarray                   # (N, T) bool pull mask
    budgets: np.ndarray                    # (T,) per-step budgets
    frequency: tuple[FrequencyConstraint, ...]
    post_pull_index: Optional[np.ndarray] = None   # (N, T, T) index after a pull
    fairness: tuple[tuple[frozenset, float], ...] = ()

    def __post_init__(self):
        index = np.asarray(self.index, dtype=float)
        eligible = np.asarray(self.eligible, dtype=bool)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "eligible", eligible)
        n, t = index.shape
        if eligible.shape != (n, t):
            raise ValidationError("index and eligibility shapes disagree")
        budgets = np.asarray(self.budgets)
        if budgets.ndim == 0:
            budgets = np.full(t, int(budgets))
        if budgets.shape != (t,):
            raise ValidationError("budget vector length must match the horizon")
        object.__setattr__(self, "budgets", budgets.astype(np.int64))
        if len(self.frequency) != n:
            raise ValidationError("need one frequency constraint per arm")
        for fc in self.frequency:
            if fc.hi > 2:
                raise ValidationError("more than two pulls per period is not supported")
        if self.post_pull_index is not None:
            post = np.asarray(self.post_pull_index, dtype=float)
            if post.shape != (n, t, t):
                raise ValidationError("post-pull index tensor must be (N, T, T)")
            object.__setattr__(self, "post_pull_index", post)
        for members, lam in self.fairness:
            if not (0.0 <= lam <= 1.0):
                raise ValidationError(f"fairness fraction {lam} outside [0, 1]")

    @property
    def n_arms(self) -> int:
        return self.index.shape[0]

    @property
    def horizon(self) -> int:
        return self.index.shape[1]


@dataclass(frozen=True, eq=False)
class LookaheadPlan:
    """Solver output: a binary action matrix plus objective and status."""

    actions: np.ndarray
    objective: float
    status: str                     # "optimal" | "infeasible"
    lp_integral: Optional[bool] = None
    infeasible_hint: Optional[str] = None


def make_problem(index, eligible, budget, frequency, post_pull_index=None,
                 fairness=()) -> LookaheadProblem:
    """Convenience constructor accepting a scalar budget and a shared frequency."""
    index = np.asarray(index, dtype=float)
    n = index.shape[0]
    if isinstance(frequency, FrequencyConstraint):
        frequency = (frequency,) * n
    return LookaheadProblem(
        index=index,
        eligible=np.asarray(eligible, dtype=bool),
        budgets=np.asarray(budget),
        frequency=tuple(frequency),
        post_pull_index=post_pull_index,
        fairness=tuple(fairness),
    )


def build_lookahead(tables: Sequence[IndexTable], positions: Sequence[int],
                    horizon: int, budget, frequency,
                    eligible: np.ndarray, fairness=()) -> LookaheadProblem:
    """Assemble a problem from per-arm index tables and current chain positions."""
    n = len(tables)
    w = np.zeros((n, horizon))
    freq = (frequency,) * n if isinstance(frequency, FrequencyConstraint) else tuple(frequency)
    need_post = any(fc.hi >= 2 for fc in freq)
    post = np.zeros((n, horizon, horizon)) if need_post else None
    for i, (table, pos) in enumerate(zip(tables, positions)):
        wi, wpost = forecast_indices(table, pos, horizon)
        w[i] = wi
        if need_post:
            post[i] = np.nan_to_num(wpost, nan=0.0)
    return LookaheadProblem(
        index=w,
        eligible=np.asarray(eligible, dtype=bool),
        budgets=np.asarray(budget),
        frequency=freq,
        post_pull_index=post,
        fairness=tuple(fairness),
    )


def add_fairness(problem: LookaheadProblem,
                 groups: Iterable[tuple[Iterable[int], float]]) -> LookaheadProblem:
    """Return a copy that must give each group at least its fraction of all pulls."""
    extra = tuple((frozenset(int(i) for i in members), float(lam))
                  for members, lam in groups)
    return replace(problem, fairness=problem.fairness + extra)


def _arm_value(problem: LookaheadProblem, arm: int, steps: Sequence[int]) -> float:
    """Value of a pull set for one arm; later pulls use the post-pull index."""
    if not len(steps):
        return 0.0
    w = problem.index
    post = problem.post_pull_index
    total = w[arm, steps[0]]
    prev = steps[0]
    for t in steps[1:]:
        v = w[arm, t]
        if post is not None:
            v = min(v, post[arm, prev, t])
        total += v
        prev = t
    return total


def plan_objective(problem: LookaheadProblem, actions: np.ndarray) -> float:
    """Canonical objective of an action matrix (arms in order, pulls in time order)."""
    total = 0.0
    for i in range(problem.n_arms):
        steps = np.flatnonzero(actions[i])
        total += _arm_value(problem, i, steps)
    return total


def validate_plan(problem: LookaheadProblem, actions: np.ndarray) -> tuple[str, ...]:
    """Independent constraint audit of an action matrix; empty means clean."""
    out = []
    actions = np.asarray(actions)
    if actions.shape != problem.index.shape:
        return (f"shape {actions.shape} does not match problem",)
    if not np.isin(actions, (0, 1)).all():
        out.append("actions must be 0/1")
    stray = actions.astype(bool) & ~problem.eligible
    for i, t in zip(*np.nonzero(stray)):
        out.append(f"arm {i} pulled at ineligible step {t + 1}")
    loads = actions.sum(axis=0)
    for t in np.flatnonzero(loads > problem.budgets):
        out.append(f"step {t + 1} uses {loads[t]} pulls with budget {problem.budgets[t]}")
    counts = actions.sum(axis=1)
    for i, fc in enumerate(problem.frequency):
        if not (fc.lo <= counts[i] <= fc.hi):
            out.append(f"arm {i} pulled {counts[i]} times, bounds [{fc.lo}, {fc.hi}]")
    total = counts.sum()
    for members, lam in problem.fairness:
        got = sum(counts[i] for i in members)
        if got + 1e-9 < lam * total:
            out.append(f"group of {len(members)} got {got} of {total} pulls, needs {lam:.3f}")
    return tuple(out)


def _infeasibility_hint(problem: LookaheadProblem) -> str:
    demand = sum(fc.lo for fc in problem.frequency)
    capacity = int(problem.budgets.sum())
    if demand > capacity:
        return f"total demand {demand} exceeds total capacity {capacity}"
    masks = {}
    for i, fc in enumerate(problem.frequency):
        if fc.lo > 0:
            key = tuple(np.flatnonzero(problem.eligible[i]))
            if not key:
                return f"arm {i} requires {fc.lo} pulls but has no eligible step"
            masks.setdefault(key, 0)
            masks[key] += fc.lo
    for key in masks:
        window = set(key)
        inside = sum(demand_ for other, demand_ in masks.items() if set(other) <= window)
        cap = int(problem.budgets[list(key)].sum())
        if inside > cap:
            return (f"steps {[t + 1 for t in key]} must absorb {inside} pulls "
                    f"with capacity {cap}")
    return "no feasible action matrix"


def _tie_penalties(n: int, horizon: int, scale: float) -> np.ndarray:
    eps = _TIE_SCALE * max(1.0, scale)
    u = np.arange(n * horizon, dtype=float).reshape(n, horizon) / (n * horizon)
    return eps * (1.0 + u - 0.5 * u * u)


class _Assembly:
    """Variable maps plus constraint rows shared by the LP and integer paths."""

    def __init__(self, problem: LookaheadProblem):
        self.problem = problem
        w = problem.index
        post = problem.post_pull_index
        self.cells = []          # a-variables: (arm, step)
        self.z_cells = []        # effective-value variables for two-pull arms
        a_of = {}
        for i, fc in enumerate(problem.frequency):
            if fc.hi < 1:
                continue
            for t in np.flatnonzero(problem.eligible[i]):
                a_of[(i, int(t))] = len(self.cells)
                self.cells.append((i, int(t)))
        self.a_of = a_of
        multi = [i for i, fc in enumerate(problem.frequency)
                 if fc.hi >= 2 and post is not None]
        self.multi = set(multi)
        if multi:
            bad = w[problem.eligible] if problem.eligible.any() else np.zeros(1)
            if (bad < 0).any() or (post is not None and (np.nan_to_num(post) < 0).any()):
                raise ValidationError("two-pull planning expects nonnegative indices")
        z_of = {}
        for (i, t) in self.cells:
            if i in self.multi:
                z_of[(i, t)] = len(self.cells) + len(self.z_cells)
                self.z_cells.append((i, t))
        self.z_of = z_of
        self.n_vars = len(self.cells) + len(self.z_cells)

        pen = _tie_penalties(problem.n_arms, problem.horizon,
                             float(np.abs(w).max(initial=0.0)))
        self.objective = np.zeros(self.n_vars)
        for j, (i, t) in enumerate(self.cells):
            self.objective[j] = (-pen[i, t]) if i in self.multi else (w[i, t] - pen[i, t])
        for (i, t), j in z_of.items():
            self.objective[j] = 1.0

        rows, cols, data, lbs, ubs = [], [], [], [], []

        def add_row(col_vals, lb, ub):
            r = len(lbs)
            for c, v in col_vals:
                rows.append(r)
                cols.append(c)
                data.append(v)
            lbs.append(lb)
            ubs.append(ub)

        for t in range(problem.horizon):
            col_vals = [(a_of[(i, t)], 1.0) for i in range(problem.n_arms)
                        if (i, t) in a_of]
            if col_vals:
                add_row(col_vals, -np.inf, float(problem.budgets[t]))
        for i, fc in enumerate(problem.frequency):
            col_vals = [(a_of[(i, t)], 1.0) for t in range(problem.horizon)
                        if (i, t) in a_of]
            if col_vals:
                add_row(col_vals, float(fc.lo), float(fc.hi))
        for members, lam in problem.fairness:
            col_vals = []
            for j, (i, t) in enumerate(self.cells):
                coef = (1.0 - lam) if i in members else -lam
                col_vals.append((j, coef))
            if col_vals:
                add_row(col_vals, 0.0, np.inf)
        for (i, t), jz in z_of.items():
            add_row([(jz, 1.0), (a_of[(i, t)], -w[i, t])], -np.inf, 0.0)
            for t0 in range(t):
                if (i, t0) in a_of:
                    gap = w[i, t] - post[i, t0, t]
                    add_row([(jz, 1.0), (a_of[(i, t0)], gap)], -np.inf, float(w[i, t]))

        self.A = sparse.csr_matrix(
            (data, (rows, cols)), shape=(len(lbs), self.n_vars))
        self.row_lb = np.array(lbs)
        self.row_ub = np.array(ubs)
        self.var_lb = np.zeros(self.n_vars)
        self.var_ub = np.ones(self.n_vars)
        for (i, t), j in z_of.items():
            self.var_ub[j] = max(w[i, t], 0.0)

    def actions_from(self, x: np.ndarray) -> np.ndarray:
        actions = np.zeros(self.problem.index.shape, dtype=np.int8)
        for j, (i, t) in enumerate(self.cells):
            actions[i, t] = int(round(x[j]))
        return actions

    def linprog_parts(self):
        eq = self.row_lb == self.row_ub
        ub_vals = []
        finite_ub = ~eq & np.isfinite(self.row_ub)
        finite_lb = ~eq & np.isfinite(self.row_lb)
        A_ub_list = []
        if finite_ub.any():
            A_ub_list.append(self.A[finite_ub])
            ub_vals.append(self.row_ub[finite_ub])
        if finite_lb.any():
            A_ub_list.append(-self.A[finite_lb])
            ub_vals.append(-self.row_lb[finite_lb])
        A_ub = sparse.vstack(A_ub_list) if A_ub_list else None
        b_ub = np.concatenate(ub_vals) if ub_vals else None
        A_eq = self.A[eq] if eq.any() else None
        b_eq = self.row_ub[eq] if eq.any() else None
        return A_ub, b_ub, A_eq, b_eq


def _empty_plan(problem: LookaheadProblem) -> LookaheadPlan:
    actions = np.zeros(problem.index.shape, dtype=np.int8)
    if any(fc.lo > 0 for fc in problem.frequency):
        return LookaheadPlan(actions, 0.0, "infeasible",
                             infeasible_hint=_infeasibility_hint(problem))
    return LookaheadPlan(actions, 0.0, "optimal", lp_integral=True)


def lp_relaxation(problem: LookaheadProblem):
    """Solve the LP relaxation; returns (action matrix as floats, integral flag).

    Returns (None, False) when the relaxation is infeasible.
    """
    asm = _Assembly(problem)
    if not asm.cells:
        return (np.zeros(problem.index.shape), True) if not any(
            fc.lo > 0 for fc in problem.frequency) else (None, False)
    A_ub, b_ub, A_eq, b_eq = asm.linprog_parts()
    res = linprog(
        -asm.objective, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
        bounds=list(zip(asm.var_lb, asm.var_ub)),
        method="highs-ds", options=_LP_OPTIONS,
    )
    if res.status == 2:
        return None, False
    if res.status != 0:
        raise RuntimeError(f"LP solve failed: {res.message}")
    a_part = res.x[:len(asm.cells)]
    integral = bool(np.abs(a_part - np.round(a_part)).max(initial=0.0) <= INTEGRALITY_TOL)
    x = np.zeros(problem.index.shape)
    for j, (i, t) in enumerate(asm.cells):
        x[i, t] = a_part[j]
    return x, integral


def solve(problem: LookaheadProblem) -> LookaheadPlan:
    """LP fast path with an exact integer fallback; result is audit-checked."""
    asm = _Assembly(problem)
    if not asm.cells:
        return _empty_plan(problem)
    A_ub, b_ub, A_eq, b_eq = asm.linprog_parts()
    res = linprog(
        -asm.objective, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
        bounds=list(zip(asm.var_lb, asm.var_ub)),
        method="highs-ds", options=_LP_OPTIONS,
    )
    if res.status == 2:
        return LookaheadPlan(np.zeros(problem.index.shape, dtype=np.int8), 0.0,
                             "infeasible", infeasible_hint=_infeasibility_hint(problem))
    if res.status != 0:
        raise RuntimeError(f"LP solve failed: {res.message}")
    a_part = res.x[:len(asm.cells)]
    integral = bool(np.abs(a_part - np.round(a_part)).max(initial=0.0) <= INTEGRALITY_TOL)
    if integral:
        x = res.x
    else:
        integrality = np.zeros(asm.n_vars)
        integrality[:len(asm.cells)] = 1
        mres = milp(
            -asm.objective,
            constraints=LinearConstraint(asm.A, asm.row_lb, asm.row_ub),
            integrality=integrality,
            bounds=Bounds(asm.var_lb, asm.var_ub),
            options={"mip_rel_gap": 0.0},
        )
        if mres.status == 2:
            return LookaheadPlan(np.zeros(problem.index.shape, dtype=np.int8), 0.0,
                                 "infeasible",
                                 infeasible_hint=_infeasibility_hint(problem))
        if mres.status != 0:
            raise RuntimeError(f"integer solve failed: {mres.message}")
        x = mres.x
    actions = asm.actions_from(x)
    problems = validate_plan(problem, actions)
    if problems:
        raise RuntimeError(f"solver returned an invalid plan: {problems[0]}")
    return LookaheadPlan(actions, plan_objective(problem, actions), "optimal",
                         lp_integral=integral)


def _require_uniform(problem: LookaheadProblem, kind: str, hi: Optional[int] = None):
    for fc in problem.frequency:
        if fc.kind != kind or (hi is not None and fc.hi != hi):
            raise ValidationError(f"expected a uniform {kind} frequency constraint")


def solve_exactly_once(problem: LookaheadProblem) -> LookaheadPlan:
    """Every arm pulled exactly once over the lookahead, budgets permitting."""
    _require_uniform(problem, "exactly", hi=1)
    return solve(problem)


def solve_at_most_once(problem: LookaheadProblem) -> LookaheadPlan:
    """Every arm pulled at most once; always feasible (the empty plan qualifies)."""
    _require_uniform(problem, "at_most", hi=1)
    return solve(problem)


def solve_with_multipull(problem: LookaheadProblem, max_pulls: int = 2) -> LookaheadPlan:
    """Between lo and hi <= 2 pulls per arm; second pulls use post-pull indices."""
    if max_pulls > 2:
        raise ValidationError("more than two pulls per period is not supported")
    for fc in problem.frequency:
        if fc.hi > max_pulls:
            raise ValidationError(f"frequency {fc.spec_string()} exceeds max_pulls")
    if any(fc.hi >= 2 for fc in problem.frequency) and problem.post_pull_index is None:
        raise ValidationError("two-pull planning needs post-pull indices")
    return solve(problem)


def brute_force_plan(problem: LookaheadProblem,
                     guard: int = 10 ** 6) -> LookaheadPlan:
    """Exhaustive enumeration oracle; exact optimum with lexicographic ties."""
    n, horizon = problem.index.shape
    choice_lists = []
    for i, fc in enumerate(problem.frequency):
        ts = [int(t) for t in np.flatnonzero(problem.eligible[i])]
        options = []
        for size in range(fc.lo, min(fc.hi, len(ts)) + 1):
            options.extend(itertools.combinations(ts, size))
        if not options:
            return LookaheadPlan(np.zeros((n, horizon), dtype=np.int8), 0.0,
                                 "infeasible",
                                 infeasible_hint=_infeasibility_hint(problem))
        choice_lists.append(options)
    space = 1
    for options in choice_lists:
        space *= len(options)
        if space > guard:
            raise SearchSpaceError(f"search space exceeds {guard} candidate schedules")

    budgets = problem.budgets
    counts = np.zeros(horizon, dtype=np.int64)
    best: list = [None, None]  # objective, cells

    def descend(arm: int, value: float, cells: tuple):
        if arm == n:
            total = int(counts.sum())
            for members, lam in problem.fairness:
                got = sum(1 for (i, _) in cells if i in members)
                if got + 1e-12 < lam * total:
                    return
            if best[0] is None or value > best[0] or (value == best[0] and cells < best[1]):
                best[0], best[1] = value, cells
            return
        for steps in choice_lists[arm]:
            ok = True
            for t in steps:
                counts[t] += 1
                if counts[t] > budgets[t]:
                    ok = False
            if ok:
                descend(arm + 1, value + _arm_value(problem, arm, steps),
                        cells + tuple((arm, t) for t in steps))
            for t in steps:
                counts[t] -= 1

    descend(0, 0.0, ())
    if best[0] is None:
        return LookaheadPlan(np.zeros((n, horizon), dtype=np.int8), 0.0,
                             "infeasible", infeasible_hint=_infeasibility_hint(problem))
    actions = np.zeros((n, horizon), dtype=np.int8)
    for i, t in best[1]:
        actions[i, t] = 1
    return LookaheadPlan(actions, plan_objective(problem, actions), "optimal")


def greedy_whittle_step(indices, k: int) -> np.ndarray:
    """Ids of the k highest-index arms; ties go to the lower arm id."""
    indices = np.asarray(indices, dtype=float)
    n = len(indices)
    order = np.lexsort((np.arange(n), -indices))
    return np.sort(order[:max(0, min(k, n))])


def save_plan(plan: LookaheadPlan, path) -> None:
    """Pull rows as CSV plus a trailer carrying objective and status."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write("arm_id,timestep,action\n")
        for i, t in zip(*np.nonzero(plan.actions)):
            fh.write(f"{i},{t + 1},1\n")
        fh.write(f"# objective={plan.objective!r} status={plan.status}\n")


@dataclass(frozen=True)
class PlanFile:
    pulls: tuple[tuple[int, int], ...]   # (arm_id, 1-based timestep)
    objective: float
    status: str


def load_plan(path) -> PlanFile:
    path = Path(path)
    pulls = []
    objective, status = 0.0, "optimal"
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("arm_id"):
            continue
        if line.startswith("#"):
            fields = dict(part.split("=", 1) for part in line[1:].split())
            objective = float(fields.get("objective", "0.0"))
            status = fields.get("status", "optimal")
            continue
        parts = line.split(",")
        if len(parts) != 3:
            from .errors import ParseError
            raise ParseError("expected arm_id,timestep,action", lineno)
        pulls.append((int(parts[0]), int(parts[1])))
    return PlanFile(tuple(pulls), objective, status)
