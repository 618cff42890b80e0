"""Whittle-index machinery.

Subsidized Q-solves, per-state index computation by bisection over the
passive subsidy, index forecasts for lookahead planning, and empirical
indexability sweeps.

Arms built from belief chains (plain or window/sleep encoded) have fully
deterministic transitions, so besides textbook value iteration there is
an exact policy-evaluation fast path: for a fixed policy the value is a
single trajectory sum, computed to near machine precision by pointer
doubling in O(S log H).  Bisection and the grid sweep both ride on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .arm_model import BeliefChain
from .errors import BracketError, ValidationError

TIE_EPS = 1e-12          # active must beat passive by more than this to be chosen
VI_TOL = 1e-9            # default sup-norm tolerance for value iteration
INDEX_TOL = 1e-6         # default subsidy tolerance for index bisection
MAX_SWEEPS = 100_000
_EVAL_EPS = 1e-13        # relative truncation error of the doubling evaluation
_MAX_EXPANSIONS = 32


@dataclass(frozen=True, eq=False)
class SubsidizedMDP:
    """A finite two-action MDP whose passive action earns an extra subsidy.

    Transitions are stored either as dense row-stochastic matrices or,
    for deterministic dynamics, as next-state index arrays (both may be
    present; the deterministic form wins for speed).  The base reward
    depends only on the state; the subsidy is added to the passive action.
    """

    reward: np.ndarray
    subsidy: float = 0.0
    passive: Optional[np.ndarray] = None
    active: Optional[np.ndarray] = None
    passive_next: Optional[np.ndarray] = None
    active_next: Optional[np.ndarray] = None
    labels: Optional[tuple] = None

    @classmethod
    def from_matrices(cls, passive, active, reward, subsidy=0.0, labels=None):
        passive = np.asarray(passive, dtype=float)
        active = np.asarray(active, dtype=float)
        reward = np.asarray(reward, dtype=float)
        for name, mat in (("passive", passive), ("active", active)):
            sums = mat.sum(axis=1)
            bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
            if bad.size:
                raise ValidationError(f"{name} row {bad[0]} sums to {sums[bad[0]]}")
        return cls(reward=reward, subsidy=subsidy, passive=passive, active=active,
                   labels=labels)

    @classmethod
    def from_deterministic(cls, passive_next, active_next, reward, subsidy=0.0, labels=None):
        return cls(
            reward=np.asarray(reward, dtype=float),
            subsidy=subsidy,
            passive_next=np.asarray(passive_next, dtype=np.int64),
            active_next=np.asarray(active_next, dtype=np.int64),
            labels=labels,
        )

    @property
    def n_states(self) -> int:
        return len(self.reward)

    @property
    def is_deterministic(self) -> bool:
        return self.passive_next is not None

    def with_subsidy(self, m: float) -> "SubsidizedMDP":
        return replace(self, subsidy=m)

    def successor_values(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Expected next-step value under each action."""
        if self.is_deterministic:
            return values[self.passive_next], values[self.active_next]
        return self.passive @ values, self.active @ values


def mdp_from_chain(chain: BeliefChain) -> SubsidizedMDP:
    """Belief chain as an MDP: passive advances, active resets to the head."""
    n = len(chain)
    nxt = np.minimum(np.arange(1, n + 1), n - 1)
    return SubsidizedMDP.from_deterministic(
        passive_next=nxt,
        active_next=np.zeros(n, dtype=np.int64),
        reward=np.array(chain.beliefs),
        labels=tuple(range(n)),
    )


def value_iteration_q(mdp: SubsidizedMDP, gamma: float, tol: float = VI_TOL,
                      max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Q table (state x action) within ``tol`` of the fixed point in sup norm."""
    if not (0.0 < gamma < 1.0):
        raise ValidationError("discount must lie in (0, 1)")
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    stop = tol * (1.0 - gamma) / gamma
    q = np.zeros((mdp.n_states, 2))
    for _ in range(max_sweeps):
        v = q.max(axis=1)
        nv0, nv1 = mdp.successor_values(v)
        q0 = mdp.reward + mdp.subsidy + gamma * nv0
        q1 = mdp.reward + gamma * nv1
        delta = max(np.abs(q0 - q[:, 0]).max(), np.abs(q1 - q[:, 1]).max())
        q[:, 0] = q0
        q[:, 1] = q1
        if delta <= stop:
            break
    return q


def _doubling_steps(gamma: float, value_scale: float) -> int:
    # smallest K with gamma^(2^K) * scale / (1 - gamma) below the target error
    horizon = math.log(_EVAL_EPS * (1.0 - gamma) / max(value_scale, 1.0)) / math.log(gamma)
    return max(1, math.ceil(math.log2(max(horizon, 2.0))))


def _policy_values(mdp: SubsidizedMDP, gamma: float, active_mask: np.ndarray,
                   rewards: np.ndarray) -> np.ndarray:
    """Exact value of a fixed policy for an arbitrary per-state reward vector."""
    if mdp.is_deterministic:
        nxt = np.where(active_mask, mdp.active_next, mdp.passive_next)
        v = rewards.astype(float, copy=True)
        jump = nxt.copy()
        g = gamma
        for _ in range(_doubling_steps(gamma, np.abs(rewards).max(initial=1.0))):
            v = v + g * v[jump]
            jump = jump[jump]
            g = g * g
        return v
    trans = np.where(active_mask[:, None], mdp.active, mdp.passive)
    eye = np.eye(mdp.n_states)
    return np.linalg.solve(eye - gamma * trans, rewards)


def optimal_split(mdp: SubsidizedMDP, m: float, gamma: float,
                  warm: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Optimal (q_passive, q_active, active_mask) at subsidy ``m`` by policy iteration.

    Ties go to the passive action.  ``warm`` seeds the starting policy.
    """
    n = mdp.n_states
    active = np.zeros(n, dtype=bool) if warm is None else warm.copy()
    prev_v = None
    for _ in range(1000):
        rewards = mdp.reward + np.where(active, 0.0, m)
        v = _policy_values(mdp, gamma, active, rewards)
        nv0, nv1 = mdp.successor_values(v)
        q0 = mdp.reward + m + gamma * nv0
        q1 = mdp.reward + gamma * nv1
        new_active = q1 > q0 + TIE_EPS
        if np.array_equal(new_active, active):
            return q0, q1, active
        if prev_v is not None and np.abs(v - prev_v).max() < 1e-13:
            return q0, q1, new_active
        prev_v = v
        active = new_active
    raise RuntimeError("policy iteration failed to settle")


def _passive_at(mdp, m, gamma, warm=None):
    q0, q1, active = optimal_split(mdp, m, gamma, warm)
    return ~active, active


def _refine_indices(mdp: SubsidizedMDP, gamma: float, tol: float,
                    pending: np.ndarray, hi: float,
                    warm: Optional[np.ndarray]) -> np.ndarray:
    """Shared bisection: one subsidy solve serves every still-pending state."""
    values = np.zeros(mdp.n_states)
    stack = [(0.0, hi, pending, warm)]
    while stack:
        lo, up, mask, seed = stack.pop()
        if up - lo <= 2.0 * tol:
            values[mask] = 0.5 * (lo + up)
            continue
        mid = 0.5 * (lo + up)
        passive_mid, active_mid = _passive_at(mdp, mid, gamma, seed)
        left = mask & passive_mid
        right = mask & ~passive_mid
        if left.any():
            stack.append((lo, mid, left, active_mid))
        if right.any():
            stack.append((mid, up, right, active_mid))
    return values


def _expanded_bracket(mdp, gamma, pending, warm):
    hi = 1.0 / (1.0 - gamma)
    for _ in range(_MAX_EXPANSIONS):
        passive_hi, active_hi = _passive_at(mdp, hi, gamma, warm)
        if passive_hi[pending].all():
            return hi, active_hi
        hi *= 2.0
    raise BracketError(
        f"no passive switch below subsidy {hi}; the arm model looks inconsistent"
    )


@dataclass(frozen=True, eq=False)
class IndexTable:
    """Whittle index per state, with the discount and tolerance used."""

    values: np.ndarray
    gamma: float
    tol: float

    def __len__(self) -> int:
        return len(self.values)


def whittle_index(mdp: SubsidizedMDP, state: int, gamma: float,
                  tol: float = INDEX_TOL) -> float:
    """Smallest subsidy (within tol) making passive weakly optimal in ``state``."""
    passive0, active0 = _passive_at(mdp, 0.0, gamma)
    if passive0[state]:
        return 0.0
    pending = np.zeros(mdp.n_states, dtype=bool)
    pending[state] = True
    hi, warm = _expanded_bracket(mdp, gamma, pending, active0)
    return float(_refine_indices(mdp, gamma, tol, pending, hi, warm)[state])


def index_table(mdp: SubsidizedMDP, gamma: float, tol: float = INDEX_TOL) -> IndexTable:
    """Whittle index of every state, sharing subsidy solves across states."""
    passive0, active0 = _passive_at(mdp, 0.0, gamma)
    values = np.zeros(mdp.n_states)
    pending = ~passive0
    if pending.any():
        hi, warm = _expanded_bracket(mdp, gamma, pending, active0)
        refined = _refine_indices(mdp, gamma, tol, pending, hi, warm)
        values[pending] = refined[pending]
    return IndexTable(values=values, gamma=gamma, tol=tol)


def forecast_indices(table: IndexTable, current_position: int,
                     horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Index trajectories for a lookahead of ``horizon`` steps.

    Returns (w, w_post):
      w[j]        index after j passive steps from the current position
                  (lookahead step j+1), saturating at the chain tail;
      w_post[j, j'] index at step j'+1 given a pull at step j+1 (the arm
                  sits j'-j-1 steps from the head); NaN where j' <= j.
    """
    n = len(table)
    if not (0 <= current_position < n):
        raise ValidationError(f"position {current_position} outside table of {n}")
    vals = table.values
    steps = np.arange(horizon)
    w = vals[np.minimum(current_position + steps, n - 1)]
    w_post = np.full((horizon, horizon), np.nan)
    offsets = vals[np.minimum(steps, n - 1)]  # index after `offset` steps from head
    for j in range(horizon - 1):
        w_post[j, j + 1:] = offsets[:horizon - j - 1]
    return w, w_post


@dataclass(frozen=True)
class IndexabilityReport:
    """Outcome of a subsidy-grid sweep of the passive-optimal set."""

    indexable: bool
    violations: tuple[tuple[float, float, int], ...]  # (m_prev, m_next, state)


def check_indexability(mdp: SubsidizedMDP, m_grid: np.ndarray,
                       gamma: float) -> IndexabilityReport:
    """Track the passive set over the grid; report states that ever leave it.

    For a fixed optimal policy the Q gap is affine in the subsidy, so the
    sweep jumps over maximal grid runs where the policy stays optimal and
    only re-solves at policy changes.
    """
    grid = np.asarray(m_grid, dtype=float)
    if grid.size == 0:
        return IndexabilityReport(True, ())
    if np.any(np.diff(grid) < 0):
        raise ValidationError("subsidy grid must be sorted ascending")
    violations = []
    prev_passive = None
    prev_m = None
    warm = None
    i = 0
    block = 2048
    while i < grid.size:
        m = grid[i]
        q0, q1, active = optimal_split(mdp, m, gamma, warm)
        # affine pieces of the optimal Q gap on this policy's stability range
        base = _policy_values(mdp, gamma, active, mdp.reward)
        slope = _policy_values(mdp, gamma, active, (~active).astype(float))
        b0, b1 = mdp.successor_values(base)
        s0, s1 = mdp.successor_values(slope)
        c0 = gamma * (b1 - b0)
        c1 = gamma * (s1 - s0) - 1.0
        j = i + 1
        while j < grid.size:
            upper = min(j + block, grid.size)
            gaps = c0[None, :] + grid[j:upper, None] * c1[None, :]
            mism = ((gaps > TIE_EPS) != active[None, :]).any(axis=1)
            hits = np.flatnonzero(mism)
            if hits.size:
                j += int(hits[0])
                break
            j = upper
        passive = ~active
        if prev_passive is not None:
            left = np.flatnonzero(prev_passive & ~passive)
            violations.extend((float(prev_m), float(m), int(s)) for s in left)
        prev_passive = passive
        prev_m = grid[j - 1]
        warm = (c0 + grid[j] * c1 > TIE_EPS) if j < grid.size else active
        i = j
    return IndexabilityReport(indexable=not violations, violations=tuple(violations))


class IndexTableCache:
    """Memo for index tables keyed by arm structure.

    Writes are idempotent, so concurrent insertion at worst repeats work.
    """

    def __init__(self):
        self._tables: dict = {}

    def get_or_build(self, key, builder: Callable[[], IndexTable]) -> IndexTable:
        table = self._tables.get(key)
        if table is None:
            table = builder()
            self._tables[key] = table
        return table

    def clear(self):
        self._tables.clear()


shared_cache = IndexTableCache()
