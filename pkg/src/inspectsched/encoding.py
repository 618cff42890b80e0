"""Structural encoding of action-window and sleep constraints.

The arm MDP is augmented with timing state so that an index policy can
never over-inspect: a window-encoded arm carries the month within the
period and a remaining-pull counter, a sleep-encoded arm carries a
countdown to the next allowed pull.  Wherever a pull is not allowed the
active action is wired to the passive transition, which pins its
Whittle index at zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .arm_model import BeliefChain
from .errors import ValidationError
from .whittle import IndexTable, SubsidizedMDP


@dataclass(frozen=True)
class EncodedState:
    """(chain position, month within period, pulls left in the current window)."""

    belief_pos: int
    timer: int
    pulls_left: int


@dataclass(frozen=True)
class SleepState:
    """(chain position, steps until the next pull is allowed)."""

    belief_pos: int
    countdown: int


@dataclass(frozen=True, eq=False)
class EncodedMDP:
    """Deterministic arm MDP with timing structure baked into the states."""

    states: tuple
    passive_next: np.ndarray
    active_next: np.ndarray
    rewards: np.ndarray
    chain: BeliefChain
    window: Optional[tuple[int, int]] = None
    period: Optional[int] = None
    allowance: int = 1

    @property
    def n_states(self) -> int:
        return len(self.states)

    def state_id(self, state) -> int:
        return self._index[state]

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_index_cache")
        if idx is None:
            idx = {s: i for i, s in enumerate(self.states)}
            object.__setattr__(self, "_index_cache", idx)
        return idx

    def initial_state(self, belief_pos: int = 0) -> int:
        """State id at the start of a period (month 1) for a given chain position."""
        if self.window is not None:
            start, length = self.window
            pulls = self.allowance if start == 1 else 0
            return self.state_id(EncodedState(belief_pos, 1, pulls))
        return self.state_id(SleepState(belief_pos, 0))

    def action_is_noop(self) -> np.ndarray:
        """Mask of states where the active action is structurally passive."""
        return self.passive_next == self.active_next

    def to_mdp(self, subsidy: float = 0.0) -> SubsidizedMDP:
        return SubsidizedMDP.from_deterministic(
            self.passive_next, self.active_next, self.rewards,
            subsidy=subsidy, labels=self.states,
        )

    def describe(self) -> str:
        """Human-readable state/transition listing for small arms."""
        lines = []
        for i, s in enumerate(self.states):
            lines.append(
                f"{i}: {s} r={self.rewards[i]:.6f} "
                f"passive->{self.passive_next[i]} active->{self.active_next[i]}"
            )
        return "\n".join(lines)


def encode_action_window(chain: BeliefChain, window: tuple[int, int],
                         period: int, allowance: int = 1) -> EncodedMDP:
    """Embed a periodic action window into the chain MDP.

    States enumerate every (position, month, pulls-left) combination that
    respects the counter rules: the counter may be positive only inside
    the window and is refreshed to the allowance on window entry.  With a
    window of length W and allowance M that is P + W*M states per chain
    position.  Outside the window, or with the counter exhausted, the
    active action behaves exactly like the passive one.
    """
    start, length = window
    if length < 1 or start < 1 or start + length - 1 > period:
        raise ValidationError(
            f"window [{start}, {start + length - 1}] does not fit in period {period}"
        )
    if allowance < 1:
        raise ValidationError("window allowance must be at least 1")
    in_window = lambda month: start <= month <= start + length - 1

    n = len(chain)
    states = []
    for pos in range(n):
        for month in range(1, period + 1):
            pulls = range(allowance + 1) if in_window(month) else (0,)
            for m in pulls:
                states.append(EncodedState(pos, month, m))
    index = {s: i for i, s in enumerate(states)}

    def bookkeep(month, pulls):
        nxt_month = month % period + 1
        if nxt_month == start:
            nxt_pulls = allowance
        elif in_window(nxt_month):
            nxt_pulls = pulls
        else:
            nxt_pulls = 0
        return nxt_month, nxt_pulls

    passive_next = np.zeros(len(states), dtype=np.int64)
    active_next = np.zeros(len(states), dtype=np.int64)
    rewards = np.zeros(len(states))
    for i, s in enumerate(states):
        rewards[i] = chain.beliefs[s.belief_pos]
        drift = chain.position_after(s.belief_pos + 1)
        month, pulls = bookkeep(s.timer, s.pulls_left)
        passive_next[i] = index[EncodedState(drift, month, pulls)]
        if in_window(s.timer) and s.pulls_left > 0:
            month, pulls = bookkeep(s.timer, s.pulls_left - 1)
            active_next[i] = index[EncodedState(0, month, pulls)]
        else:
            active_next[i] = passive_next[i]

    return EncodedMDP(
        states=tuple(states),
        passive_next=passive_next,
        active_next=active_next,
        rewards=rewards,
        chain=chain,
        window=window,
        period=period,
        allowance=allowance,
    )


def encode_sleep(chain: BeliefChain, sleep_steps: int) -> EncodedMDP:
    """Embed a mandatory no-action stretch after every pull.

    Each pull arms a countdown; while it is positive the active action is
    wired to the passive transition.  State count grows by sleep_steps+1.
    """
    if sleep_steps < 0:
        raise ValidationError("sleep length must be nonnegative")
    n = len(chain)
    states = [SleepState(pos, c) for pos in range(n) for c in range(sleep_steps + 1)]
    index = {s: i for i, s in enumerate(states)}
    passive_next = np.zeros(len(states), dtype=np.int64)
    active_next = np.zeros(len(states), dtype=np.int64)
    rewards = np.zeros(len(states))
    for i, s in enumerate(states):
        rewards[i] = chain.beliefs[s.belief_pos]
        drift = chain.position_after(s.belief_pos + 1)
        passive_next[i] = index[SleepState(drift, max(s.countdown - 1, 0))]
        if s.countdown == 0:
            active_next[i] = index[SleepState(0, sleep_steps)]
        else:
            active_next[i] = passive_next[i]
    return EncodedMDP(
        states=tuple(states),
        passive_next=passive_next,
        active_next=active_next,
        rewards=rewards,
        chain=chain,
        window=None,
        period=None,
        allowance=1,
    )


@dataclass(frozen=True)
class NoopIndexReport:
    """Check that ineligible states carry a (numerically) zero index."""

    ok: bool
    violations: tuple[tuple[int, float], ...]  # (state id, index value)


def zero_outside_window_check(encoded: EncodedMDP, table: IndexTable,
                              tol: float = 1e-6) -> NoopIndexReport:
    """Indices of states where acting is a structural no-op must be ~0."""
    if len(table) != encoded.n_states:
        raise ValidationError("index table does not match the encoded arm")
    noop = encoded.action_is_noop()
    bad = np.flatnonzero(noop & (np.abs(table.values) > tol))
    return NoopIndexReport(
        ok=bad.size == 0,
        violations=tuple((int(s), float(table.values[s])) for s in bad),
    )
