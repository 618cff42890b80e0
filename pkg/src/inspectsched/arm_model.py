"""Arm transition kernels, belief chains, and scheduling instances.

Each arm is a two-state process (state 1 = passing, state 0 = failing)
that is observed only when inspected.  Between inspections the
probability of being in the passing state drifts under the passive
kernel; an inspection restores the arm to passing at the next step.
The adherence probabilities reachable from the passing state form a
finite chain, which is what the index machinery operates on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, ValidationError

ROW_SUM_TOL = 1e-9
DEFAULT_CHAIN_EPS = 1e-4

INSTANCE_COLUMNS = [
    "arm_id", "p00", "p01", "p10", "p11", "window_start", "window_len", "group_id",
]


@dataclass(frozen=True)
class TransitionKernel:
    """Passive 2x2 row-stochastic kernel (row = current state, col = next state).

    The active kernel is implicit and shared by all arms: an inspection
    moves any state to passing with probability 1.
    """

    p00: float
    p01: float
    p10: float
    p11: float

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.p00, self.p01], [self.p10, self.p11]])


def validate_kernel(kernel: TransitionKernel) -> None:
    """Raise ValidationError unless the kernel is row-stochastic within tolerance."""
    entries = (kernel.p00, kernel.p01, kernel.p10, kernel.p11)
    for value in entries:
        if not (0.0 <= value <= 1.0):
            raise ValidationError(f"entry out of range: {value!r}")
    for row, total in ((0, kernel.p00 + kernel.p01), (1, kernel.p10 + kernel.p11)):
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise ValidationError(f"row {row} sums to {total}")


def belief_update(b: float, kernel: TransitionKernel) -> float:
    """One passive step of the adherence probability."""
    return kernel.p01 * (1.0 - b) + kernel.p11 * b


@dataclass(frozen=True)
class BeliefChain:
    """Adherence probabilities reachable from the passing state.

    Position 0 is the post-inspection belief 1.0; the final position
    transitions to itself.  When the chain is cut off by ``cap`` rather
    than by the convergence tolerance, the tail still self-loops but the
    one-step change there may exceed the tolerance.
    """

    beliefs: tuple[float, ...]
    terminal_self_loop: bool
    kernel: TransitionKernel

    def __len__(self) -> int:
        return len(self.beliefs)

    def position_after(self, steps: int) -> int:
        """Chain position after ``steps`` passive steps from the head."""
        return min(steps, len(self.beliefs) - 1)


def build_belief_chain(kernel: TransitionKernel,
                       eps: float = DEFAULT_CHAIN_EPS,
                       cap: int = 60) -> BeliefChain:
    """Iterate the passive update from belief 1.0 until it settles or hits cap."""
    if eps <= 0:
        raise ValidationError("chain tolerance must be positive")
    if cap < 1:
        raise ValidationError("chain cap must be at least 1")
    validate_kernel(kernel)
    beliefs = [1.0]
    while len(beliefs) < cap:
        nxt = belief_update(beliefs[-1], kernel)
        if abs(nxt - beliefs[-1]) < eps:
            break
        beliefs.append(nxt)
    return BeliefChain(tuple(beliefs), terminal_self_loop=True, kernel=kernel)


@dataclass(frozen=True)
class FrequencyConstraint:
    """Per-period bound on the number of inspections an arm receives."""

    kind: str
    lo: int
    hi: int

    def __post_init__(self):
        if self.kind not in ("at_most", "exactly", "between"):
            raise ValidationError(f"unknown frequency kind {self.kind!r}")
        if not (0 <= self.lo <= self.hi):
            raise ValidationError(f"bad frequency bounds [{self.lo}, {self.hi}]")

    @classmethod
    def at_most(cls, c: int) -> "FrequencyConstraint":
        return cls("at_most", 0, int(c))

    @classmethod
    def exactly(cls, c: int) -> "FrequencyConstraint":
        return cls("exactly", int(c), int(c))

    @classmethod
    def between(cls, lo: int, hi: int) -> "FrequencyConstraint":
        return cls("between", int(lo), int(hi))

    def spec_string(self) -> str:
        if self.kind == "between":
            return f"between:{self.lo}:{self.hi}"
        bound = self.hi if self.kind == "at_most" else self.lo
        return f"{self.kind}:{bound}"

    @classmethod
    def parse(cls, text: str) -> "FrequencyConstraint":
        parts = text.strip().split(":")
        try:
            if parts[0] == "at_most" and len(parts) == 2:
                return cls.at_most(int(parts[1]))
            if parts[0] == "exactly" and len(parts) == 2:
                return cls.exactly(int(parts[1]))
            if parts[0] == "between" and len(parts) == 3:
                return cls.between(int(parts[1]), int(parts[2]))
        except ValueError as exc:
            raise ValidationError(f"bad frequency spec {text!r}") from exc
        raise ValidationError(f"bad frequency spec {text!r}")


@dataclass(frozen=True)
class ArmSpec:
    """One arm: its kernel plus optional inspection window and fairness group."""

    arm_id: int
    kernel: TransitionKernel
    window: Optional[tuple[int, int]] = None  # (start month 1..P, length W)
    group_id: Optional[int] = None


def _validate_window(window: tuple[int, int], period: int, arm_id: int) -> None:
    start, length = window
    if length < 1:
        raise ValidationError(f"arm {arm_id}: window length {length} < 1")
    if start < 1 or start + length - 1 > period:
        raise ValidationError(
            f"arm {arm_id}: window [{start}, {start + length - 1}] does not fit in period {period}"
        )


@dataclass(frozen=True)
class Instance:
    """A full scheduling problem: arms, horizon, budget, and constraints."""

    arms: tuple[ArmSpec, ...]
    horizon: int
    period: int
    budget: int
    gamma: float = 0.95
    frequency: FrequencyConstraint = field(default_factory=lambda: FrequencyConstraint.exactly(1))

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        if self.budget < 1:
            raise ValidationError(f"budget {self.budget} < 1")
        if self.period < 1 or self.horizon < 1 or self.horizon % self.period != 0:
            raise ValidationError(
                f"horizon {self.horizon} must be a positive multiple of period {self.period}"
            )
        if not (0.0 < self.gamma < 1.0):
            raise ValidationError(f"discount {self.gamma} outside (0, 1)")
        for arm in self.arms:
            validate_kernel(arm.kernel)
            if arm.window is not None:
                _validate_window(arm.window, self.period, arm.arm_id)
        required = len(self.arms) * self.frequency.lo
        if required > self.budget * self.period:
            raise ValidationError(
                f"per-period demand {required} exceeds capacity {self.budget * self.period}"
            )

    @property
    def n_arms(self) -> int:
        return len(self.arms)


def generate_synthetic_instance(n: int,
                                seed: int,
                                alpha_pass: float = 5.0,
                                beta_pass: float = 1.0,
                                alpha_fail: float = 1.0,
                                beta_fail: float = 5.0,
                                *,
                                budget_fraction: float = 0.09,
                                horizon: int = 60,
                                period: int = 12,
                                gamma: float = 0.95,
                                frequency: FrequencyConstraint | None = None) -> Instance:
    """Draw arm kernels from Beta priors; deterministic given the seed.

    p00 ~ Beta(alpha_pass, beta_pass) and p10 ~ Beta(alpha_fail, beta_fail);
    the remaining entries are complements.  The default budget is 9% of n.
    """
    if n < 1:
        raise ValidationError("need at least one arm")
    rng = np.random.default_rng(seed)
    p00 = rng.beta(alpha_pass, beta_pass, size=n)
    p10 = rng.beta(alpha_fail, beta_fail, size=n)
    arms = tuple(
        ArmSpec(i, TransitionKernel(p00[i], 1.0 - p00[i], p10[i], 1.0 - p10[i]))
        for i in range(n)
    )
    budget = max(1, int(budget_fraction * n + 1e-9))
    return Instance(
        arms=arms,
        horizon=horizon,
        period=period,
        budget=budget,
        gamma=gamma,
        frequency=frequency or FrequencyConstraint.exactly(1),
    )


def _params_path(path: Path) -> Path:
    return path.with_suffix(".params")


def save_instance(instance: Instance, path) -> None:
    """Write the arm CSV plus a flat key=value sidecar with instance parameters."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INSTANCE_COLUMNS)
        for arm in instance.arms:
            start, length = arm.window if arm.window is not None else ("", "")
            group = arm.group_id if arm.group_id is not None else ""
            writer.writerow([
                arm.arm_id,
                repr(arm.kernel.p00), repr(arm.kernel.p01),
                repr(arm.kernel.p10), repr(arm.kernel.p11),
                start, length, group,
            ])
    with _params_path(path).open("w") as fh:
        fh.write(f"horizon={instance.horizon}\n")
        fh.write(f"period={instance.period}\n")
        fh.write(f"budget={instance.budget}\n")
        fh.write(f"gamma={repr(instance.gamma)}\n")
        fh.write(f"frequency={instance.frequency.spec_string()}\n")


def _read_params(path: Path) -> dict:
    params = {}
    if not path.exists():
        return params
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value in {path.name}", lineno)
        key, value = line.split("=", 1)
        params[key.strip()] = value.strip()
    return params


def load_instance(path, **overrides) -> Instance:
    """Read an instance CSV (and its .params sidecar when present).

    Keyword overrides (horizon, period, budget, gamma, frequency) take
    precedence over sidecar values; anything still missing falls back to
    the synthetic-generation defaults.
    """
    path = Path(path)
    arms = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty instance file", 1)
        missing = [c for c in INSTANCE_COLUMNS[:5] if c not in header]
        if missing:
            raise ParseError(f"missing column {missing[0]!r}", 1)
        col = {name: header.index(name) for name in header}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                arm_id = int(row[col["arm_id"]])
                kernel = TransitionKernel(
                    float(row[col["p00"]]), float(row[col["p01"]]),
                    float(row[col["p10"]]), float(row[col["p11"]]),
                )
            except (ValueError, IndexError) as exc:
                raise ParseError(f"bad row: {exc}", lineno)
            try:
                validate_kernel(kernel)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
            window = None
            if "window_start" in col and "window_len" in col:
                raw_start = row[col["window_start"]].strip() if len(row) > col["window_start"] else ""
                raw_len = row[col["window_len"]].strip() if len(row) > col["window_len"] else ""
                if raw_start and raw_len:
                    try:
                        window = (int(raw_start), int(raw_len))
                    except ValueError as exc:
                        raise ParseError(f"bad window: {exc}", lineno)
            group = None
            if "group_id" in col and len(row) > col["group_id"] and row[col["group_id"]].strip():
                try:
                    group = int(row[col["group_id"]])
                except ValueError as exc:
                    raise ParseError(f"bad group_id: {exc}", lineno)
            arms.append(ArmSpec(arm_id, kernel, window, group))

    params = _read_params(_params_path(path))
    horizon = int(overrides.get("horizon", params.get("horizon", 60)))
    period = int(overrides.get("period", params.get("period", 12)))
    gamma = float(overrides.get("gamma", params.get("gamma", 0.95)))
    if "budget" in overrides:
        budget = int(overrides["budget"])
    elif "budget" in params:
        budget = int(params["budget"])
    else:
        budget = max(1, int(0.09 * len(arms) + 1e-9))
    freq = overrides.get("frequency", params.get("frequency", "exactly:1"))
    if isinstance(freq, str):
        freq = FrequencyConstraint.parse(freq)
    return Instance(tuple(arms), horizon, period, budget, gamma, freq)


def perturbed_copy(instance: Instance, p00: np.ndarray, p10: np.ndarray) -> Instance:
    """Rebuild an instance with new p00/p10 vectors (complements recomputed)."""
    arms = tuple(
        replace(arm, kernel=TransitionKernel(p00[i], 1.0 - p00[i], p10[i], 1.0 - p10[i]))
        for i, arm in enumerate(instance.arms)
    )
    return replace(instance, arms=arms)
