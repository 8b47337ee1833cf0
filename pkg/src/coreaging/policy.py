"""Aging-aware core management: task-to-core mapping and selective core idling."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, List, Optional, Sequence, Tuple

IDLE_HISTORY_LEN = 8


class IdleState(str, Enum):
    ACTIVE = "active"
    DEEP_IDLE = "deep_idle"


class IdleTransitionError(RuntimeError):
    """Idle/assign events arrived out of order for a core."""


@dataclass
class ManagedCore:
    core_id: int
    assigned_task: Optional[int] = None
    idle_history: Deque[float] = field(default_factory=lambda: deque(maxlen=IDLE_HISTORY_LEN))
    idle_open_since: Optional[float] = None
    idle_state: IdleState = IdleState.ACTIVE
    age_estimate: float = 0.0

    def idle_score(self, now: float) -> float:
        score = sum(self.idle_history)
        if self.idle_open_since is not None:
            score += now - self.idle_open_since
        return score


@dataclass(frozen=True)
class ReactionParams:
    pos_gain: float = 0.785
    neg_gain: float = 1.55
    idling_period: float = 1.0

    def __post_init__(self) -> None:
        if not (0 < self.pos_gain < math.pi / 2):
            raise ValueError("pos_gain must keep tan finite on [0, 1]")
        if not self.neg_gain > self.pos_gain:
            raise ValueError("neg_gain must exceed pos_gain")
        if self.idling_period <= 0:
            raise ValueError("idling_period must be positive")


def select_core(working_set: Sequence[ManagedCore], now: float) -> Optional[int]:
    """Pick the unassigned core with the largest idle score.

    Ties keep the first core seen. Returns None when every core in the
    working set is busy, which the caller treats as oversubscription.
    """
    selected: Optional[ManagedCore] = None
    selected_score = 0.0
    for core in working_set:
        if core.assigned_task is not None or core.idle_state is not IdleState.ACTIVE:
            continue
        score = core.idle_score(now)
        if selected is None or score > selected_score:
            selected = core
            selected_score = score
    return None if selected is None else selected.core_id


def record_idle_transition(core: ManagedCore, event: str, now: float) -> ManagedCore:
    """Apply ``"became_idle"`` or ``"task_assigned"`` to the idle history."""
    if event == "became_idle":
        if core.idle_open_since is not None:
            raise IdleTransitionError(f"core {core.core_id} is already idle")
        core.idle_open_since = now
    elif event == "task_assigned":
        if core.idle_open_since is None:
            raise IdleTransitionError(f"core {core.core_id} has no open idle interval")
        core.idle_history.append(max(0.0, now - core.idle_open_since))
        core.idle_open_since = None
    else:
        raise ValueError(f"unknown idle event {event!r}")
    return core


def reaction(e_norm: float, pos_gain: float = 0.785, neg_gain: float = 1.55) -> float:
    """Piecewise reaction: slow tan branch for idle cores, fast arctan for oversubscription."""
    if not (-1.0 <= e_norm <= 1.0):
        raise ValueError(f"normalized error {e_norm} outside [-1, 1]")
    if e_norm >= 0:
        return math.tan(pos_gain * e_norm)
    return math.atan(neg_gain * e_norm)


@dataclass
class IdlingDecision:
    n_total: int
    n_sleeping: int
    tasks: int
    error: float
    reaction: float
    correction: int
    transitions: List[Tuple[int, IdleState]]

    def csv_row(self, t: float) -> list:
        return [t, self.n_total, self.n_sleeping, self.tasks, self.error, self.reaction, self.correction]


IDLING_CSV_HEADER = ["t", "N", "C_SLP", "T", "e", "F", "e_corr"]


def plan_idling(
    cores: Sequence[ManagedCore], oversub_tasks: int, params: ReactionParams = ReactionParams()
) -> IdlingDecision:
    """Run one pass of selective core idling and return the full decision."""
    if oversub_tasks < 0:
        raise ValueError("oversub_tasks must be >= 0")
    n = len(cores)
    if n == 0:
        return IdlingDecision(0, 0, 0, 0.0, 0.0, 0, [])
    active = sum(1 for c in cores if c.idle_state is IdleState.ACTIVE)
    normal_tasks = sum(1 for c in cores if c.assigned_task is not None)
    sleeping = n - active
    tasks = min(n, normal_tasks + oversub_tasks)
    e = (n - sleeping - tasks) / n
    f = reaction(e, params.pos_gain, params.neg_gain)
    corr = int(n * f)
    delta = abs(corr)
    transitions: List[Tuple[int, IdleState]] = []
    if corr > 0:
        free = [c for c in cores if c.idle_state is IdleState.ACTIVE and c.assigned_task is None]
        free.sort(key=lambda c: -c.age_estimate)
        transitions = [(c.core_id, IdleState.DEEP_IDLE) for c in free[:delta]]
    elif corr < 0:
        asleep = [c for c in cores if c.idle_state is IdleState.DEEP_IDLE]
        asleep.sort(key=lambda c: c.age_estimate)
        transitions = [(c.core_id, IdleState.ACTIVE) for c in asleep[:delta]]
    return IdlingDecision(n, sleeping, tasks, e, f, corr, transitions)


def adjust_sleeping_cores(
    cores: Sequence[ManagedCore], oversub_tasks: int, params: ReactionParams = ReactionParams()
) -> List[Tuple[int, IdleState]]:
    """Idle-state changes for one pass; callers apply them in order."""
    return plan_idling(cores, oversub_tasks, params).transitions
