"""Discrete-event simulation of CPU task placement, idle-state control and aging.

Each machine time-shares its active cores among running tasks with a
processor-sharing approximation: when more tasks run than there are
active cores, every task on the machine progresses at
``N_active / T_total`` of its dedicated-core speed. This is tracked with a
per-machine virtual clock, so completions only need rescheduling when the
slowdown factor changes.

Aging is applied lazily: a core's threshold-voltage shift is advanced
whenever its thermal state is about to change and at every idling pass.
"""

from __future__ import annotations

import csv
import heapq
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .aging import (
    AgingParams,
    CoreAging,
    ThermalState,
    adf,
    advance_vth,
    initial_core_frequency,
    sample_variation_grid,
)
from .baselines import CoreWorkLedger, least_aged_select_core, linux_select_core, load_weights_csv
from .config import ExperimentConfig
from .metrics import SampleSeries
from .policy import (
    IDLING_CSV_HEADER,
    IdleState,
    ManagedCore,
    plan_idling,
    record_idle_transition,
    select_core,
)
from .workload import InferenceTask, Request, expand_request

log = logging.getLogger(__name__)

# event priorities at equal time
COMPLETION, IDLING_PASS, ARRIVAL = 0, 1, 2

_EPS_V = 1e-12


class SimulationError(RuntimeError):
    pass


@dataclass
class SimCore:
    aging: CoreAging
    managed: ManagedCore

    @property
    def core_id(self) -> int:
        return self.managed.core_id

    def thermal_state(self) -> ThermalState:
        if self.managed.idle_state is IdleState.DEEP_IDLE:
            return ThermalState.DEEP_IDLE
        if self.managed.assigned_task is not None:
            return ThermalState.ACTIVE_ALLOCATED
        return ThermalState.ACTIVE_UNALLOCATED


def apply_state_interval(
    core: SimCore,
    until: float,
    params: AgingParams,
    time_scale: float = 1.0,
    adf_table: Optional[Dict[ThermalState, float]] = None,
) -> SimCore:
    """Age ``core`` in its current thermal state from its last update to ``until``."""
    a = core.aging
    if until < a.last_update:
        raise SimulationError(f"time regression on core {core.core_id}: {until} < {a.last_update}")
    tau = (until - a.last_update) * time_scale
    if tau > 0 and not a.failed:
        state = core.thermal_state()
        value = adf_table[state] if adf_table is not None else adf(state, params)
        a.vth_shift = advance_vth(a.vth_shift, value, tau, params.n_exp)
        if a.vth_shift >= params.headroom:
            a.failed = True
    a.tau_applied += tau
    a.last_update = until
    return core


class _Task:
    __slots__ = ("tid", "task_type", "nominal", "v_finish", "core", "assigned_at")

    def __init__(self, tid: int, task_type: str, nominal: float):
        self.tid = tid
        self.task_type = task_type
        self.nominal = nominal
        self.v_finish = 0.0
        self.core = -1
        self.assigned_at = 0.0


class Machine:
    def __init__(self, machine_id: int, cores: List[SimCore], policy: str):
        self.machine_id = machine_id
        self.cores = cores
        self.policy = policy
        self.oversub_queue: "OrderedDict[int, _Task]" = OrderedDict()
        self.running: List[Tuple[float, int]] = []
        self.tasks: Dict[int, _Task] = {}
        self.vclock = 0.0
        self.last_t = 0.0
        self.rate = 1.0
        self.version = 0
        self.ledger = CoreWorkLedger(len(cores))
        self.rng: Optional[np.random.Generator] = None
        self.weights: Optional[List[float]] = None
        self.pending_arrivals = 0
        self.completed = 0
        self.working: List[ManagedCore] = []
        self.n_active = 0
        self.n_sleeping = 0
        self.recount()

    def recount(self) -> None:
        """Refresh cached active/sleeping counts after idle-state changes."""
        live = [c for c in self.cores if not c.aging.failed]
        self.working = [c.managed for c in live if c.managed.idle_state is IdleState.ACTIVE]
        self.n_active = len(self.working)
        self.n_sleeping = sum(1 for c in self.cores if c.managed.idle_state is IdleState.DEEP_IDLE)

    @property
    def n_cores(self) -> int:
        return len(self.cores)

    def active_cores(self) -> List[SimCore]:
        return [self.cores[c.core_id] for c in self.working]

    def advance_clock(self, t: float) -> None:
        self.vclock += (t - self.last_t) * self.rate
        self.last_t = t

    def refresh_rate(self) -> None:
        n_active = self.n_active
        total = len(self.tasks)
        if total <= n_active:
            self.rate = 1.0
        elif n_active == 0:
            self.rate = 0.0
        else:
            self.rate = n_active / total


@dataclass
class EventLog:
    """Ordered (time, machine, kind, task, core) records."""

    rows: List[tuple] = field(default_factory=list)
    enabled: bool = True

    def add(self, t: float, machine: int, kind: str, task: int = -1, core: int = -1) -> None:
        if self.enabled:
            self.rows.append((t, machine, kind, task, core))

    def write_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["time", "machine", "kind", "task", "core"])
        for t, m, k, task, core in self.rows:
            w.writerow([repr(float(t)), m, k, task, core])


@dataclass
class SimulationResult:
    policy: str
    seed: int
    end_time: float
    machines: List[Machine]
    samples: SampleSeries
    events: EventLog
    idling_log: List[list]
    task_count: int
    completed: int
    params: AgingParams
    nominal_frequency: float

    def final_cores(self) -> List[Tuple[int, int, float, float, float, bool]]:
        """(machine, core_id, f0, vth_shift, frequency, failed) per core."""
        rows = []
        for m in self.machines:
            for c in m.cores:
                a = c.aging
                f = 0.0 if a.failed else a.f0 * (1.0 - a.vth_shift / self.params.headroom)
                rows.append((m.machine_id, c.core_id, a.f0, a.vth_shift, f, a.failed))
        return rows

    def machine_frequencies(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Per machine, (f0 array, final frequency array)."""
        out = []
        h = self.params.headroom
        for m in self.machines:
            f0 = np.array([c.aging.f0 for c in m.cores])
            vth = np.array([c.aging.vth_shift for c in m.cores])
            out.append((f0, np.maximum(f0 * (1.0 - vth / h), 0.0)))
        return out

    def write_final_cores_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["machine", "core_id", "f0", "vth_shift", "frequency", "failed"])
        for m, cid, f0, vth, f, failed in self.final_cores():
            w.writerow([m, cid, repr(float(f0)), repr(float(vth)), repr(float(f)), int(failed)])

    def write_idling_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["machine"] + IDLING_CSV_HEADER)
        w.writerows(self.idling_log)


def expand_trace(
    trace: Sequence[Request], config: ExperimentConfig
) -> List[Tuple[int, InferenceTask]]:
    """Route requests to machines and expand them into (machine, task) pairs."""
    model = config.duration_model()
    interval = config.raw["workload"]["iteration_interval_s"]
    order = sorted(range(len(trace)), key=lambda i: trace[i].arrival)
    out: List[Tuple[int, InferenceTask]] = []
    rr = 0
    for rid, idx in enumerate(order):
        req = trace[idx]
        if req.machine is not None:
            if req.machine >= config.machines:
                raise SimulationError(f"request routed to machine {req.machine} beyond cluster size")
            m = req.machine
        else:
            m = rr % config.machines
            rr += 1
        for task in expand_request(req, model, rid, interval):
            out.append((m, task))
    return out


def build_machine(
    machine_id: int, config: ExperimentConfig, policy: str, seed: int
) -> Machine:
    v = config.raw["variation"]
    n = config.cores_per_vm
    grid_seed = np.random.SeedSequence([seed, machine_id, 1])
    for attempt in range(100):
        grid = sample_variation_grid(
            v["n_chip"], v["alpha"], config.mean_p, v["sigma_p"],
            np.random.SeedSequence([seed, machine_id, 1, attempt]) if attempt else grid_seed,
            n_cores=n,
        )
        try:
            f0s = [initial_core_frequency(grid, i, v["k_prime"]) for i in range(n)]
            break
        except ValueError:
            log.warning("machine %d: degenerate variation draw, resampling", machine_id)
    else:
        raise SimulationError("could not draw a positive variation grid")
    cores = [SimCore(CoreAging(f0=f0), ManagedCore(core_id=i)) for i, f0 in enumerate(f0s)]
    for c in cores:
        record_idle_transition(c.managed, "became_idle", 0.0)
    m = Machine(machine_id, cores, policy)
    if policy == "linux":
        m.rng = np.random.default_rng(np.random.SeedSequence([seed, machine_id, 2]))
        path = config.raw["policy"]["linux_weights_csv"]
        if path:
            with open(config.resolve(path)) as fh:
                m.weights = load_weights_csv(fh, n)
    return m


class Simulator:
    def __init__(
        self,
        config: ExperimentConfig,
        trace: Sequence[Request],
        seed: int,
        policy: Optional[str] = None,
        horizon: Optional[float] = None,
        params: Optional[AgingParams] = None,
        record_events: Optional[bool] = None,
    ):
        self.config = config
        self.policy = policy or config.policies[0]
        if self.policy not in ("proposed", "linux", "least_aged"):
            raise SimulationError(f"unknown policy {self.policy!r}")
        if config.machines < 1 or config.cores_per_vm < 1:
            raise SimulationError("cluster needs at least one machine and one core")
        self.seed = seed
        self.params = params or config.aging_params()
        self.scale = config.aging_time_scale
        self.reaction = config.reaction_params()
        self.age_metric = config.raw["policy"]["age_metric"]
        self.debug_idling = bool(config.raw["policy"]["debug_idling"])
        self.f_nom = config.nominal_frequency
        self.adf_table = {s: adf(s, self.params) for s in ThermalState}
        self.tasks = expand_trace(trace, config)
        # A request's tasks run in sequence: each is released by its
        # predecessor's completion plus the nominal gap between them, so
        # contention delays propagate down the request instead of piling up.
        self._successor = [-1] * len(self.tasks)
        self._gap = [0.0] * len(self.tasks)
        for i in range(len(self.tasks) - 1):
            cur, nxt = self.tasks[i][1], self.tasks[i + 1][1]
            if nxt.request_id == cur.request_id:
                self._successor[i] = i + 1
                self._gap[i + 1] = max(0.0, nxt.start - (cur.start + cur.nominal_duration))
        if horizon is None:
            horizon = config.raw["horizon_s"]
        if horizon is None:
            horizon = max((t.start for _, t in self.tasks), default=0.0)
        self.horizon = float(horizon)
        self.machines = [build_machine(i, config, self.policy, seed) for i in range(config.machines)]
        self.samples = SampleSeries([m.n_cores for m in self.machines])
        if record_events is None:
            record_events = bool(config.raw["output"]["event_log"])
        self.events = EventLog(enabled=record_events)
        self.idling_log: List[list] = []
        self._heap: List[tuple] = []
        self._seq = 0
        self.completed = 0
        self.now = 0.0
        self._failed: set = set()

    # -- event queue -------------------------------------------------------
    def _push(self, t: float, machine: int, kind: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, machine, kind, self._seq, payload))

    def _age(self, core: SimCore, t: float) -> None:
        was_failed = core.aging.failed
        apply_state_interval(core, t, self.params, self.scale, self.adf_table)
        if core.aging.failed and not was_failed:
            log.warning("core %d reached end of life at t=%.6g", core.core_id, t)
            self._failed.add(core.core_id)

    def _core_freq(self, core: SimCore) -> float:
        return core.aging.f0 * (1.0 - core.aging.vth_shift / self.params.headroom)

    def _sample(self, m: Machine, t: float) -> None:
        self.samples.append(t, m.machine_id, m.n_sleeping, len(m.tasks), len(m.oversub_queue))

    def _reschedule(self, m: Machine) -> None:
        m.refresh_rate()
        m.version += 1
        if m.running and m.rate > 0:
            v_top = m.running[0][0]
            t_c = self.now + max(0.0, v_top - m.vclock) / m.rate
            self._push(t_c, m.machine_id, COMPLETION, m.version)

    # -- placement ---------------------------------------------------------
    def _select(self, m: Machine, t: float) -> Optional[int]:
        working = m.working
        if self.policy == "proposed":
            return select_core(working, t)
        if self.policy == "linux":
            return linux_select_core(working, m.weights, m.rng)
        return least_aged_select_core(working, m.ledger)

    def _house(self, m: Machine, task: _Task, core: SimCore, t: float) -> None:
        self._age(core, t)
        record_idle_transition(core.managed, "task_assigned", t)
        core.managed.assigned_task = task.tid
        task.core = core.core_id
        task.assigned_at = t

    def _release(self, m: Machine, task: _Task, t: float) -> Optional[SimCore]:
        if task.core < 0:
            m.oversub_queue.pop(task.tid, None)
            return None
        core = m.cores[task.core]
        self._age(core, t)
        m.ledger.add(core.core_id, t - task.assigned_at)
        core.managed.assigned_task = None
        record_idle_transition(core.managed, "became_idle", t)
        return core

    def _promote(self, m: Machine, core: SimCore, t: float) -> None:
        if not m.oversub_queue or core.aging.failed:
            return
        tid, task = m.oversub_queue.popitem(last=False)
        self._house(m, task, core, t)
        self.events.add(t, m.machine_id, "promote", tid, core.core_id)

    # -- handlers ----------------------------------------------------------
    def _on_arrival(self, m: Machine, tid: int, task: InferenceTask, t: float) -> None:
        m.pending_arrivals -= 1
        rt = _Task(tid, task.task_type, task.nominal_duration)
        cid = self._select(m, t)
        if cid is None:
            work = task.nominal_duration
            m.oversub_queue[tid] = rt
            self.events.add(t, m.machine_id, "oversub", tid)
        else:
            core = m.cores[cid]
            self._house(m, rt, core, t)
            work = task.nominal_duration * self.f_nom / self._core_freq(core)
            self.events.add(t, m.machine_id, "assign", tid, cid)
        rt.v_finish = m.vclock + work
        m.tasks[tid] = rt
        heapq.heappush(m.running, (rt.v_finish, tid))

    def _on_completion(self, m: Machine, t: float) -> None:
        m.vclock = max(m.vclock, m.running[0][0])
        while m.running and m.running[0][0] <= m.vclock + _EPS_V:
            _, tid = heapq.heappop(m.running)
            task = m.tasks.pop(tid)
            core = self._release(m, task, t)
            self.completed += 1
            m.completed += 1
            self.events.add(t, m.machine_id, "complete", tid, task.core)
            if core is not None:
                self._promote(m, core, t)
            nxt = self._successor[tid]
            if nxt >= 0:
                self._push(t + self._gap[nxt], m.machine_id, ARRIVAL, nxt)

    def _on_idling_pass(self, m: Machine, t: float) -> None:
        live = [c for c in m.cores if not c.aging.failed]
        for c in m.cores:
            self._age(c, t)
        for c in live:
            if self.age_metric == "vth":
                c.managed.age_estimate = c.aging.vth_shift
            else:
                c.managed.age_estimate = self.f_nom - self._core_freq(c)
        decision = plan_idling([c.managed for c in live], len(m.oversub_queue), self.reaction)
        if self.debug_idling:
            self.idling_log.append([m.machine_id] + decision.csv_row(t))
        woken = []
        for cid, state in decision.transitions:
            core = m.cores[cid]
            core.managed.idle_state = state
            if state is IdleState.DEEP_IDLE:
                self.events.add(t, m.machine_id, "sleep", -1, cid)
            else:
                self.events.add(t, m.machine_id, "wake", -1, cid)
                woken.append(core)
        m.recount()
        for core in woken:
            self._promote(m, core, t)

    # -- main loop ---------------------------------------------------------
    def run(self) -> SimulationResult:
        for tid, (mid, task) in enumerate(self.tasks):
            self.machines[mid].pending_arrivals += 1
            if tid == 0 or self._successor[tid - 1] != tid:
                self._push(task.start, mid, ARRIVAL, tid)
        period = self.reaction.idling_period
        if self.policy == "proposed":
            for m in self.machines:
                self._push(0.0, m.machine_id, IDLING_PASS, 0)
        for m in self.machines:
            self._sample(m, 0.0)

        heap = self._heap
        while heap:
            t, mid, kind, _, payload = heapq.heappop(heap)
            m = self.machines[mid]
            if kind == COMPLETION and payload != m.version:
                continue
            if t < self.now:
                raise SimulationError(f"event at {t} precedes current time {self.now}")
            self.now = t
            m.advance_clock(t)
            if kind == ARRIVAL:
                self._on_arrival(m, payload, self.tasks[payload][1], t)
            elif kind == COMPLETION:
                self._on_completion(m, t)
            else:
                self._on_idling_pass(m, t)
                nxt = payload + 1
                t_next = nxt * period
                if t_next <= self.horizon or m.tasks or m.pending_arrivals:
                    self._push(t_next, mid, IDLING_PASS, nxt)
            if self._failed:
                m.recount()
                self._failed.clear()
            self._reschedule(m)
            self._sample(m, t)

        end = max(self.horizon, self.now)
        for m in self.machines:
            for c in m.cores:
                self._age(c, end)
            self._sample(m, end)
        if self.completed != len(self.tasks):
            raise SimulationError(f"{len(self.tasks) - self.completed} tasks never completed")
        return SimulationResult(
            policy=self.policy,
            seed=self.seed,
            end_time=end,
            machines=self.machines,
            samples=self.samples,
            events=self.events,
            idling_log=self.idling_log,
            task_count=len(self.tasks),
            completed=self.completed,
            params=self.params,
            nominal_frequency=self.f_nom,
        )


def run_simulation(
    config: ExperimentConfig,
    trace: Sequence[Request],
    seed: int,
    policy: Optional[str] = None,
    **kwargs,
) -> SimulationResult:
    """Simulate ``trace`` on the configured cluster under one policy."""
    return Simulator(config, trace, seed, policy, **kwargs).run()
