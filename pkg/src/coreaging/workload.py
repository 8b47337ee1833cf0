"""Request traces and their expansion into CPU inference tasks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, TextIO

import numpy as np

TASK_TYPES = (
    "finish_flow",
    "finish_request",
    "finish_task",
    "submit",
    "submit_chain",
    "submit_flow",
    "submit_task",
    "alloc_memory",
    "free_memory",
    "start_iteration",
    "flow_completion",
)

PRE_TASKS = ("submit", "submit_chain", "submit_flow", "submit_task", "alloc_memory")
POST_TASKS = ("flow_completion", "finish_task", "finish_flow", "finish_request", "free_memory")

TRACE_HEADER = ["arrival_s", "input_tokens", "output_tokens"]
TRACE_HEADER_ROUTED = TRACE_HEADER + ["machine"]


class TraceParseError(ValueError):
    pass


class WorkloadConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    arrival: float
    input_tokens: int
    output_tokens: int
    machine: Optional[int] = None

    def __post_init__(self) -> None:
        if self.arrival < 0 or not math.isfinite(self.arrival):
            raise ValueError(f"arrival must be finite and >= 0, got {self.arrival}")
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError("token counts must be >= 1")
        if self.machine is not None and self.machine < 0:
            raise ValueError("machine index must be >= 0")


@dataclass(frozen=True)
class InferenceTask:
    task_type: str
    start: float
    nominal_duration: float
    request_id: int


@dataclass(frozen=True)
class TaskCost:
    base: float
    per_token: float = 0.0
    token_source: str = "none"  # input | output | none

    def __post_init__(self) -> None:
        if self.base < 0 or self.per_token < 0 or self.base + self.per_token <= 0:
            raise WorkloadConfigError("task cost needs base, per_token >= 0 and a positive sum")
        if self.token_source not in ("input", "output", "none"):
            raise WorkloadConfigError(f"bad token_source {self.token_source!r}")

    def duration(self, req: Request) -> float:
        if self.token_source == "input":
            return self.base + self.per_token * req.input_tokens
        if self.token_source == "output":
            return self.base + self.per_token * req.output_tokens
        return self.base


class TaskDurationModel:
    """Nominal CPU seconds per task type, at nominal core frequency."""

    def __init__(self, costs: Mapping[str, TaskCost]):
        self.costs = dict(costs)

    @classmethod
    def default(cls) -> "TaskDurationModel":
        costs = {t: TaskCost(0.002) for t in TASK_TYPES}
        costs["start_iteration"] = TaskCost(0.001)
        costs["submit"] = TaskCost(0.002, 0.00001, "input")
        return cls(costs)

    @classmethod
    def from_dict(cls, overrides: Mapping[str, Mapping]) -> "TaskDurationModel":
        model = cls.default()
        for name, spec in overrides.items():
            if name not in TASK_TYPES:
                raise WorkloadConfigError(f"unknown task type {name!r}")
            model.costs[name] = TaskCost(**spec)
        return model

    def to_dict(self) -> Dict[str, dict]:
        return {
            k: {"base": c.base, "per_token": c.per_token, "token_source": c.token_source}
            for k, c in self.costs.items()
        }

    def __getitem__(self, task_type: str) -> TaskCost:
        try:
            return self.costs[task_type]
        except KeyError:
            raise WorkloadConfigError(f"duration model has no entry for {task_type!r}") from None


def parse_trace(stream: TextIO) -> List[Request]:
    """Read a request trace CSV (``arrival_s,input_tokens,output_tokens[,machine]``)."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        return []
    if header not in (TRACE_HEADER, TRACE_HEADER_ROUTED):
        raise TraceParseError(f"line 1: unexpected header {','.join(header)}")
    routed = len(header) == 4
    out = []
    for row in reader:
        lineno = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            raise TraceParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            machine = None
            if routed and row[3].strip() != "":
                machine = int(row[3])
            out.append(Request(float(row[0]), int(row[1]), int(row[2]), machine))
        except ValueError as exc:
            raise TraceParseError(f"line {lineno}: {exc}") from exc
    return out


def write_trace(requests: Iterable[Request], stream: TextIO) -> None:
    requests = list(requests)
    routed = any(r.machine is not None for r in requests)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(TRACE_HEADER_ROUTED if routed else TRACE_HEADER)
    for r in requests:
        row = [repr(r.arrival), r.input_tokens, r.output_tokens]
        if routed:
            row.append("" if r.machine is None else r.machine)
        writer.writerow(row)


def expand_request(
    req: Request,
    model: TaskDurationModel,
    request_id: int = 0,
    iteration_interval: float = 0.025,
) -> List[InferenceTask]:
    """Expand one request into its CPU tasks with fixed start times.

    Setup tasks run back to back from the arrival, then one
    ``start_iteration`` per output token every ``iteration_interval``, then
    the teardown tasks back to back after the last iteration.
    """
    tasks: List[InferenceTask] = []
    t = req.arrival
    for name in PRE_TASKS:
        d = model[name].duration(req)
        tasks.append(InferenceTask(name, t, d, request_id))
        t += d
    it_cost = model["start_iteration"]
    d_it = it_cost.duration(req)
    first = t
    for k in range(req.output_tokens):
        tasks.append(InferenceTask("start_iteration", first + k * iteration_interval, d_it, request_id))
    t = first + (req.output_tokens - 1) * iteration_interval + d_it
    for name in POST_TASKS:
        d = model[name].duration(req)
        tasks.append(InferenceTask(name, t, d, request_id))
        t += d
    return tasks


@dataclass(frozen=True)
class TokenDistribution:
    """Lognormal token count, parameterized by its median, clipped to [1, maximum]."""

    median: float
    sigma: float
    maximum: int

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        x = rng.lognormal(math.log(self.median), self.sigma, size)
        return np.clip(np.rint(x), 1, self.maximum).astype(int)


# medians follow the public Azure coding trace profile
DEFAULT_INPUT_TOKENS = TokenDistribution(median=1500.0, sigma=1.0, maximum=8192)
DEFAULT_OUTPUT_TOKENS = TokenDistribution(median=13.0, sigma=1.0, maximum=2048)


def generate_synthetic_trace(
    rate: float,
    duration: float,
    input_dist: TokenDistribution = DEFAULT_INPUT_TOKENS,
    output_dist: TokenDistribution = DEFAULT_OUTPUT_TOKENS,
    seed=0,
) -> List[Request]:
    """Poisson arrivals over ``[0, duration)`` with lognormal token counts."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    if duration <= 0:
        return []
    rng = np.random.default_rng(seed)
    n = int(rng.poisson(rate * duration))
    arrivals = np.sort(rng.uniform(0.0, duration, n))
    inp = input_dist.sample(rng, n)
    outp = output_dist.sample(rng, n)
    return [Request(float(a), int(i), int(o)) for a, i, o in zip(arrivals, inp, outp)]
