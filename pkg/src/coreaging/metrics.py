"""Evaluation metrics: frequency CV, degradation, oversubscription and embodied carbon."""

from __future__ import annotations

import csv
from array import array
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

PERCENTILES = (1, 50, 90, 99)


class MetricError(ValueError):
    pass


class FailedCPUError(MetricError):
    """Mean core frequency is non-positive."""


class NoAgingError(MetricError):
    """Degradation is zero, so lifetime extension is undefined."""


@dataclass(frozen=True)
class MetricSample:
    t: float
    machine: int
    n_total: int
    n_idle: int
    n_running: int
    n_oversub: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.n_idle <= self.n_total) or self.n_running < 0:
            raise MetricError(f"inconsistent sample {self}")


class SampleSeries:
    """Columnar store of per-machine observations taken at event boundaries."""

    def __init__(self, n_total: Sequence[int]):
        self.n_total = list(n_total)
        self.t = array("d")
        self.machine = array("i")
        self.n_idle = array("i")
        self.n_running = array("i")
        self.n_oversub = array("i")

    def append(self, t: float, machine: int, n_idle: int, n_running: int, n_oversub: int = 0) -> None:
        self.t.append(t)
        self.machine.append(machine)
        self.n_idle.append(n_idle)
        self.n_running.append(n_running)
        self.n_oversub.append(n_oversub)

    @classmethod
    def from_samples(cls, samples: Iterable[MetricSample]) -> "SampleSeries":
        samples = list(samples)
        n_machines = max((s.machine for s in samples), default=-1) + 1
        totals = [0] * n_machines
        for s in samples:
            totals[s.machine] = s.n_total
        out = cls(totals)
        for s in samples:
            out.append(s.t, s.machine, s.n_idle, s.n_running, s.n_oversub)
        return out

    def __len__(self) -> int:
        return len(self.t)

    def arrays(self) -> Dict[str, np.ndarray]:
        m = np.frombuffer(self.machine, dtype=np.int32) if len(self) else np.zeros(0, np.int32)
        totals = np.asarray(self.n_total, dtype=float)
        return {
            "t": np.asarray(self.t, dtype=float),
            "machine": m.astype(int),
            "n_total": totals[m] if len(self) else np.zeros(0),
            "n_idle": np.asarray(self.n_idle, dtype=float),
            "n_running": np.asarray(self.n_running, dtype=float),
            "n_oversub": np.asarray(self.n_oversub, dtype=float),
        }

    def write_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["t", "machine", "n_total", "n_idle", "n_running", "n_oversub"])
        for i in range(len(self)):
            m = self.machine[i]
            w.writerow([repr(self.t[i]), m, self.n_total[m], self.n_idle[i], self.n_running[i], self.n_oversub[i]])

    @classmethod
    def read_csv(cls, stream: TextIO) -> "SampleSeries":
        reader = csv.reader(stream)
        header = next(reader, None)
        if header != ["t", "machine", "n_total", "n_idle", "n_running", "n_oversub"]:
            raise MetricError(f"unexpected samples header {header}")
        totals: Dict[int, int] = {}
        rows = []
        for r in reader:
            m = int(r[1])
            totals[m] = int(r[2])
            rows.append((float(r[0]), m, int(r[3]), int(r[4]), int(r[5])))
        out = cls([totals.get(i, 0) for i in range(max(totals, default=-1) + 1)])
        for row in rows:
            out.append(*row)
        return out


def frequency_cv(freqs: Sequence[float]) -> float:
    """Population standard deviation over mean."""
    f = np.asarray(freqs, dtype=float)
    if f.size < 2:
        raise MetricError("frequency CV needs at least two cores")
    mean = f.mean()
    if mean <= 0:
        raise FailedCPUError("mean core frequency is non-positive")
    return float(f.std() / mean)


def mean_degradation(f0s: Sequence[float], freqs: Sequence[float]) -> float:
    a = np.asarray(f0s, dtype=float)
    b = np.asarray(freqs, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.shape} vs {b.shape}")
    return float((a - b).mean())


def _machine_view(samples, machine: int) -> Tuple[np.ndarray, np.ndarray]:
    if not isinstance(samples, SampleSeries):
        samples = SampleSeries.from_samples(samples)
    arr = samples.arrays()
    sel = arr["machine"] == machine
    t = arr["t"][sel]
    if np.any(np.diff(t) < 0):
        raise MetricError("samples are not time-ordered")
    excess = arr["n_running"][sel] - (arr["n_total"][sel] - arr["n_idle"][sel])
    return t, excess


def oversubscription_integral(samples, machine: int, end: Optional[float] = None) -> float:
    """Integral of excess tasks over active cores, in task-seconds.

    Samples hold piecewise-constant state until the next sample; ``end``
    extends the last sample's state.
    """
    t, excess = _machine_view(samples, machine)
    if t.size == 0:
        return 0.0
    if end is not None:
        if end < t[-1]:
            raise MetricError("end precedes the last sample")
        t = np.append(t, end)
    dt = np.diff(t)
    return float(np.sum(np.maximum(excess[: dt.size], 0.0) * dt))


def normalized_idle(n_total, n_idle, n_running) -> np.ndarray:
    """((N - N_idle) - T) / N, clamped to [-1, 1]; negative means oversubscribed."""
    n_total = np.asarray(n_total, dtype=float)
    v = ((n_total - np.asarray(n_idle, dtype=float)) - np.asarray(n_running, dtype=float)) / n_total
    return np.clip(v, -1.0, 1.0)


def normalized_idle_series(samples) -> Tuple[np.ndarray, Dict[str, float]]:
    """Pooled normalized-idle values over all machines, plus p1/p50/p90 and min."""
    if not isinstance(samples, SampleSeries):
        samples = SampleSeries.from_samples(samples)
    arr = samples.arrays()
    v = normalized_idle(arr["n_total"], arr["n_idle"], arr["n_running"])
    if v.size == 0:
        return v, {}
    p1, p50, p90 = np.percentile(v, [1, 50, 90])
    return v, {"p1": float(p1), "p50": float(p50), "p90": float(p90), "min": float(v.min())}


@dataclass(frozen=True)
class CarbonParams:
    base_lifetime: float = 3.0  # years
    cpu_embodied: float = 278.3  # kgCO2eq per server CPU over base_lifetime
    machines: int = 22

    def __post_init__(self) -> None:
        if self.base_lifetime <= 0 or self.cpu_embodied <= 0 or self.machines <= 0:
            raise MetricError("carbon parameters must be positive")

    @property
    def baseline_yearly(self) -> float:
        return self.machines * self.cpu_embodied / self.base_lifetime


def estimate_yearly_embodied(
    deg_technique: float, deg_linux: float, params: CarbonParams = CarbonParams()
) -> Tuple[float, float]:
    """Yearly cluster CPU embodied carbon and its reduction relative to linux.

    Lifetime scales linearly with the inverse degradation ratio.
    """
    if deg_technique <= 0 or deg_linux <= 0:
        raise NoAgingError("no measurable aging; lifetime extension is undefined")
    lifetime = params.base_lifetime * (deg_linux / deg_technique)
    yearly = params.machines * params.cpu_embodied / lifetime
    return yearly, 1.0 - deg_technique / deg_linux


def percentiles(values: Sequence[float], qs: Sequence[float] = PERCENTILES) -> Dict[str, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {}
    return {f"p{q:g}": float(x) for q, x in zip(qs, np.percentile(v, qs))}


def machine_metrics(freq_pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Dict[str, List[float]]:
    """Per-machine CV of final frequencies and mean frequency degradation."""
    cvs, degs = [], []
    for f0, f in freq_pairs:
        cvs.append(frequency_cv(f))
        degs.append(mean_degradation(f0, f))
    return {"cv": cvs, "degradation": degs}


def summarize_run(result) -> dict:
    """Scalar summary of one simulation result (used by reports and acceptance)."""
    mm = machine_metrics(result.machine_frequencies())
    _, idle = normalized_idle_series(result.samples)
    oversub = [
        oversubscription_integral(result.samples, m, end=result.end_time)
        for m in range(len(result.machines))
    ]
    f0_all = np.concatenate([f0 for f0, _ in result.machine_frequencies()])
    f_all = np.concatenate([f for _, f in result.machine_frequencies()])
    return {
        "policy": result.policy,
        "seed": result.seed,
        "end_time": result.end_time,
        "tasks": result.task_count,
        "completed": result.completed,
        "machine_cv": mm["cv"],
        "machine_degradation": mm["degradation"],
        "cv": percentiles(mm["cv"]),
        "degradation": percentiles(mm["degradation"]),
        "mean_degradation": mean_degradation(f0_all, f_all),
        "mean_relative_degradation": float(np.mean((f0_all - f_all) / f0_all)),
        "normalized_idle": idle,
        "oversub_task_seconds": float(np.sum(oversub)),
        "max_sleeping": int(max(result.samples.n_idle, default=0)),
    }
