"""NBTI aging model for CPU cores.

Covers the reaction-diffusion threshold-voltage recursion, the aging
damage factor (ADF), frequency degradation, spatially correlated process
variation of initial core frequencies, and calibration of the fitting
constant ``K`` against a lifetime anchor.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

SECONDS_PER_YEAR = 365.25 * 24 * 3600.0
BOLTZMANN_EV = 8.617333262e-5  # eV/K


class AgingError(ValueError):
    """Invalid aging parameters or arguments."""


class GridConstructionError(AgingError):
    """The spatial covariance matrix could not be factorized."""


class DegenerateDrawError(AgingError):
    """A sampled grid cell is non-positive, so f0 is undefined."""


class EndOfLifeError(AgingError):
    """Threshold-voltage shift has consumed the whole voltage headroom."""


class ThermalState(str, Enum):
    """Core states with distinct steady-state temperatures."""

    ACTIVE_ALLOCATED = "active_allocated"
    ACTIVE_UNALLOCATED = "active_unallocated"
    DEEP_IDLE = "deep_idle"


def _default_temps() -> Dict[ThermalState, float]:
    return {
        ThermalState.ACTIVE_ALLOCATED: 327.15,
        ThermalState.ACTIVE_UNALLOCATED: 324.23,
        ThermalState.DEEP_IDLE: 321.15,
    }


@dataclass(frozen=True)
class AgingParams:
    """Physical and fitting constants of the NBTI model.

    ``b_field`` is in eV*nm/V so that ``b_field * v_dd / t_ox`` is an energy.
    The default leaves the net activation energy positive, which makes the
    ADF grow with temperature. ``k_fit`` is normally produced by
    :func:`calibrate_k`.
    """

    k_fit: float = 1.0
    e0: float = 0.08
    boltzmann: float = BOLTZMANN_EV
    b_field: float = 0.04
    t_ox: float = 1.2
    v_dd: float = 0.9
    v_th0: float = 0.35
    n_exp: float = 1.0 / 6.0
    stress_y: float = 1.0
    temp_table: Dict[ThermalState, float] = field(default_factory=_default_temps)

    def __post_init__(self) -> None:
        if not (self.v_dd > self.v_th0 > 0):
            raise AgingError(f"need v_dd > v_th0 > 0, got {self.v_dd}, {self.v_th0}")
        if not (0 < self.n_exp < 1):
            raise AgingError(f"n_exp must lie in (0, 1), got {self.n_exp}")
        if not (0 <= self.stress_y <= 1):
            raise AgingError(f"stress_y must lie in [0, 1], got {self.stress_y}")
        if self.k_fit < 0 or self.t_ox <= 0 or self.boltzmann <= 0:
            raise AgingError("k_fit must be >= 0; t_ox and boltzmann > 0")
        missing = set(ThermalState) - set(self.temp_table)
        if missing:
            raise AgingError(f"temp_table lacks {sorted(s.value for s in missing)}")
        temps = self.temp_table
        if any(t <= 0 for t in temps.values()):
            raise AgingError("temperatures must be positive (kelvin)")
        if not (
            temps[ThermalState.DEEP_IDLE]
            < temps[ThermalState.ACTIVE_UNALLOCATED]
            < temps[ThermalState.ACTIVE_ALLOCATED]
        ):
            raise AgingError("temperatures must satisfy deep idle < unallocated < allocated")

    @property
    def headroom(self) -> float:
        """Voltage headroom ``v_dd - v_th0``."""
        return self.v_dd - self.v_th0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["temp_table"] = {s.value: t for s, t in self.temp_table.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgingParams":
        d = dict(d)
        if "temp_table" in d:
            d["temp_table"] = {ThermalState(k): float(v) for k, v in d["temp_table"].items()}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise AgingError(f"unknown aging parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CoreAging:
    """Aging state of one physical core.

    The idle state lives with the policy-side core record; the engine
    derives the thermal state from both when it calls
    :func:`advance_vth`.
    """

    f0: float
    vth_shift: float = 0.0
    last_update: float = 0.0
    failed: bool = False
    tau_applied: float = 0.0


# ---------------------------------------------------------------------------
# Process variation
# ---------------------------------------------------------------------------


@dataclass
class VariationGrid:
    n_chip: int
    alpha: float
    mean_p: float
    sigma_p: float
    cells: np.ndarray
    core_sections: List[List[Tuple[int, int]]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.cells.shape != (self.n_chip, self.n_chip):
            raise AgingError(f"cells must be {self.n_chip}x{self.n_chip}, got {self.cells.shape}")
        for sec in self.core_sections:
            if not sec:
                raise AgingError("every core needs a non-empty section")
            for i, j in sec:
                if not (0 <= i < self.n_chip and 0 <= j < self.n_chip):
                    raise AgingError(f"section cell ({i}, {j}) outside the grid")

    def dump_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["i", "j", "p"])
        for i in range(self.n_chip):
            for j in range(self.n_chip):
                writer.writerow([i, j, repr(float(self.cells[i, j]))])

    @classmethod
    def load_csv(
        cls,
        stream: TextIO,
        alpha: float = float("nan"),
        mean_p: float = float("nan"),
        sigma_p: float = float("nan"),
        n_cores: Optional[int] = None,
    ) -> "VariationGrid":
        reader = csv.reader(stream)
        header = next(reader, None)
        if header != ["i", "j", "p"]:
            raise AgingError(f"grid CSV header must be i,j,p, got {header}")
        rows = [(int(i), int(j), float(p)) for i, j, p in reader]
        n_chip = math.isqrt(len(rows))
        if n_chip * n_chip != len(rows) or n_chip == 0:
            raise AgingError(f"grid CSV has {len(rows)} cells, not a square count")
        cells = np.empty((n_chip, n_chip))
        for i, j, p in rows:
            cells[i, j] = p
        sections = partition_sections(n_chip, n_cores if n_cores is not None else n_chip * n_chip)
        return cls(n_chip, alpha, mean_p, sigma_p, cells, sections)


def _block_shape(n_chip: int, n_cores: int) -> Tuple[int, int]:
    divisors = [d for d in range(1, n_chip + 1) if n_chip % d == 0]
    best = (1, 1)
    best_key = (1, 0)
    for bh in divisors:
        for bw in divisors:
            if bh > bw:
                continue
            if (n_chip // bh) * (n_chip // bw) < n_cores:
                continue
            key = (bh * bw, -(bw - bh))
            if key > best_key:
                best, best_key = (bh, bw), key
    return best


def partition_sections(n_chip: int, n_cores: int) -> List[List[Tuple[int, int]]]:
    """Split the grid into equal rectangular blocks, one per core, row-major.

    The block is the largest divisor rectangle that still yields at least
    ``n_cores`` blocks (squarest on ties). Cores beyond the block count
    wrap around to block 0.
    """
    if n_chip < 1 or n_cores < 1:
        raise AgingError("n_chip and n_cores must be >= 1")
    bh, bw = _block_shape(n_chip, n_cores)
    blocks = []
    for bi in range(n_chip // bh):
        for bj in range(n_chip // bw):
            blocks.append(
                [(bi * bh + di, bj * bw + dj) for di in range(bh) for dj in range(bw)]
            )
    return [list(blocks[c % len(blocks)]) for c in range(n_cores)]


def correlation_matrix(n_chip: int, alpha: float) -> np.ndarray:
    """exp(-alpha * d) between all pairs of cells, row-major order."""
    idx = np.indices((n_chip, n_chip)).reshape(2, -1).T.astype(float)
    d = np.sqrt(((idx[:, None, :] - idx[None, :, :]) ** 2).sum(-1))
    with np.errstate(invalid="ignore", over="ignore"):
        rho = np.exp(-alpha * d)
    rho[d == 0] = 1.0
    return rho


def sample_variation_grid(
    n_chip: int,
    alpha: float,
    mean_p: float,
    sigma_p: float,
    seed,
    n_cores: Optional[int] = None,
    jitter: float = 1e-10,
) -> VariationGrid:
    """Draw one spatially correlated Gaussian grid of ``p_kl`` values."""
    if n_chip < 1:
        raise AgingError("n_chip must be >= 1")
    if sigma_p < 0 or alpha < 0:
        raise AgingError("sigma_p and alpha must be non-negative")
    rho = correlation_matrix(n_chip, alpha)
    rho[np.diag_indices_from(rho)] += jitter
    try:
        chol = np.linalg.cholesky(rho)
    except np.linalg.LinAlgError as exc:
        raise GridConstructionError(
            f"correlation matrix not positive-definite (alpha={alpha})"
        ) from exc
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n_chip * n_chip)
    cells = mean_p + sigma_p * (chol @ z)
    sections = partition_sections(n_chip, n_cores if n_cores is not None else n_chip * n_chip)
    return VariationGrid(n_chip, alpha, mean_p, sigma_p, cells.reshape(n_chip, n_chip), sections)


def section_f0(cells: Iterable[float], k_prime: float) -> float:
    """``k_prime * min(1/p)`` over the given cells."""
    vals = list(cells)
    if not vals:
        raise AgingError("empty section")
    if any(p <= 0 for p in vals):
        raise DegenerateDrawError("non-positive grid cell in core section; resample the grid")
    return k_prime / max(vals)


def initial_core_frequency(grid: VariationGrid, core_id: int, k_prime: float) -> float:
    if not (0 <= core_id < len(grid.core_sections)):
        raise AgingError(f"core {core_id} has no section in the grid")
    return section_f0((grid.cells[i, j] for i, j in grid.core_sections[core_id]), k_prime)


# ---------------------------------------------------------------------------
# NBTI recursion
# ---------------------------------------------------------------------------


def _stress_term(temp: float, params: AgingParams) -> float:
    kt = params.boltzmann * temp
    return (
        math.exp(-params.e0 / kt)
        * math.exp(params.b_field * params.v_dd / (params.t_ox * kt))
        * params.stress_y ** params.n_exp
    )


def adf(state: ThermalState, params: AgingParams) -> float:
    """Aging damage factor for a core held in ``state``.

    Deep idle is power gated, so it returns exactly zero.
    """
    state = ThermalState(state)
    if state is ThermalState.DEEP_IDLE:
        return 0.0
    return params.k_fit * _stress_term(params.temp_table[state], params)


def advance_vth(vth_prev: float, adf_p: float, tau: float, n_exp: float) -> float:
    """Threshold-voltage shift after one interval of length ``tau`` at ``adf_p``."""
    if tau < 0:
        raise AgingError(f"negative interval length {tau}")
    if vth_prev < 0:
        raise AgingError(f"negative vth shift {vth_prev}")
    if adf_p == 0.0 or tau == 0.0:
        return vth_prev
    equiv = (vth_prev / adf_p) ** (1.0 / n_exp)
    return max(vth_prev, adf_p * (equiv + tau) ** n_exp)


def frequency(f0: float, vth_shift: float, params: AgingParams) -> float:
    if vth_shift >= params.headroom:
        raise EndOfLifeError(
            f"vth shift {vth_shift:.4g} V exhausts headroom {params.headroom:.4g} V"
        )
    return f0 * (1.0 - vth_shift / params.headroom)


def core_frequency(core: CoreAging, params: AgingParams) -> float:
    return frequency(core.f0, core.vth_shift, params)


def calibrate_k(target_drop: float, lifetime: float, params: AgingParams) -> float:
    """Fitting constant giving ``target_drop`` after ``lifetime`` s of worst-case stress.

    Worst case is continuous allocated operation with the configured
    stress factor. ``params.k_fit`` is ignored.
    """
    if not (0 < target_drop < 1):
        raise AgingError(f"target_drop must lie in (0, 1), got {target_drop}")
    if lifetime <= 0:
        raise AgingError("lifetime must be positive")
    try:
        denom = _stress_term(params.temp_table[ThermalState.ACTIVE_ALLOCATED], params)
        denom *= lifetime ** params.n_exp
        k = target_drop * params.headroom / denom
    except (OverflowError, ZeroDivisionError) as exc:
        raise AgingError(f"calibration failed: {exc}") from exc
    if not math.isfinite(k) or k <= 0:
        raise AgingError(f"calibration produced non-finite K ({k})")
    return k


def calibrated(params: AgingParams, target_drop: float = 0.3, lifetime_years: float = 10.0) -> AgingParams:
    """Copy of ``params`` with ``k_fit`` solved for the lifetime anchor."""
    k = calibrate_k(target_drop, lifetime_years * SECONDS_PER_YEAR, params)
    return dataclasses.replace(params, k_fit=k)


def worst_case_drop(params: AgingParams, lifetime: float) -> float:
    """Fractional frequency drop after ``lifetime`` s of continuous allocated stress."""
    a = adf(ThermalState.ACTIVE_ALLOCATED, params)
    return advance_vth(0.0, a, lifetime, params.n_exp) / params.headroom


def chain_intervals(
    intervals: Sequence[Tuple[ThermalState, float]], params: AgingParams, vth0: float = 0.0
) -> float:
    """Fold a sequence of (state, duration) intervals through the recursion."""
    vth = vth0
    for state, tau in intervals:
        vth = advance_vth(vth, adf(state, params), tau, params.n_exp)
    return vth
