"""Experiment configuration: one JSON document fully determines a run matrix."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .aging import AgingParams, ThermalState, calibrated
from .policy import ReactionParams
from .workload import TaskDurationModel, TokenDistribution

SCHEMA_VERSION = 1
POLICIES = ("proposed", "linux", "least_aged")
AGE_METRICS = ("vth", "frequency")


class ConfigError(ValueError):
    pass


DEFAULTS: Dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "cluster": {"machines": 22, "cores_per_vm": 40},
    "aging": {
        "e0": 0.08,
        "b_field": 0.04,
        "t_ox": 1.2,
        "v_dd": 0.9,
        "v_th0": 0.35,
        "n_exp": 1.0 / 6.0,
        "stress_y": 1.0,
        "boltzmann": 8.617333262e-5,
        "temperatures_k": {
            "active_allocated": 327.15,
            "active_unallocated": 324.23,
            "deep_idle": 321.15,
        },
        "k_fit": None,
        "params_file": None,
        "calibration": {"target_drop": 0.3, "lifetime_years": 10.0},
    },
    "variation": {
        "n_chip": 10,
        "alpha": 0.5,
        "sigma_p": 0.05,
        "k_prime": 1.0,
        "nominal_frequency": 1.0,
    },
    "policy": {
        "policies": list(POLICIES),
        "pos_gain": 0.785,
        "neg_gain": 1.55,
        "idling_period_s": 1.0,
        "age_metric": "frequency",
        "linux_weights_csv": None,
        "debug_idling": False,
    },
    "workload": {
        "source": "synthetic",
        "trace_file": None,
        "rates": [40.0],
        "duration_s": 60.0,
        "input_tokens": {"median": 1500.0, "sigma": 1.0, "maximum": 8192},
        "output_tokens": {"median": 13.0, "sigma": 1.0, "maximum": 2048},
        "iteration_interval_s": 0.025,
        "durations": {},
    },
    "seeds": [0],
    "aging_time_scale": 1.0,
    "horizon_s": None,
    "output": {"dir": "runs", "event_log": True},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k not in ("durations",):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be an object")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self) -> None:
        self.validate()

    # -- construction ------------------------------------------------------
    @classmethod
    def from_dict(cls, d: Dict[str, Any], base_dir: Union[str, Path, None] = None) -> "ExperimentConfig":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        raw = _merge(DEFAULTS, d)
        return cls(raw, Path(base_dir) if base_dir else Path.cwd())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d, path.parent)

    def updated(self, **sections: Dict[str, Any]) -> "ExperimentConfig":
        """Copy with nested overrides, e.g. ``updated(cluster={"machines": 2})``."""
        raw = _merge(self.raw, sections)
        return ExperimentConfig(raw, self.base_dir)

    # -- validation --------------------------------------------------------
    def validate(self) -> None:
        r = self.raw
        if r["cluster"]["machines"] < 1 or r["cluster"]["cores_per_vm"] < 1:
            raise ConfigError("cluster.machines and cluster.cores_per_vm must be >= 1")
        if not r["seeds"]:
            raise ConfigError("at least one seed is required")
        w = r["workload"]
        if w["source"] not in ("synthetic", "file"):
            raise ConfigError("workload.source must be 'synthetic' or 'file'")
        if w["source"] == "synthetic":
            if not w["rates"]:
                raise ConfigError("at least one request rate is required")
            if any(x <= 0 for x in w["rates"]):
                raise ConfigError("request rates must be positive")
            if w["duration_s"] < 0:
                raise ConfigError("workload.duration_s must be >= 0")
        elif not w["trace_file"]:
            raise ConfigError("workload.trace_file is required when source is 'file'")
        if w["iteration_interval_s"] <= 0:
            raise ConfigError("workload.iteration_interval_s must be positive")
        pol = r["policy"]
        if not pol["policies"]:
            raise ConfigError("at least one policy is required")
        for p in pol["policies"]:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}; expected one of {POLICIES}")
        if pol["age_metric"] not in AGE_METRICS:
            raise ConfigError(f"policy.age_metric must be one of {AGE_METRICS}")
        if r["aging_time_scale"] <= 0:
            raise ConfigError("aging_time_scale must be positive")
        v = r["variation"]
        if v["n_chip"] < 1 or v["sigma_p"] < 0 or v["alpha"] < 0:
            raise ConfigError("variation needs n_chip >= 1, sigma_p >= 0, alpha >= 0")
        if v["k_prime"] <= 0 or v["nominal_frequency"] <= 0:
            raise ConfigError("k_prime and nominal_frequency must be positive")
        cal = r["aging"]["calibration"]
        if not (0 < cal["target_drop"] < 1):
            raise ConfigError("aging.calibration.target_drop must lie in (0, 1)")
        if cal["lifetime_years"] <= 0:
            raise ConfigError("aging.calibration.lifetime_years must be positive")
        try:
            self.base_aging_params()
            self.reaction_params()
            self.duration_model()
            self.token_distributions()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- typed views -------------------------------------------------------
    @property
    def machines(self) -> int:
        return self.raw["cluster"]["machines"]

    @property
    def cores_per_vm(self) -> int:
        return self.raw["cluster"]["cores_per_vm"]

    @property
    def policies(self) -> List[str]:
        return list(self.raw["policy"]["policies"])

    @property
    def seeds(self) -> List[int]:
        return list(self.raw["seeds"])

    @property
    def rates(self) -> List[float]:
        return list(self.raw["workload"]["rates"])

    @property
    def aging_time_scale(self) -> float:
        return float(self.raw["aging_time_scale"])

    @property
    def nominal_frequency(self) -> float:
        return float(self.raw["variation"]["nominal_frequency"])

    @property
    def mean_p(self) -> float:
        # p_kl mean that makes a variation-free core run at nominal frequency
        v = self.raw["variation"]
        return v["k_prime"] / v["nominal_frequency"]

    def base_aging_params(self) -> AgingParams:
        a = self.raw["aging"]
        temps = {ThermalState(k): float(t) for k, t in a["temperatures_k"].items()}
        return AgingParams(
            k_fit=a["k_fit"] if a["k_fit"] is not None else 1.0,
            e0=a["e0"],
            boltzmann=a["boltzmann"],
            b_field=a["b_field"],
            t_ox=a["t_ox"],
            v_dd=a["v_dd"],
            v_th0=a["v_th0"],
            n_exp=a["n_exp"],
            stress_y=a["stress_y"],
            temp_table=temps,
        )

    def aging_params(self) -> AgingParams:
        """Calibrated parameters: from params_file, explicit k_fit, or the anchors."""
        a = self.raw["aging"]
        if a["params_file"]:
            path = self.resolve(a["params_file"])
            try:
                d = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read params file {path}: {exc}") from exc
            return AgingParams.from_dict(d["params"] if "params" in d else d)
        if a["k_fit"] is not None:
            return self.base_aging_params()
        cal = a["calibration"]
        return calibrated(self.base_aging_params(), cal["target_drop"], cal["lifetime_years"])

    def reaction_params(self) -> ReactionParams:
        p = self.raw["policy"]
        return ReactionParams(p["pos_gain"], p["neg_gain"], p["idling_period_s"])

    def duration_model(self) -> TaskDurationModel:
        return TaskDurationModel.from_dict(self.raw["workload"]["durations"])

    def token_distributions(self):
        w = self.raw["workload"]
        return TokenDistribution(**w["input_tokens"]), TokenDistribution(**w["output_tokens"])

    def resolve(self, p: Union[str, Path]) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
