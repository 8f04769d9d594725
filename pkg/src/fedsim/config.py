"""Experiment configuration: dataclass, validation, flat key=value files."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

STRATEGIES = (
    "fedavg",
    "fedprox",
    "fednu_exact",
    "fednu_norm",
    "folb_two_set",
    "folb_single",
    "folb_het",
)

# strategies that need every device's gradient at the server each round
FULL_INFO_STRATEGIES = ("fednu_exact", "fednu_norm")

DATA_SOURCES = ("synthetic", "csv", "shards")


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "fedprox"
    n_devices: int = 30
    k_per_round: int = 10
    rounds: int = 100
    mu: float = 0.01
    psi: float = 0.0
    tau: float = math.inf
    seed: int = 0
    data_seed: int = -1  # -1 means "same as seed"
    full_information: bool = False
    objective_weighting: str = "uniform"  # or "data_size"

    # data source
    data: str = "synthetic"
    alpha: float = 1.0
    beta: float = 1.0
    iid: bool = False
    d_in: int = 60
    n_classes: int = 10
    total_samples: int = 10000
    size_exponent: float = 1.5
    test_fraction: float = 0.2
    csv_path: str = ""
    label_column: int = -1
    classes_per_device: int = 2
    partition_exponent: float = 1.5
    shards_path: str = ""

    # model
    model: str = "mlr"
    hidden: int = 32

    # local solver
    learning_rate: float = 0.01
    batch_size: int = 0
    steps_min: int = 1
    steps_max: int = 20
    step_cost: float = 1.0
    comm_delay_scale: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not (1 <= self.k_per_round <= self.n_devices):
            raise ValueError("need 1 <= k_per_round <= n_devices")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.tau <= 0:
            raise ValueError("tau must be positive (use inf for no deadline)")
        if self.data not in DATA_SOURCES:
            raise ValueError(f"unknown data source {self.data!r}")
        if self.model not in ("mlr", "mlp1"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.objective_weighting not in ("uniform", "data_size"):
            raise ValueError("objective_weighting must be uniform or data_size")
        if self.strategy in FULL_INFO_STRATEGIES and not self.full_information:
            raise ValueError(
                f"{self.strategy} computes exact selection scores and requires "
                "full_information = true"
            )
        if self.data == "csv" and not self.csv_path:
            raise ValueError("data = csv requires csv_path")
        if self.data == "shards" and not self.shards_path:
            raise ValueError("data = shards requires shards_path")

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed < 0 else self.data_seed

    @property
    def effective_mu(self) -> float:
        """The proximal weight the local solver actually uses."""
        return 0.0 if self.strategy == "fedavg" else self.mu

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_BOOL_FIELDS = {"full_information", "iid"}
_INT_FIELDS = {
    "n_devices",
    "k_per_round",
    "rounds",
    "seed",
    "data_seed",
    "d_in",
    "n_classes",
    "total_samples",
    "label_column",
    "classes_per_device",
    "hidden",
    "batch_size",
    "steps_min",
    "steps_max",
}
_FLOAT_FIELDS = {
    "mu",
    "psi",
    "tau",
    "alpha",
    "beta",
    "size_exponent",
    "test_fraction",
    "partition_exponent",
    "learning_rate",
    "step_cost",
    "comm_delay_scale",
}
_STR_FIELDS = set(_FIELD_TYPES) - _BOOL_FIELDS - _INT_FIELDS - _FLOAT_FIELDS


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _BOOL_FIELDS:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"key {key}: expected a boolean, got {raw!r}")
    if key in _INT_FIELDS:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    return raw


def parse_config(text: str) -> ExperimentConfig:
    """Parse a flat ``key = value`` config; unknown keys are rejected.

    ``#`` starts a comment; blank lines are ignored; ``tau = inf`` disables
    the round deadline.  ``psi`` may only be set for the heterogeneity-aware
    strategy, which is the only one that reads it.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    if "psi" in values and values.get("strategy", ExperimentConfig.strategy) != "folb_het":
        raise ValueError("psi applies only to strategy = folb_het")
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def format_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_to_dict(config: ExperimentConfig) -> dict:
    out = {}
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if isinstance(value, float) and math.isinf(value):
            value = "inf"
        out[f.name] = value
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    values = {}
    for key, value in data.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        if key in _FLOAT_FIELDS and isinstance(value, str):
            value = float(value)
        values[key] = value
    return ExperimentConfig(**values)
