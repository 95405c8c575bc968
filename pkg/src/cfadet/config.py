# Experiment configuration: structured JSON in, validated dataclasses out.

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .dmlp import MlpHyperparams
from .simcore import SystemConfig

SWEEP_AXES = ("L", "eps", "theta", "fixed_point")
DETECTORS = ("ml", "dmlp", "both")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    mlp: MlpHyperparams = field(default_factory=MlpHyperparams)
    detector: str = "both"
    sweep_axis: str = "L"
    sweep_values: list = field(default_factory=lambda: [40])
    trials: int = 20_000            # test slots per sweep point
    train_samples: int = 50_000
    val_samples: int = 20_000
    theta: float = 0.0              # estimation-error level outside theta sweeps
    perturb_domain: str = "db"
    fixed_point: str | None = None  # "b_q_bits" label, applied per the flags
    quantize_beta: bool = True
    quantize_signal: bool = False
    ml_iters: int = 15
    ml_tol: float = 1e-6
    ml_cluster_restricted: bool = False
    fresh_geometry_test: bool = False
    check_trend: bool = False
    seed: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.detector not in DETECTORS:
            raise ConfigError(f"detector must be one of {DETECTORS}")
        if self.sweep_axis not in SWEEP_AXES:
            raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES}")
        if not self.sweep_values:
            raise ConfigError("sweep_values must be nonempty")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.train_samples < 0 or self.val_samples < 0:
            raise ConfigError("sample counts must be nonnegative")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        if self.perturb_domain not in ("db", "linear"):
            raise ConfigError("perturb_domain must be 'db' or 'linear'")
        if self.ml_iters < 1:
            raise ConfigError("ml_iters must be >= 1")
        for v in self.sweep_values:
            if self.sweep_axis == "L" and (int(v) != v or v < 1):
                raise ConfigError(f"invalid pilot length {v!r} in sweep_values")
            if self.sweep_axis == "eps" and not 0.0 <= float(v) <= 1.0:
                raise ConfigError(f"invalid activity prob {v!r} in sweep_values")
            if self.sweep_axis == "theta" and not 0.0 <= float(v) <= 1.0:
                raise ConfigError(f"invalid theta {v!r} in sweep_values")
            if self.sweep_axis == "fixed_point" and not isinstance(v, str):
                raise ConfigError("fixed_point sweep values must be "
                                  "'b_q_bits' strings")


_TOP_LEVEL = {f.name for f in dataclasses.fields(ExperimentConfig)}
_REQUIRED_HINT = ("system", "mlp", "sweep_axis", "sweep_values", "seed",
                  "out_dir")


def _build_section(cls, data, path):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} under '{path}'; "
            f"allowed: {sorted(allowed)}"
        )
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{path}' section: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a JSON object")
    unknown = set(data) - _TOP_LEVEL
    if unknown:
        raise ConfigError(
            f"unknown top-level key(s) {sorted(unknown)}; "
            f"allowed: {sorted(_TOP_LEVEL)}"
        )
    kwargs = dict(data)
    if "system" in kwargs:
        kwargs["system"] = _build_section(SystemConfig, kwargs["system"],
                                          "system")
    if "mlp" in kwargs:
        kwargs["mlp"] = _build_section(MlpHyperparams, kwargs["mlp"], "mlp")
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def parse_config(path) -> ExperimentConfig:
    """Read and validate a JSON experiment config.

    Unknown keys are rejected with their path; JSON syntax errors carry
    line/column positions.
    """
    with open(path) as fh:
        text = fh.read()
    if not text.strip():
        raise ConfigError(
            f"{path}: empty config; provide a JSON object with keys such as "
            + ", ".join(_REQUIRED_HINT)
        )
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}"
        ) from None
    return config_from_dict(data)


def write_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_experiment_config() -> ExperimentConfig:
    """The shipped operating point (20 APs, 100 devices, L = 40)."""
    return ExperimentConfig()
