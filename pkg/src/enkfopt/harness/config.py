"""Experiment configuration: strict YAML schema, sweeps and hashing."""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigError

ENKF_VARIANTS = ("vanilla", "memory", "kalman", "gauss-newton")
GRADIENT_VARIANTS = ("adam", "sgd")
VARIANTS = ENKF_VARIANTS + GRADIENT_VARIANTS
REGRESSION_KINDS = ("quadratic", "oscillatory")
CLASSIFICATION_KINDS = ("blobs", "mnist")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ProblemConfig(_Strict):
    kind: Literal["quadratic", "oscillatory", "blobs", "mnist"] = "quadratic"
    seed: int = Field(0, ge=0)
    # regression problems
    m: int = Field(30, ge=1)
    n: int = Field(20, ge=1)
    condition: float = Field(10.0, ge=1.0)
    frequency: float = 20.0
    amplitude: float = 1.0
    matrix_scale: Literal["unit", "normalized"] = "unit"
    # classification problems
    n_samples: int = Field(2000, ge=2)
    n_features: int = Field(20, ge=1)
    n_classes: int = Field(4, ge=2)
    separation: float = Field(3.0, gt=0)
    data_dir: str = "data/mnist1k"
    n_train: Optional[int] = Field(None, ge=1)
    n_test: Optional[int] = Field(None, ge=1)
    network: Literal["mlp", "cnn"] = "mlp"
    hidden: list[int] = Field(default_factory=lambda: [32, 64])
    channels: list[int] = Field(default_factory=lambda: [4, 8])


class SamplerConfig(_Strict):
    particle_count: int = Field(10, ge=1)
    sigma: float = Field(0.05, gt=0)
    distribution: Literal["gaussian", "rademacher"] = "gaussian"
    decay: float = Field(1.0, gt=0, le=1.0)


class StepRuleConfig(_Strict):
    kind: Literal["armijo", "theoretical"] = "armijo"
    c: float = Field(1e-4, gt=0, lt=1)
    shrink: float = Field(0.5, gt=0, lt=1)
    max_trials: int = Field(20, ge=1)
    mu0: float = Field(1.0, gt=0)
    growth: float = Field(2.0, ge=1.0)
    L: Optional[float] = Field(None, gt=0)


class OptimizerConfig(_Strict):
    variant: Literal["vanilla", "memory", "kalman", "gauss-newton", "adam", "sgd"] = "vanilla"
    memory: Optional[int] = Field(None, ge=1)
    memory_factor: Optional[float] = Field(None, gt=0)
    gamma_kalman: Optional[float] = Field(None, gt=0)   # k' x k' regularization, Kalman variant
    gamma_gn: Optional[float] = Field(None, gt=0)       # m x m regularization, Gauss-Newton variant
    batch_size: Optional[int] = Field(None, ge=1)
    batch_scheme: Literal["scaled", "unscaled"] = "scaled"
    line_search_data: Literal["batch", "full"] = "batch"
    cg_rtol: float = Field(1e-8, gt=0)
    # gradient baselines
    lr: float = Field(1e-3, gt=0)
    schedule: Literal["per_step", "per_epoch", "constant"] = "per_step"
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    record_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _memory_size(self):
        if self.memory is not None and self.memory_factor is not None:
            raise ValueError("give either memory or memory_factor, not both")
        return self


class InnerConfig(_Strict):
    newton_iters: int = Field(10, ge=1)
    cg_iters_max: int = Field(20, ge=1)
    weight_decay: float = Field(100.0, ge=0)
    cg_tolerance: float = Field(1e-4, gt=0)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    problem: ProblemConfig = Field(default_factory=ProblemConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    step_rule: StepRuleConfig = Field(default_factory=StepRuleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    inner: InnerConfig = Field(default_factory=InnerConfig)
    iterations: int = Field(100, ge=0)
    replicates: int = Field(1, ge=1)
    master_seed: int = Field(0, ge=0, lt=2**64)
    record_wall_time: bool = False
    output_dir: str = "runs"
    sweep: Optional[dict[str, list[Union[int, float, str, bool, None]]]] = None

    @model_validator(mode="after")
    def _consistency(self):
        opt = self.optimizer
        if opt.variant == "memory" and opt.batch_size is not None:
            raise ValueError("optimizer.variant: the memory variant does not support mini-batches")
        if self.problem.kind in CLASSIFICATION_KINDS:
            if opt.variant == "memory":
                raise ValueError("optimizer.variant: memory is not available for classification runs")
            if opt.batch_size is None:
                raise ValueError("optimizer.batch_size: classification runs need a batch size")
            if self.step_rule.kind == "theoretical" and opt.variant in ENKF_VARIANTS:
                raise ValueError("step_rule.kind: classification runs use the Armijo rule")
        if self.sweep:
            for key in self.sweep:
                if key == "sweep" or not key.replace("_", "").replace(".", "").isalnum():
                    raise ValueError(f"sweep: invalid key {key!r}")
                if not self.sweep[key]:
                    raise ValueError(f"sweep.{key}: empty value list")
        return self

    def memory_capacity(self) -> Optional[int]:
        """Buffer size for the memory variant (defaults to 5 particle counts)."""
        if self.optimizer.variant != "memory":
            return None
        if self.optimizer.memory is not None:
            return self.optimizer.memory
        factor = 5.0 if self.optimizer.memory_factor is None else self.optimizer.memory_factor
        return max(self.sampler.particle_count, int(round(factor * self.sampler.particle_count)))


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def load_config(path) -> ExperimentConfig:
    """Parse and validate a YAML experiment file (unknown keys are rejected)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}:{where}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return validate_config(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_to_dict(config: ExperimentConfig) -> dict:
    return config.model_dump(mode="json")


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the fully resolved config."""
    canon = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def override(config: ExperimentConfig, assignments: dict) -> ExperimentConfig:
    """Return a validated copy with dotted-path keys replaced (``'sampler.sigma': 0.1``)."""
    data = config_to_dict(config)
    for key, value in assignments.items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"{key}: unknown config section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"{key}: unknown config field")
        node[parts[-1]] = copy.deepcopy(value)
    return validate_config(data)


def expand_sweep(config: ExperimentConfig) -> list[tuple[dict, ExperimentConfig]]:
    """Cartesian product over the ``sweep`` block.

    Returns ``(assignment, config)`` pairs in row-major order of the sweep
    keys; each config has its sweep block removed. Without a sweep block the
    result is the config itself with an empty assignment.
    """
    base = config.model_copy(update={"sweep": None})
    if not config.sweep:
        return [({}, validate_config(config_to_dict(base)))]
    keys = list(config.sweep)
    points = []
    for values in itertools.product(*(config.sweep[k] for k in keys)):
        assignment = dict(zip(keys, values))
        points.append((assignment, override(base, assignment)))
    return points


def point_label(assignment: dict) -> str:
    """Directory-safe label such as ``particle_count=5,variant=memory``."""
    if not assignment:
        return "base"
    return ",".join(f"{k.split('.')[-1]}={v}" for k, v in assignment.items())
