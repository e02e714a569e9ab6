"""Experiment configuration: YAML file + command-line overrides, fixed schema."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .network import NetworkSpec
from .problems import PROBLEM_PARAMS, PROBLEMS, ProblemDef, get_problem
from .sampling import BoxDomain
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config"]


class ConfigError(ValueError):
    pass


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    problem: str
    name: str | None = None
    arch: list[str] | None = None
    activation: Literal["tanh", "sin", "sigmoid"] | None = None
    residual_blocks: int | None = Field(default=None, ge=0)

    seeds: int = Field(default=10, ge=1)
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)

    epochs: int | None = Field(default=None, ge=1)
    lr0: float | None = Field(default=None, gt=0)
    scheduler: Literal["plateau", "exponential", "constant"] | None = None
    patience: int | None = Field(default=None, ge=0)
    interior: int | None = Field(default=None, ge=1)
    boundary: int | list[int] | None = None
    initial: int | None = Field(default=None, ge=1)
    lambda_b: float | None = Field(default=None, ge=0)
    lambda_i: float | None = Field(default=None, ge=0)
    interior_sampler: Literal["uniform", "lhs"] | None = None
    compile: bool = False

    kappa: float | None = None
    extent: float | None = Field(default=None, gt=0)
    d: int | None = Field(default=None, ge=1)
    c: float | None = None
    lower: list[float] | None = None
    upper: list[float] | None = None

    output: str | None = None
    reference: str | None = None
    channels: bool = False
    group_size: int | None = Field(default=None, ge=1)
    eval_nodes: list[int] | None = None
    eval_points_per_dim: int | None = Field(default=None, ge=1)
    eval_interior: int | None = Field(default=None, ge=0)
    eval_boundary: int | None = Field(default=None, ge=0)
    all_fields: bool = False
    history_stride: int = Field(default=1, ge=1)

    @field_validator("problem")
    @classmethod
    def _known_problem(cls, v: str) -> str:
        if v not in PROBLEMS:
            raise ValueError(f"unknown problem {v!r}; choose from {sorted(PROBLEMS)}")
        return v

    @field_validator("arch", mode="before")
    @classmethod
    def _arch_list(cls, v):
        return [v] if isinstance(v, str) else v

    @field_validator("arch")
    @classmethod
    def _arch_parses(cls, v):
        for a in v or ():
            NetworkSpec.from_arch(a, 1, 1)
        return v

    @model_validator(mode="after")
    def _problem_params(self):
        for key in ("kappa", "extent", "d", "c"):
            if getattr(self, key) is not None and key not in PROBLEM_PARAMS[self.problem]:
                raise ValueError(f"problem {self.problem!r} does not take {key!r}")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("lower and upper must be given together")
        return self

    # -- builders --------------------------------------------------------

    @property
    def problem_params(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in sorted(PROBLEM_PARAMS[self.problem]) if getattr(self, k) is not None}

    def problem_def(self) -> ProblemDef:
        prob = get_problem(self.problem, **self.problem_params)
        if self.lower is not None:
            dom = prob.domain
            if len(self.lower) != dom.space_dim or len(self.upper) != dom.space_dim:
                raise ConfigError(f"lower/upper need {dom.space_dim} values for {self.problem}")
            prob = replace(prob, domain=BoxDomain(self.lower, self.upper, time=dom.time, names=dom.names))
        if self.eval_nodes is not None and len(self.eval_nodes) != prob.input_dim:
            raise ConfigError(f"eval_nodes needs {prob.input_dim} counts for {self.problem}")
        return prob

    def specs(self, problem: ProblemDef | None = None) -> list[NetworkSpec]:
        problem = problem or self.problem_def()
        d = problem.defaults
        archs = self.arch or list(d.archs)
        act = self.activation or d.activation
        res = d.residual_blocks if self.residual_blocks is None else self.residual_blocks
        return [NetworkSpec.from_arch(a, problem.input_dim, problem.output_dim, activation=act,
                                      residual_blocks=res) for a in archs]

    def train_config(self, problem: ProblemDef | None = None) -> TrainConfig:
        problem = problem or self.problem_def()
        boundary = tuple(self.boundary) if isinstance(self.boundary, list) else self.boundary
        return TrainConfig.for_problem(
            problem, epochs=self.epochs, lr0=self.lr0, scheduler=self.scheduler, patience=self.patience,
            lambda_b=self.lambda_b, lambda_i=self.lambda_i, seed=self.seed, interior=self.interior,
            boundary=boundary, initial=self.initial, interior_sampler=self.interior_sampler,
            compile=self.compile,
        )

    @property
    def label(self) -> str:
        return self.name or self.problem

    # -- serialisation -----------------------------------------------------

    def merged(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        data = self.model_dump()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return _validate(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(), sort_keys=False)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_yaml())
        return path


def _validate(data: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "config"
            lines.append(f"{loc}: {err['msg']}")
        raise ConfigError("invalid config: " + "; ".join(lines)) from None


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Read a YAML config (if any) and apply non-``None`` overrides on top."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data.update(loaded)
    data.update({k: v for k, v in overrides.items() if v is not None})
    if "problem" not in data:
        raise ConfigError("no problem given (use --problem or a 'problem:' key)")
    return _validate(data)
