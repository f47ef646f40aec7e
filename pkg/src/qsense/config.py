"""Experiment configuration: one JSON file fully determines a run."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import Agent, MlpAgent, StaticScheduleAgent, feature_dim
from .particle_filter import FilterSettings
from .rng import stream
from .sensors import MODELS, SensorError, SensorModel, make_model
from .training import Loss, ResourceBudget, TrainingConfig, make_loss

# model constant that holds the prior box, per model id
PRIOR_FIELDS = {"ramsey": "omega_bounds", "hyperfine": "coupling_bounds"}
AGENT_KINDS = ("mlp", "static")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class EvaluationSettings:
    n_episodes: int = 1000
    n_bootstrap: int = 1000
    chunk_size: int = 250


@dataclass
class ExperimentConfig:
    model: str
    model_constants: dict = field(default_factory=dict)
    agent: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    prior_bounds: list[list[float]] | None = None
    budgets: list[float] = field(default_factory=list)
    train_budget: float | None = None
    max_steps: int = 100
    particle_filter: FilterSettings = field(default_factory=FilterSettings)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    loss: dict | None = None
    output_dir: str = "runs"
    seed: int = 0

    # -- construction ---------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"{key}: unknown field")
        if "model" not in raw:
            raise ConfigError("model: unknown model (missing model id)")
        kwargs = dict(raw)
        kwargs["particle_filter"] = _sub(FilterSettings, raw.get("particle_filter"), "particle_filter")
        kwargs["training"] = _sub(TrainingConfig, raw.get("training"), "training")
        kwargs["evaluation"] = _sub(EvaluationSettings, raw.get("evaluation"), "evaluation")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # -- validation -----------------------------------------------------

    def validate(self) -> None:
        if self.model not in MODELS:
            raise ConfigError(f"model: unknown model {self.model!r}")
        if not isinstance(self.model_constants, dict):
            raise ConfigError("model_constants: must be an object")
        if self.agent not in AGENT_KINDS:
            raise ConfigError(f"agent: unknown agent kind {self.agent!r}")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise ConfigError("hidden: need at least one layer of width >= 1")
        if self.prior_bounds is not None and self.model not in PRIOR_FIELDS:
            raise ConfigError(f"prior_bounds: model {self.model!r} has a fixed hypothesis set")
        if not self.budgets:
            raise ConfigError("budgets: need at least one budget point")
        if any(not _finite_positive(b) for b in self.budgets):
            raise ConfigError("budgets: every budget must be finite and > 0")
        if self.train_budget is not None and not _finite_positive(self.train_budget):
            raise ConfigError("train_budget: must be finite and > 0")
        if self.max_steps < 1:
            raise ConfigError("max_steps: must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed: must be >= 0")
        pfs = self.particle_filter
        if pfs.n_particles < 2:
            raise ConfigError("particle_filter.n_particles: must be >= 2")
        if not 0.0 <= pfs.resample_threshold <= 1.0:
            raise ConfigError("particle_filter.resample_threshold: must lie in [0, 1]")
        if not 0.0 < pfs.liu_west_a <= 1.0:
            raise ConfigError("particle_filter.liu_west_a: must lie in (0, 1]")
        ev = self.evaluation
        if ev.n_episodes < 100:
            raise ConfigError("evaluation.n_episodes: must be >= 100")
        if ev.n_bootstrap < 1 or ev.chunk_size < 0:
            raise ConfigError("evaluation: n_bootstrap must be >= 1 and chunk_size >= 0")
        try:
            model = self.build_model()
        except ConfigError:
            raise
        except (SensorError, TypeError, ValueError) as exc:
            raise ConfigError(f"model_constants: {exc}") from None
        try:
            make_loss(self.loss, model)
        except ValueError as exc:
            raise ConfigError(f"loss: {exc}") from None

    # -- builders -------------------------------------------------------

    def build_model(self) -> SensorModel:
        constants = dict(self.model_constants)
        if constants.get("t2", 0.0) is None:
            constants["t2"] = math.inf
        if self.prior_bounds is not None:
            if len(self.prior_bounds) != 1 or len(self.prior_bounds[0]) != 2:
                raise ConfigError("prior_bounds: expected [[low, high]]")
            constants[PRIOR_FIELDS[self.model]] = list(self.prior_bounds[0])
        try:
            return make_model(self.model, **constants)
        except TypeError as exc:
            raise ConfigError(f"model_constants: {exc}") from None

    def build_agent(self, model: SensorModel) -> Agent:
        rng = stream(self.seed, "init")
        if self.agent == "mlp":
            return MlpAgent(feature_dim(model.d_params), self.hidden, model.control_low, model.control_high, rng)
        return StaticScheduleAgent.constant(model.reference_control(), self.max_steps,
                                            model.control_low, model.control_high)

    def build_loss(self, model: SensorModel) -> Loss:
        return make_loss(self.loss, model)

    def training_budget(self) -> ResourceBudget:
        total = self.train_budget if self.train_budget is not None else max(self.budgets)
        return ResourceBudget(float(total), self.max_steps)


def _finite_positive(x) -> bool:
    try:
        return math.isfinite(float(x)) and float(x) > 0
    except (TypeError, ValueError):
        return False


def _sub(cls, raw, name: str):
    if raw is None:
        return cls()
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def architecture_matches(agent: Agent, expected: Agent) -> bool:
    """True when a loaded checkpoint has the architecture the config asks for."""
    if agent.kind != expected.kind:
        return False
    if not (np.array_equal(agent.control_low, expected.control_low)
            and np.array_equal(agent.control_high, expected.control_high)):
        return False
    return all(agent.params[k].shape == v.shape for k, v in expected.params.items()) and \
        set(agent.params) == set(expected.params)
