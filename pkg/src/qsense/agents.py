"""Control policies: posterior summary in, next measurement control out.

Agents work on a batch of episodes that advance in lock step.  Trainable agents
keep their parameters as numpy arrays and bind them to a tape as gradient
leaves for each rollout; heuristic agents hold no trainable state.
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .particle_filter import ParticleEnsemble, PosteriorSummary
from .sensors import Prior, SensorModel

LOG_STD_FLOOR = -10.0


class AgentError(ValueError):
    pass


def feature_dim(d_params: int) -> int:
    return 2 * d_params + 3


def build_features(
    summary: PosteriorSummary,
    prior: Prior,
    consumed,
    total: float,
    step: int,
    max_steps: int,
    last_outcome,
) -> np.ndarray:
    """Normalized agent inputs, all inside [-1, 1].

    Layout: scaled posterior mean (d), scaled log std (d), consumed-resource
    fraction, last outcome (+1 for outcome 1, -1 for outcome 0, 0 before the
    first measurement), step fraction.
    """
    mean = 2.0 * (summary.mean - prior.low) / prior.width - 1.0
    with np.errstate(divide="ignore"):
        log_std = np.log(summary.std / prior.width)
    log_std = np.clip(log_std, LOG_STD_FLOOR, 0.0)
    log_std = 1.0 - 2.0 * log_std / LOG_STD_FLOOR
    batch = mean.shape[:-1]
    frac = np.clip(np.broadcast_to(np.asarray(consumed, dtype=np.float64) / total, batch), 0.0, 1.0)
    last = np.broadcast_to(np.asarray(last_outcome, dtype=np.float64), batch)
    step_frac = np.full(batch, min(step / max_steps, 1.0))
    out = np.concatenate([mean, log_std, frac[..., None], last[..., None], step_frac[..., None]], axis=-1)
    return np.clip(out, -1.0, 1.0)


def encode_outcome(outcome) -> np.ndarray:
    return 2.0 * np.asarray(outcome, dtype=np.float64) - 1.0


@dataclass
class DecisionContext:
    """Everything an agent may look at before choosing the next controls."""

    features: np.ndarray  # (B, d_feat)
    summary: PosteriorSummary
    ensemble: ParticleEnsemble
    step: int
    active: np.ndarray  # (B,) bool
    rngs: list  # per-episode generators for stochastic agents


class Agent(ABC):
    kind: str = "agent"
    trainable: bool = False

    def __init__(self, control_low, control_high):
        self.control_low = np.atleast_1d(np.asarray(control_low, dtype=np.float64))
        self.control_high = np.atleast_1d(np.asarray(control_high, dtype=np.float64))
        if not np.all(self.control_low < self.control_high):
            raise AgentError("control bounds need low < high")
        self.params: dict[str, np.ndarray] = {}

    @property
    def d_controls(self) -> int:
        return self.control_low.size

    def bind(self, tape: ad.Tape) -> dict[str, ad.Variable]:
        return {k: tape.leaf(v, requires_grad=True) for k, v in self.params.items()}

    @abstractmethod
    def decide(self, ctx: DecisionContext, bound: dict | None = None):
        """Controls of shape (B, d_controls); a Variable when ``bound`` is given."""

    def check_model(self, model: SensorModel) -> None:
        if model.d_controls != self.d_controls:
            raise AgentError(f"agent emits {self.d_controls} controls, model takes {model.d_controls}")

    def _squash(self, z):
        span = self.control_high - self.control_low
        return ad.add(self.control_low, ad.mul(span, ad.sigmoid(z)))

    def to_checkpoint(self) -> dict:
        raise AgentError(f"{self.kind} agents have no checkpoint")


class MlpAgent(Agent):
    """tanh MLP whose sigmoid output is scaled onto the control box."""

    kind = "mlp"
    trainable = True

    def __init__(self, input_dim: int, hidden, control_low, control_high, rng=None):
        super().__init__(control_low, control_high)
        self.input_dim = int(input_dim)
        self.hidden = [int(h) for h in hidden]
        sizes = [self.input_dim, *self.hidden, self.d_controls]
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            self.params[f"w{i}"] = scale * rng.standard_normal((fan_out, fan_in))
            self.params[f"b{i}"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def forward(self, features, params):
        f = np.asarray(features, dtype=np.float64)
        if f.shape[-1] != self.input_dim:
            raise AgentError(f"feature dimension {f.shape[-1]} != input layer {self.input_dim}")
        h = ad.stop_gradient(f)
        for i in range(self.n_layers):
            h = ad.add(ad.matvec(params[f"w{i}"], h), params[f"b{i}"])
            if i < self.n_layers - 1:
                h = ad.tanh(h)
        return self._squash(h)

    def decide(self, ctx, bound=None):
        return self.forward(ctx.features, bound if bound is not None else self.params)

    def to_checkpoint(self) -> dict:
        return {
            "architecture": {
                "kind": self.kind,
                "input_dim": self.input_dim,
                "hidden": list(self.hidden),
                "output_dim": self.d_controls,
                "control_low": self.control_low.tolist(),
                "control_high": self.control_high.tolist(),
            },
            "layers": [
                {"w": self.params[f"w{i}"].tolist(), "b": self.params[f"b{i}"].tolist()}
                for i in range(self.n_layers)
            ],
        }


class StaticScheduleAgent(Agent):
    """One trainable control row per step; ignores the posterior."""

    kind = "static"
    trainable = True

    def __init__(self, max_steps: int, control_low, control_high, table=None):
        super().__init__(control_low, control_high)
        if max_steps < 1:
            raise AgentError("max_steps must be >= 1")
        self.max_steps = int(max_steps)
        if table is None:
            table = np.zeros((self.max_steps, self.d_controls))
        table = np.asarray(table, dtype=np.float64).reshape(self.max_steps, self.d_controls)
        self.params["table"] = table

    @classmethod
    def constant(cls, control, max_steps: int, control_low, control_high) -> StaticScheduleAgent:
        """Schedule that applies the same control at every step."""
        lo = np.atleast_1d(np.asarray(control_low, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(control_high, dtype=np.float64))
        frac = np.clip((np.asarray(control, dtype=np.float64) - lo) / (hi - lo), 1e-12, 1 - 1e-12)
        z = np.log(frac) - np.log1p(-frac)
        return cls(max_steps, lo, hi, np.tile(z, (max_steps, 1)))

    def decide(self, ctx, bound=None):
        params = bound if bound is not None else self.params
        row = min(ctx.step, self.max_steps - 1)
        c = self._squash(ad.getitem(params["table"], row))
        n = len(ctx.active)
        return ad.add(c, np.zeros((n, self.d_controls)))

    def to_checkpoint(self) -> dict:
        return {
            "architecture": {
                "kind": self.kind,
                "max_steps": self.max_steps,
                "output_dim": self.d_controls,
                "control_low": self.control_low.tolist(),
                "control_high": self.control_high.tolist(),
            },
            "layers": [{"w": self.params["table"].tolist(), "b": []}],
        }


class PghAgent(Agent):
    """Particle guess heuristic: tau = 1 / (|theta1 - theta2| + eps).

    theta1 and theta2 are two distinct particles drawn by weight.
    """

    kind = "pgh"

    def __init__(self, control_low, control_high, eps: float = 1e-9):
        super().__init__(control_low, control_high)
        self.eps = eps

    def choose(self, ens: ParticleEnsemble, rng: np.random.Generator) -> np.ndarray:
        w = ens.weights
        w = w / w.sum()
        tau_max = self.control_high[0]
        if np.count_nonzero(w) < 2:
            return np.array([tau_max])
        i, j = rng.choice(len(w), size=2, replace=False, p=w)
        dist = float(np.linalg.norm(ens.particles[i] - ens.particles[j]))
        tau = 1.0 / (dist + self.eps)
        return np.array([min(max(tau, self.control_low[0]), tau_max)])

    def decide(self, ctx, bound=None):
        ens = ctx.ensemble
        lw = ad.value_of(ens.log_weights)
        out = np.tile(self.control_high, (len(ctx.active), 1))
        for b in np.flatnonzero(ctx.active):
            single = ParticleEnsemble(ens.particles[b], lw[b])
            out[b] = self.choose(single, ctx.rngs[b])
        return out


class SigmaAgent(Agent):
    """tau = 1 / posterior std of the first parameter, clamped."""

    kind = "sigma"

    def choose(self, std) -> np.ndarray:
        s = np.asarray(std, dtype=np.float64)[..., 0]
        with np.errstate(divide="ignore"):
            tau = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), np.inf)
        tau = np.clip(tau, self.control_low[0], self.control_high[0])
        return tau[..., None]

    def decide(self, ctx, bound=None):
        return self.choose(ctx.summary.std)


class RandomAgent(Agent):
    """Uniform random controls inside the box."""

    kind = "random"

    def decide(self, ctx, bound=None):
        out = np.tile(self.control_low, (len(ctx.active), 1))
        span = self.control_high - self.control_low
        for b in np.flatnonzero(ctx.active):
            out[b] = self.control_low + span * ctx.rngs[b].random(self.d_controls)
        return out


def agent_from_checkpoint(obj: dict) -> Agent:
    arch = obj["architecture"]
    layers = obj["layers"]
    kind = arch.get("kind")
    if kind == "mlp":
        agent = MlpAgent(arch["input_dim"], arch["hidden"], arch["control_low"], arch["control_high"])
        if len(layers) != agent.n_layers:
            raise AgentError("layer count does not match architecture")
        for i, layer in enumerate(layers):
            w = np.array(layer["w"], dtype=np.float64)
            b = np.array(layer["b"], dtype=np.float64)
            if w.shape != agent.params[f"w{i}"].shape or b.shape != agent.params[f"b{i}"].shape:
                raise AgentError(f"layer {i} shape does not match architecture")
            agent.params[f"w{i}"] = w
            agent.params[f"b{i}"] = b
        return agent
    if kind == "static":
        table = np.array(layers[0]["w"], dtype=np.float64)
        if table.shape != (arch["max_steps"], arch["output_dim"]):
            raise AgentError("schedule table does not match architecture")
        return StaticScheduleAgent(arch["max_steps"], arch["control_low"], arch["control_high"], table)
    raise AgentError(f"unknown agent kind {kind!r}")


def save_checkpoint(agent: Agent, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(agent.to_checkpoint()))


def load_checkpoint(path) -> Agent:
    with open(path) as fh:
        return agent_from_checkpoint(json.load(fh))
