"""Sensor models: outcome likelihoods, outcome sampling and resource costs.

A model maps unknown parameters ``theta`` (shape ``(..., d_params)``) and a
control (shape ``(..., d_controls)``) to the probability of each outcome in a
finite alphabet.  Likelihood code is written with :mod:`qsense.autodiff` ops,
so it is differentiable when the control (or theta) is a tape Variable and runs
as plain numpy otherwise.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# Likelihoods are floored before the log so that a single unlikely outcome
# cannot zero out every particle.  Sampling uses the same floored values.
PROB_FLOOR = 1e-12


class SensorError(ValueError):
    pass


@dataclass(frozen=True)
class Prior:
    """Uniform prior on a box, or uniform over a finite set of points."""

    low: np.ndarray
    high: np.ndarray
    points: np.ndarray | None = None

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        high = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        if low.shape != high.shape or low.ndim != 1:
            raise SensorError("prior bounds must be matching 1-d arrays")
        if not np.all(low < high):
            raise SensorError(f"degenerate prior: need low < high, got {low} and {high}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if self.points is not None:
            pts = np.asarray(self.points, dtype=np.float64).reshape(-1, low.size)
            if np.any(pts < low) or np.any(pts > high):
                raise SensorError("discrete prior points outside bounds")
            object.__setattr__(self, "points", pts)

    @classmethod
    def box(cls, bounds) -> Prior:
        b = np.asarray(bounds, dtype=np.float64).reshape(-1, 2)
        return cls(b[:, 0], b[:, 1])

    @property
    def d_params(self) -> int:
        return self.low.size

    @property
    def width(self) -> np.ndarray:
        return self.high - self.low

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.low + self.high)

    @property
    def is_discrete(self) -> bool:
        return self.points is not None

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = 1 if n is None else n
        if self.is_discrete:
            out = self.points[rng.integers(0, len(self.points), size=size)]
        else:
            out = self.low + self.width * rng.random((size, self.d_params))
        return out[0] if n is None else out

    def contains(self, theta) -> bool:
        theta = np.asarray(theta)
        return bool(np.all(theta >= self.low) and np.all(theta <= self.high))

    def clip(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.low, self.high)

    def to_dict(self) -> dict:
        d = {"bounds": [[float(a), float(b)] for a, b in zip(self.low, self.high)]}
        if self.points is not None:
            d["points"] = self.points.tolist()
        return d


class SensorModel(ABC):
    """Interface for one estimation task.

    Subclasses define ``prior``, the control box and ``_outcome_probs``.
    """

    name: str = "model"
    n_outcomes: int = 2
    resource_unit: str = "time"
    control_names: tuple[str, ...] = ()

    prior: Prior
    control_low: np.ndarray
    control_high: np.ndarray

    @property
    def d_params(self) -> int:
        return self.prior.d_params

    @property
    def d_controls(self) -> int:
        return self.control_low.size

    @abstractmethod
    def _outcome_probs(self, theta, control) -> list:
        """Per-outcome probabilities (arrays or Variables), unfloored."""

    @abstractmethod
    def resource_cost(self, control) -> np.ndarray:
        """Resource consumed by one measurement with ``control`` (numpy only)."""

    @abstractmethod
    def min_step_cost(self) -> float:
        ...

    def reference_control(self) -> np.ndarray:
        """Control used by the non-adaptive reference ("static") baseline."""
        return 0.5 * (self.control_low + self.control_high)

    def constants(self) -> dict:
        return {}

    def check_control(self, control) -> None:
        c = ad.value_of(control)
        if np.any(c < self.control_low - 1e-12) or np.any(c > self.control_high + 1e-12):
            raise SensorError(f"control {c} outside bounds [{self.control_low}, {self.control_high}]")

    def probabilities(self, theta, control) -> np.ndarray:
        """Floored outcome probabilities, stacked on a trailing axis (numpy only)."""
        probs = [ad.value_of(p) for p in self._outcome_probs(theta, control)]
        probs = np.stack(np.broadcast_arrays(*probs), axis=-1)
        total = probs.sum(axis=-1)
        if not np.all(np.abs(total - 1.0) < 1e-10):
            raise SensorError("outcome probabilities are not normalized")
        return np.maximum(probs, PROB_FLOOR)

    def log_likelihood(self, theta, control, outcome):
        """log p(outcome | theta, control), floored at ``PROB_FLOOR``.

        ``outcome`` is an integer array broadcastable to the likelihood shape.
        """
        outcome = np.asarray(outcome)
        probs = self._outcome_probs(theta, control)
        if self.n_outcomes == 2:
            # p(y) = y + (1 - 2y) p0 for y in {0, 1}
            y = outcome.astype(np.float64)
            p = ad.add(y, ad.mul(1.0 - 2.0 * y, probs[0]))
        else:
            p = None
            for k, pk in enumerate(probs):
                term = ad.mul((outcome == k).astype(np.float64), pk)
                p = term if p is None else ad.add(p, term)
        return ad.log(ad.maximum(p, PROB_FLOOR))

    def sample_outcome(self, theta, control, rng: np.random.Generator) -> int:
        """Inverse-CDF draw of one outcome at ``theta``."""
        return int(self.sample_outcomes(np.asarray(theta)[None], np.asarray(ad.value_of(control))[None],
                                        np.array([rng.random()]))[0])

    def sample_outcomes(self, theta: np.ndarray, control: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        """Vectorized inverse-CDF draws: one uniform per row."""
        probs = self.probabilities(theta, control)
        cdf = np.cumsum(probs, axis=-1)
        cdf = cdf / cdf[..., -1:]
        return np.sum(uniforms[..., None] >= cdf[..., :-1], axis=-1).astype(np.int64)


def _ramsey_p0(omega, tau, t2: float):
    phase = ad.cos(ad.mul(omega, tau))
    if math.isfinite(t2):
        phase = ad.mul(ad.exp(ad.div(ad.neg(tau), t2)), phase)
    return ad.mul(0.5, ad.add(1.0, phase))


def _check_tau(control):
    if np.any(ad.value_of(control)[..., 0] < 0.0):
        raise SensorError("evolution time must be non-negative")


@dataclass
class RamseyModel(SensorModel):
    """Ramsey fringe on a qubit with unknown precession frequency omega (rad/us).

    p(0 | omega, tau) = (1 + exp(-tau/T2) cos(omega tau)) / 2
    """

    t2: float = math.inf
    overhead: float = 0.0
    omega_bounds: tuple[float, float] = (0.0, 1.0)
    tau_bounds: tuple[float, float] = (0.1, 100.0)

    name = "ramsey"
    control_names = ("tau",)

    def __post_init__(self):
        self.prior = Prior.box([self.omega_bounds])
        self.control_low = np.array([self.tau_bounds[0]], dtype=np.float64)
        self.control_high = np.array([self.tau_bounds[1]], dtype=np.float64)
        if self.overhead < 0 or self.t2 <= 0:
            raise SensorError("overhead must be >= 0 and T2 > 0")

    def _outcome_probs(self, theta, control):
        _check_tau(control)
        p0 = _ramsey_p0(ad.getitem(theta, (Ellipsis, 0)), ad.getitem(control, (Ellipsis, 0)), self.t2)
        return [p0, ad.sub(1.0, p0)]

    def resource_cost(self, control):
        return np.asarray(ad.value_of(control))[..., 0] + self.overhead

    def min_step_cost(self):
        return float(self.control_low[0] + self.overhead)

    def constants(self):
        return {"t2": self.t2, "overhead": self.overhead,
                "omega_bounds": list(self.omega_bounds), "tau_bounds": list(self.tau_bounds)}


@dataclass
class HyperfineModel(SensorModel):
    """NV electron Ramsey signal split by a parallel hyperfine coupling A (rad/us).

    The nuclear spin is an unpolarized mixture, so the signal is the equal
    average of Ramsey fringes at omega0 + A/2 and omega0 - A/2.
    """

    omega0: float = 0.5
    t2: float = math.inf
    overhead: float = 0.0
    coupling_bounds: tuple[float, float] = (0.0, 0.1)
    tau_bounds: tuple[float, float] = (0.1, 100.0)

    name = "hyperfine"
    control_names = ("tau",)

    def __post_init__(self):
        self.prior = Prior.box([self.coupling_bounds])
        self.control_low = np.array([self.tau_bounds[0]], dtype=np.float64)
        self.control_high = np.array([self.tau_bounds[1]], dtype=np.float64)
        if self.overhead < 0 or self.t2 <= 0:
            raise SensorError("overhead must be >= 0 and T2 > 0")

    def _outcome_probs(self, theta, control):
        _check_tau(control)
        half = ad.mul(0.5, ad.getitem(theta, (Ellipsis, 0)))
        tau = ad.getitem(control, (Ellipsis, 0))
        up = _ramsey_p0(ad.add(self.omega0, half), tau, self.t2)
        down = _ramsey_p0(ad.sub(self.omega0, half), tau, self.t2)
        p0 = ad.mul(0.5, ad.add(up, down))
        return [p0, ad.sub(1.0, p0)]

    def resource_cost(self, control):
        return np.asarray(ad.value_of(control))[..., 0] + self.overhead

    def min_step_cost(self):
        return float(self.control_low[0] + self.overhead)

    def constants(self):
        return {"omega0": self.omega0, "t2": self.t2, "overhead": self.overhead,
                "coupling_bounds": list(self.coupling_bounds), "tau_bounds": list(self.tau_bounds)}


@dataclass
class DolinarModel(SensorModel):
    """Segmented Dolinar receiver for the coherent states |+alpha> and |-alpha>.

    The pulse is cut into ``segments`` pieces of amplitude s*alpha/sqrt(M).  Each
    piece is displaced by the control beta and detected on/off:
    p(no-click | s, beta) = exp(-(s*alpha_seg + beta)^2).  Outcome 0 is
    no-click, 1 is click.  Resource: one segment per measurement.
    """

    mean_photons: float = 0.2
    segments: int = 8
    beta_max: float = 2.0

    name = "dolinar"
    resource_unit = "segments"
    control_names = ("beta",)

    def __post_init__(self):
        if self.mean_photons <= 0 or self.segments < 1 or self.beta_max <= 0:
            raise SensorError("need mean_photons > 0, segments >= 1, beta_max > 0")
        self.prior = Prior(np.array([-1.0]), np.array([1.0]), points=np.array([[1.0], [-1.0]]))
        self.control_low = np.array([-self.beta_max])
        self.control_high = np.array([self.beta_max])

    @property
    def alpha_seg(self) -> float:
        return math.sqrt(self.mean_photons / self.segments)

    def _outcome_probs(self, theta, control):
        field_amp = ad.add(ad.mul(self.alpha_seg, ad.getitem(theta, (Ellipsis, 0))),
                           ad.getitem(control, (Ellipsis, 0)))
        p0 = ad.exp(ad.neg(ad.square(field_amp)))
        return [p0, ad.sub(1.0, p0)]

    def resource_cost(self, control):
        return np.ones(np.shape(ad.value_of(control))[:-1])

    def min_step_cost(self):
        return 1.0

    def reference_control(self):
        # Kennedy receiver: null the +alpha hypothesis in every segment.
        return np.array([-self.alpha_seg])

    def helstrom_bound(self) -> float:
        return 0.5 * (1.0 - math.sqrt(1.0 - math.exp(-4.0 * self.mean_photons)))

    def kennedy_error(self) -> float:
        return 0.5 * math.exp(-4.0 * self.mean_photons)

    def constants(self):
        return {"mean_photons": self.mean_photons, "segments": self.segments, "beta_max": self.beta_max}


MODELS: dict[str, type[SensorModel]] = {
    "ramsey": RamseyModel,
    "hyperfine": HyperfineModel,
    "dolinar": DolinarModel,
}


def make_model(model_id: str, **constants) -> SensorModel:
    try:
        cls = MODELS[model_id]
    except KeyError:
        raise SensorError(f"unknown model {model_id!r}") from None
    kwargs = {}
    for k, v in constants.items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)
