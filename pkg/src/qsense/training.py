"""Measurement loop simulation, losses, gradient estimator, training and evaluation.

A batch of episodes is simulated in lock step on one tape.  Each episode owns
its random streams (keyed by master seed, purpose tag and episode index), so a
given episode produces the same trace whatever batch it is simulated in.
"""

from __future__ import annotations

import logging
import math
import os
from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import particle_filter as pf
from .agents import Agent, DecisionContext, build_features, encode_outcome
from .particle_filter import FilterSettings, ParticleEnsemble
from .rng import stream, streams
from .sensors import SensorModel

logger = logging.getLogger(__name__)

WORKERS_ENV = "QSENSE_WORKERS"


class NumericalAbort(RuntimeError):
    """NaN loss/gradient, or too many collapsed filters."""


@dataclass(frozen=True)
class ResourceBudget:
    total: float
    max_steps: int

    def __post_init__(self):
        if not self.total > 0:
            raise ValueError("budget total must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class StepRecord:
    control: np.ndarray
    outcome: int
    log_likelihood: object  # Variable or float: log p(y | true theta, control)
    resource: float


@dataclass
class EpisodeTrace:
    true_theta: np.ndarray
    steps: list[StepRecord]
    estimator: object  # Variable or array
    total_resource: float
    failed: bool = False


@dataclass
class BatchTrace:
    episode_ids: np.ndarray
    true_theta: np.ndarray  # (B, d)
    controls: list[np.ndarray] = field(default_factory=list)  # per step (B, dc)
    outcomes: list[np.ndarray] = field(default_factory=list)  # per step (B,)
    active: list[np.ndarray] = field(default_factory=list)  # per step (B,) bool
    costs: list[np.ndarray] = field(default_factory=list)  # per step (B,)
    features: list[np.ndarray] = field(default_factory=list)  # per step (B, df)
    step_log_likelihoods: list = field(default_factory=list)  # per step (B,) at true theta
    log_prob: object = None  # (B,) sum over active steps
    estimator: object = None  # (B, d) posterior mean
    ensemble: ParticleEnsemble | None = None
    consumed: np.ndarray | None = None
    failed: np.ndarray | None = None
    tape: ad.Tape | None = None
    bound: dict | None = None

    @property
    def batch_size(self) -> int:
        return len(self.episode_ids)

    @property
    def n_steps(self) -> np.ndarray:
        if not self.active:
            return np.zeros(self.batch_size, dtype=np.int64)
        return np.sum(self.active, axis=0)

    def episode(self, i: int) -> EpisodeTrace:
        steps = []
        for t in range(len(self.active)):
            if not self.active[t][i]:
                break
            ll = self.step_log_likelihoods[t]
            steps.append(StepRecord(
                self.controls[t][i].copy(),
                int(self.outcomes[t][i]),
                ad.getitem(ll, i) if ad.is_variable(ll) else float(ll[i]),
                float(self.costs[t][i]),
            ))
        est = self.estimator
        est = ad.getitem(est, i) if ad.is_variable(est) else np.asarray(est)[i].copy()
        return EpisodeTrace(self.true_theta[i].copy(), steps, est, float(self.consumed[i]), bool(self.failed[i]))


def simulate(
    model: SensorModel,
    agent: Agent,
    budget: ResourceBudget,
    settings: FilterSettings,
    seed: int,
    episode_ids,
    tag: str = "episode",
    record_tape: bool = False,
    frozen_features: list[np.ndarray] | None = None,
) -> BatchTrace:
    """Run the measurement loop for a batch of episodes.

    Loop per step: summarize -> features -> agent -> outcome at the true theta
    -> Bayes update -> charge resources -> resample if the ESS is low.  A step
    starts only while the remaining budget covers the cheapest measurement;
    its full cost is charged even when it overshoots.

    ``frozen_features`` replaces the computed agent inputs step by step (used
    to check that gradients treat features as constants).
    """
    agent.check_model(model)
    ids = np.asarray(list(episode_ids), dtype=np.int64)
    B = len(ids)
    prior = model.prior
    rng_truth = streams(seed, f"{tag}/truth", ids)
    rng_prior = streams(seed, f"{tag}/prior", ids)
    rng_outcome = streams(seed, f"{tag}/outcome", ids)
    rng_resample = streams(seed, f"{tag}/resample", ids)
    rng_agent = streams(seed, f"{tag}/agent", ids)

    true_theta = np.stack([prior.sample(r) for r in rng_truth])
    inits = [pf.init_from_prior(prior, settings.n_particles, r) for r in rng_prior]
    particles = np.stack([e.particles for e in inits])
    log_w = np.stack([ad.value_of(e.log_weights) for e in inits])
    n = particles.shape[1]

    tape = ad.Tape() if record_tape else None
    bound = agent.bind(tape) if (tape is not None and agent.trainable) else None
    if tape is not None:
        log_w = tape.constant(log_w)
    ens = ParticleEnsemble(particles, log_w)

    trace = BatchTrace(ids, true_theta, tape=tape, bound=bound)
    consumed = np.zeros(B)
    failed = np.zeros(B, dtype=bool)
    last = np.zeros(B)
    log_prob = np.zeros(B)
    min_cost = model.min_step_cost()
    can_resample = not prior.is_discrete and settings.resample_threshold > 0

    for t in range(budget.max_steps):
        remaining = budget.total - consumed
        active = (remaining > 0) & (remaining >= min_cost * (1 - 1e-12)) & ~failed
        if not active.any():
            break
        summary = pf.summarize(ens)
        if frozen_features is not None:
            feats = np.asarray(frozen_features[t], dtype=np.float64)
        else:
            feats = build_features(summary, prior, consumed, budget.total, t, budget.max_steps, last)
        ctx = DecisionContext(feats, summary, ens, t, active, rng_agent)
        controls = agent.decide(ctx, bound)
        cvals = np.array(ad.value_of(controls), dtype=np.float64)
        model.check_control(cvals)

        uniforms = np.array([r.random() for r in rng_outcome])
        outcomes = model.sample_outcomes(true_theta, cvals, uniforms)

        ctrl_p = ad.reshape(controls, (B, 1, model.d_controls))
        ll_particles = model.log_likelihood(ens.particles, ctrl_p, outcomes[:, None])
        ll_true = model.log_likelihood(true_theta, controls, outcomes)

        dead = active & np.all(ad.value_of(ll_particles) == -np.inf, axis=-1)
        if dead.any():
            logger.warning("filter collapse in episodes %s", ids[dead].tolist())
            failed |= dead
            active = active & ~dead
        mask = active.astype(np.float64)
        ens = pf.bayes_update(ens, ad.mul(ll_particles, mask[:, None]))
        log_prob = ad.add(log_prob, ad.mul(ll_true, mask))

        cost = np.where(active, model.resource_cost(cvals), 0.0)
        consumed = consumed + cost
        last = np.where(active, encode_outcome(outcomes), last)

        trace.controls.append(cvals)
        trace.outcomes.append(outcomes)
        trace.active.append(active)
        trace.costs.append(cost)
        trace.features.append(feats)
        trace.step_log_likelihoods.append(ll_true)

        if can_resample:
            ess = pf.effective_sample_size(ens)
            rows = np.flatnonzero(active & (ess < settings.resample_threshold * n))
            ens = pf.resample_rows(ens, rows, rng_resample, prior, settings.liu_west_a, settings.cov_floor)

    trace.log_prob = log_prob
    trace.estimator = pf.posterior_mean(ens)
    trace.ensemble = ens
    trace.consumed = consumed
    trace.failed = failed
    return trace


def run_episode(
    model: SensorModel,
    agent: Agent,
    budget: ResourceBudget,
    settings: FilterSettings,
    seed: int,
    episode_id: int = 0,
    record_tape: bool = False,
    tag: str = "episode",
) -> EpisodeTrace:
    return simulate(model, agent, budget, settings, seed, [episode_id], tag, record_tape).episode(0)


# ---------------------------------------------------------------- losses


class Loss(ABC):
    kind: str

    @abstractmethod
    def training(self, trace: BatchTrace):
        """Per-episode differentiable loss, shape (B,)."""

    @abstractmethod
    def evaluation(self, trace: BatchTrace) -> np.ndarray:
        """Per-episode reported loss, shape (B,)."""

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class MSELoss(Loss):
    """(theta_hat - theta)^T W (theta_hat - theta) with the true theta detached."""

    kind = "mse"

    def __init__(self, weights=None, d_params: int = 1):
        w = np.eye(d_params) if weights is None else np.atleast_2d(np.asarray(weights, dtype=np.float64))
        if w.shape[0] != w.shape[1] or not np.allclose(w, w.T):
            raise ValueError("MSE weight matrix must be symmetric")
        if np.linalg.eigvalsh(w).min() < -1e-12:
            raise ValueError("MSE weight matrix must be positive semidefinite")
        self.weights = w

    def training(self, trace):
        diff = ad.sub(trace.estimator, trace.true_theta)
        return ad.sum(ad.mul(diff, ad.matvec(self.weights, diff)), axis=-1)

    def evaluation(self, trace):
        diff = ad.value_of(trace.estimator) - trace.true_theta
        return np.einsum("bi,ij,bj->b", diff, self.weights, diff)

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist()}


class ErrorProbabilityLoss(Loss):
    """Discrete hypotheses: posterior mass on wrong hypotheses (training) and
    0/1 error of the maximum-a-posteriori decision (evaluation)."""

    kind = "error_probability"

    def _wrong(self, trace) -> np.ndarray:
        parts = trace.ensemble.particles
        return np.any(parts != trace.true_theta[:, None, :], axis=-1).astype(np.float64)

    def training(self, trace):
        w = ad.exp(trace.ensemble.log_weights)
        return ad.sum(ad.mul(w, self._wrong(trace)), axis=-1)

    def evaluation(self, trace):
        lw = ad.value_of(trace.ensemble.log_weights)
        best = np.argmax(lw, axis=-1)
        return self._wrong(trace)[np.arange(len(best)), best]


def make_loss(options: dict | None, model: SensorModel) -> Loss:
    options = options or {}
    kind = options.get("kind", "error_probability" if model.prior.is_discrete else "mse")
    if kind == "mse":
        return MSELoss(options.get("weights"), model.d_params)
    if kind == "error_probability":
        if not model.prior.is_discrete:
            raise ValueError("error_probability loss needs a discrete-hypothesis model")
        return ErrorProbabilityLoss()
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------- gradient estimator


def leave_one_out_baseline(losses: np.ndarray, valid: np.ndarray) -> np.ndarray:
    n = int(valid.sum())
    if n < 2:
        raise ValueError("leave-one-out baseline needs at least 2 episodes")
    total = np.sum(np.where(valid, losses, 0.0))
    return (total - losses) / (n - 1)


def surrogate_objective(losses, log_probs, valid=None, baseline: str = "leave_one_out",
                        estimator: str = "hybrid"):
    """Scalar whose gradient is the batch-mean policy-gradient estimate.

    sum_b [L_b + stop(L_b - baseline_b) * log p_b] / B over valid episodes.
    ``estimator`` selects "hybrid" (both terms), "pathwise" (first term only)
    or "score" (second term only).
    """
    lv = np.asarray(ad.value_of(losses))
    valid = np.ones(lv.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise NumericalAbort("no valid episodes in batch")
    vmask = valid.astype(np.float64)
    parts = []
    if estimator in ("hybrid", "pathwise"):
        parts.append(ad.sum(ad.mul(losses, vmask)))
    if estimator in ("hybrid", "score"):
        if baseline == "leave_one_out":
            base = leave_one_out_baseline(lv, valid)
        elif baseline == "none":
            base = np.zeros_like(lv)
        else:
            raise ValueError(f"unknown baseline {baseline!r}")
        adv = np.where(valid, lv - base, 0.0)
        parts.append(ad.sum(ad.mul(log_probs, adv)))
    if not parts:
        raise ValueError(f"unknown estimator {estimator!r}")
    total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return ad.div(total, float(n))


def batch_gradient(trace: BatchTrace, loss: Loss, baseline: str = "leave_one_out",
                   estimator: str = "hybrid") -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradient of the batch surrogate w.r.t. the agent parameters.

    Returns (gradients by parameter name, per-episode training loss values).
    """
    if trace.tape is None or trace.bound is None:
        raise ValueError("batch_gradient needs a taped trace of a trainable agent")
    if trace.batch_size < 2 and baseline == "leave_one_out":
        raise ValueError("leave-one-out baseline needs B >= 2")
    losses = loss.training(trace)
    valid = ~trace.failed
    obj = surrogate_objective(losses, trace.log_prob, valid, baseline, estimator)
    grads = trace.tape.backward(obj)
    named = {k: grads[v.id] for k, v in trace.bound.items()}
    return named, np.asarray(ad.value_of(losses))


# ---------------------------------------------------------------- optimizer


@dataclass
class TrainingConfig:
    batch_size: int = 64
    iterations: int = 3000
    learning_rate: float = 1e-3
    schedule: str = "cosine"  # or "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    baseline: str = "leave_one_out"
    estimator: str = "hybrid"
    chunk_size: int = 0  # 0: whole batch in one chunk
    max_failure_rate: float = 0.01

    def __post_init__(self):
        if self.batch_size < 2 and self.baseline == "leave_one_out":
            raise ValueError("batch_size must be >= 2 for the leave-one-out baseline")
        if self.iterations < 0 or self.learning_rate < 0 or self.clip_norm <= 0:
            raise ValueError("iterations, learning_rate must be >= 0 and clip_norm > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam parameters")
        if self.estimator not in ("hybrid", "pathwise", "score"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.baseline not in ("leave_one_out", "none"):
            raise ValueError(f"unknown baseline {self.baseline!r}")

    def lr_at(self, it: int) -> float:
        if self.schedule == "constant" or self.iterations == 0:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * it / self.iterations))


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _chunks(ids: np.ndarray, size: int) -> list[np.ndarray]:
    if size <= 0 or size >= len(ids):
        return [ids]
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def _map(fn, jobs: list, workers: int) -> list:
    # Chunking is fixed by the caller; workers only change where chunks run.
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _train_chunk(model, agent, budget, settings, seed, ids, loss, baseline, estimator):
    trace = simulate(model, agent, budget, settings, seed, ids, tag="train", record_tape=True)
    losses = loss.training(trace)
    lv = np.asarray(ad.value_of(losses))
    valid = ~trace.failed
    if int(valid.sum()) < 2 and estimator != "pathwise" and baseline == "leave_one_out":
        return None, lv, trace.failed
    obj = surrogate_objective(losses, trace.log_prob, valid, baseline, estimator)
    # un-normalize so chunk gradients can be summed and re-divided by the batch count
    obj = ad.mul(obj, float(valid.sum()))
    grads = trace.tape.backward(obj)
    return {k: grads[v.id] for k, v in trace.bound.items()}, lv, trace.failed


@dataclass
class TrainResult:
    agent: Agent
    history: list[dict]
    n_failed: int = 0


def train(
    model: SensorModel,
    agent: Agent,
    config: TrainingConfig,
    budget: ResourceBudget,
    loss: Loss,
    settings: FilterSettings,
    seed: int = 0,
    workers: int | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Adam on the batch surrogate; deterministic given ``seed``."""
    if not agent.trainable:
        raise ValueError(f"{agent.kind} agent has no trainable parameters")
    workers = worker_count() if workers is None else workers
    opt = Adam(config.beta1, config.beta2, config.eps)
    history = []
    n_failed = 0
    n_seen = 0
    B = config.batch_size
    for it in range(config.iterations):
        ids = np.arange(it * B, (it + 1) * B, dtype=np.int64)
        jobs = [(model, agent, budget, settings, seed, c, loss, config.baseline, config.estimator)
                for c in _chunks(ids, config.chunk_size)]
        results = _map(_train_chunk, jobs, workers)
        lv = np.concatenate([r[1] for r in results])
        failed = np.concatenate([r[2] for r in results])
        n_failed += int(failed.sum())
        n_seen += len(ids)
        if n_failed > config.max_failure_rate * n_seen and n_failed > 0:
            raise NumericalAbort(f"{n_failed}/{n_seen} episodes collapsed (seed {seed}, iteration {it})")
        n_valid = int((~failed).sum())
        grads: dict[str, np.ndarray] = {}
        for g, _, _ in results:
            if g is None:
                continue
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
        grads = {k: v / n_valid for k, v in grads.items()}
        bad_loss = ~np.isfinite(lv) & ~failed
        if bad_loss.any() or any(not np.all(np.isfinite(g)) for g in grads.values()):
            bad = ids[bad_loss].tolist() if bad_loss.any() else ids.tolist()
            raise NumericalAbort(f"non-finite loss or gradient at iteration {it}, seed {seed}, episodes {bad}")
        grads, norm = clip_global_norm(grads, config.clip_norm)
        lr = config.lr_at(it)
        if grads:
            opt.step(agent.params, grads, lr)
        row = {
            "iteration": it,
            "loss_mean": float(np.mean(lv[~failed])),
            "loss_median": float(np.median(lv[~failed])),
            "grad_norm": norm,
            "learning_rate": lr,
            "n_failed": int(failed.sum()),
        }
        history.append(row)
        if log_every and (it % log_every == 0 or it == config.iterations - 1):
            logger.info("iter %d loss %.6g grad %.3g", it, row["loss_mean"], norm)
    return TrainResult(agent, history, n_failed)


# ---------------------------------------------------------------- evaluation


@dataclass
class CurvePoint:
    budget: float
    mean: float
    median: float
    ci_low: float  # 90% bootstrap interval of the median
    ci_high: float
    mean_ci_low: float
    mean_ci_high: float
    n_episodes: int
    losses: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def bootstrap_ci(values: np.ndarray, rng: np.random.Generator, n_resamples: int = 1000,
                 level: float = 0.90, stat=np.median) -> tuple[float, float]:
    idx = rng.integers(0, len(values), size=(n_resamples, len(values)))
    stats = stat(values[idx], axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def _eval_chunk(model, agent, budget, settings, seed, ids, loss):
    trace = simulate(model, agent, budget, settings, seed, ids, tag="eval", record_tape=False)
    return loss.evaluation(trace), trace.failed


def evaluate(
    model: SensorModel,
    agent: Agent,
    budgets,
    n_episodes: int,
    seed: int,
    settings: FilterSettings,
    loss: Loss,
    max_steps: int,
    n_bootstrap: int = 1000,
    chunk_size: int = 250,
    workers: int | None = None,
) -> list[CurvePoint]:
    """Precision curve: loss statistics at each total budget (no tape).

    Episode ``k`` uses the same true theta and random streams at every budget.
    """
    if n_episodes < 100:
        raise ValueError("evaluation needs n_episodes >= 100")
    workers = worker_count() if workers is None else workers
    ids = np.arange(n_episodes, dtype=np.int64)
    curve = []
    for j, total in enumerate(budgets):
        budget = ResourceBudget(float(total), max_steps)
        jobs = [(model, agent, budget, settings, seed, c, loss) for c in _chunks(ids, chunk_size)]
        results = _map(_eval_chunk, jobs, workers)
        losses = np.concatenate([r[0] for r in results])
        failed = np.concatenate([r[1] for r in results])
        losses = losses[~failed]
        rng = stream(seed, "bootstrap", j)
        lo, hi = bootstrap_ci(losses, rng, n_bootstrap, stat=np.median)
        mlo, mhi = bootstrap_ci(losses, rng, n_bootstrap, stat=np.mean)
        curve.append(CurvePoint(float(total), float(np.mean(losses)), float(np.median(losses)),
                                lo, hi, mlo, mhi, len(losses), losses))
    return curve
