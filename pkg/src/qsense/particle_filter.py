"""Weighted-particle representation of the posterior over the unknown parameters.

Weights are kept in the log domain and normalized after every update.  All
functions accept either a single ensemble (particles ``(n, d)``, log-weights
``(n,)``) or a batch of ensembles with a leading episode axis
(``(B, n, d)`` and ``(B, n)``).  Particles are always plain arrays; the
log-weights may be tape Variables, which makes the Bayes update differentiable
with respect to whatever the likelihoods depend on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .sensors import Prior


class FilterCollapse(RuntimeError):
    """Every particle received zero likelihood."""


@dataclass(frozen=True)
class FilterSettings:
    n_particles: int = 480
    resample_threshold: float = 0.5  # resample when ESS < threshold * n
    liu_west_a: float = 0.98
    cov_floor: float = 1e-12  # diagonal floor, relative to prior width squared

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not 0.0 <= self.resample_threshold <= 1.0:
            raise ValueError("resample_threshold must be in [0, 1]")
        if not 0.0 < self.liu_west_a <= 1.0:
            raise ValueError("liu_west_a must be in (0, 1]")


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    log_weights: np.ndarray | ad.Variable

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=np.float64)
        if self.particles.ndim < 2:
            raise ValueError("particles must be (..., n, d)")
        if self.particles.shape[-2] < 2:
            raise ValueError("need at least 2 particles")
        if ad.value_of(self.log_weights).shape != self.particles.shape[:-1]:
            raise ValueError("log_weights shape does not match particles")

    @property
    def n_particles(self) -> int:
        return self.particles.shape[-2]

    @property
    def d_params(self) -> int:
        return self.particles.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.particles.shape[:-2]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(ad.value_of(self.log_weights))

    def detached(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.particles.copy(), np.array(ad.value_of(self.log_weights)))

    def to_json(self) -> str:
        if self.batch_shape:
            raise ValueError("only single ensembles serialize")
        lw = ad.value_of(self.log_weights)
        return json.dumps({"particles": self.particles.tolist(), "log_weights": lw.tolist()})

    @classmethod
    def from_json(cls, text: str) -> ParticleEnsemble:
        obj = json.loads(text)
        return cls(np.array(obj["particles"], dtype=np.float64), np.array(obj["log_weights"], dtype=np.float64))


@dataclass(frozen=True)
class PosteriorSummary:
    mean: np.ndarray
    covariance: np.ndarray
    std: np.ndarray
    ess: np.ndarray


def init_from_prior(prior: Prior, n: int, rng: np.random.Generator) -> ParticleEnsemble:
    """Draw ``n`` i.i.d. particles with uniform weights.

    A discrete prior is enumerated instead: one particle per support point and
    ``n`` is ignored.
    """
    if prior.is_discrete:
        pts = prior.points.copy()
    else:
        if n < 2:
            raise ValueError("need at least 2 particles")
        pts = prior.sample(rng, n)
    m = len(pts)
    return ParticleEnsemble(pts, np.full(m, -math.log(m)))


def _expand_last(x):
    shape = ad.value_of(x).shape
    return ad.reshape(x, shape + (1,))


def bayes_update(ens: ParticleEnsemble, log_likelihoods) -> ParticleEnsemble:
    """Multiply weights by the likelihoods and renormalize (log domain)."""
    ll = ad.value_of(log_likelihoods)
    if ll.shape != ens.particles.shape[:-1]:
        raise ValueError(f"log_likelihoods shape {ll.shape} != {ens.particles.shape[:-1]}")
    if np.any(np.isnan(ll)) or np.any(ll == np.inf):
        raise ValueError("log_likelihoods must be finite or -inf")
    if np.any(np.all(ll == -np.inf, axis=-1)):
        raise FilterCollapse("all particles have zero likelihood")
    lw = ad.add(ens.log_weights, log_likelihoods)
    if np.any(np.all(ad.value_of(lw) == -np.inf, axis=-1)):
        raise FilterCollapse("posterior has zero total mass")
    lw = ad.sub(lw, _expand_last(ad.logsumexp(lw, axis=-1)))
    return ParticleEnsemble(ens.particles, lw)


def _check_normalized(lw: np.ndarray) -> None:
    with np.errstate(under="ignore"):
        total = np.log(np.sum(np.exp(lw), axis=-1))
    if np.any(np.abs(total) > 1e-8):
        raise ValueError("ensemble weights are not normalized")


def effective_sample_size(ens: ParticleEnsemble) -> np.ndarray | float:
    """1 / sum(w^2) of normalized weights."""
    lw = ad.value_of(ens.log_weights)
    _check_normalized(lw)
    ess = 1.0 / np.sum(np.exp(2.0 * lw), axis=-1)
    return float(ess) if ess.ndim == 0 else ess


def summarize(ens: ParticleEnsemble) -> PosteriorSummary:
    lw = ad.value_of(ens.log_weights)
    _check_normalized(lw)
    w = np.exp(lw)
    mean = np.einsum("...n,...nd->...d", w, ens.particles)
    centered = ens.particles - mean[..., None, :]
    cov = np.einsum("...n,...ni,...nj->...ij", w, centered, centered)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    var = np.maximum(np.diagonal(cov, axis1=-2, axis2=-1), 0.0)
    ess = 1.0 / np.sum(w * w, axis=-1)
    return PosteriorSummary(mean, cov, np.sqrt(var), np.clip(ess, 1.0, ens.n_particles))


def posterior_mean(ens: ParticleEnsemble):
    """Weighted mean as a differentiable expression of the log-weights."""
    w = _expand_last(ad.exp(ens.log_weights))
    return ad.sum(ad.mul(w, ens.particles), axis=-2)


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right").clip(0, n - 1)


def resample(
    ens: ParticleEnsemble,
    rng: np.random.Generator,
    prior: Prior,
    a: float = 0.98,
    cov_floor: float = 1e-12,
) -> ParticleEnsemble:
    """Systematic resampling followed by Liu-West shrinkage jitter.

    Acts on a single ensemble.  The result carries plain (non-tape) uniform
    weights: index selection is a gradient barrier.
    """
    if ens.batch_shape:
        raise ValueError("resample acts on a single ensemble")
    summary = summarize(ens)
    w = ens.weights
    idx = systematic_indices(w / w.sum(), rng)
    chosen = ens.particles[idx]
    n, d = chosen.shape
    if a < 1.0:
        cov = summary.covariance + np.diag(cov_floor * prior.width**2)
        chol = np.linalg.cholesky((1.0 - a * a) * cov)
        noise = rng.standard_normal((n, d)) @ chol.T
        chosen = a * chosen + (1.0 - a) * summary.mean + noise
    chosen = prior.clip(chosen)
    return ParticleEnsemble(chosen, np.full(n, -math.log(n)))


def resample_rows(
    ens: ParticleEnsemble,
    rows,
    rngs,
    prior: Prior,
    a: float = 0.98,
    cov_floor: float = 1e-12,
) -> ParticleEnsemble:
    """Resample the listed episodes of a batched ensemble, leaving the others.

    Resampled rows get constant uniform log-weights; the remaining rows keep
    their (possibly taped) weights.
    """
    rows = list(rows)
    if not rows:
        return ens
    lw_val = ad.value_of(ens.log_weights)
    particles = ens.particles.copy()
    n = ens.n_particles
    keep = np.ones(lw_val.shape[0])
    for r in rows:
        single = ParticleEnsemble(particles[r], lw_val[r])
        particles[r] = resample(single, rngs[r], prior, a, cov_floor).particles
        keep[r] = 0.0
    keep = keep[:, None]
    fresh = (1.0 - keep) * (-math.log(n))
    lw = ad.add(ad.mul(ens.log_weights, keep), fresh)
    return ParticleEnsemble(particles, lw)
