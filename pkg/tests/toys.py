"""Bernoulli toy problem for checking the policy-gradient estimator.

One measurement with p(y=1) = sigmoid(c) and loss L = y.  The loss has no
pathwise dependence on c, so the whole gradient d sigmoid(c)/dc must come
from the score-function term.
"""

from __future__ import annotations

import math

import numpy as np

from qsense import autodiff as ad
from qsense.sensors import Prior, SensorModel
from qsense.training import Loss, surrogate_objective


class BernoulliToy(SensorModel):
    name = "bernoulli_toy"
    resource_unit = "shots"
    control_names = ("c",)

    def __init__(self, bound: float = 10.0):
        self.prior = Prior.box([[0.0, 1.0]])
        self.control_low = np.array([-bound])
        self.control_high = np.array([bound])

    def _outcome_probs(self, theta, control):
        p1 = ad.sigmoid(ad.getitem(control, (Ellipsis, 0)))
        # theta plays no role; broadcast against it so shapes match particles
        p1 = ad.add(p1, np.zeros(np.shape(ad.value_of(theta))[:-1]))
        return [ad.sub(1.0, p1), p1]

    def resource_cost(self, control):
        return np.ones(np.shape(ad.value_of(control))[:-1])

    def min_step_cost(self):
        return 1.0


class OutcomeLoss(Loss):
    """L = first outcome of the episode (a constant on the tape)."""

    kind = "outcome"

    def training(self, trace):
        return trace.outcomes[0].astype(np.float64)

    def evaluation(self, trace):
        return trace.outcomes[0].astype(np.float64)


def sigmoid_grad(c: float) -> float:
    s = 1.0 / (1.0 + math.exp(-c))
    return s * (1.0 - s)


def bernoulli_estimates(c: float, n_batches: int, batch_size: int, seed: int,
                        estimator: str = "hybrid", baseline: str = "leave_one_out") -> np.ndarray:
    """Per-batch gradient estimates of E[L] w.r.t. c, one entry per batch."""
    model = BernoulliToy()
    rng = np.random.default_rng(seed)
    tape = ad.Tape()
    cs = tape.leaf(np.full((n_batches, 1, 1), c), requires_grad=True)
    control = ad.add(cs, np.zeros((n_batches, batch_size, 1)))
    theta = np.zeros((n_batches, batch_size, 1))
    y = model.sample_outcomes(theta, np.full((n_batches, batch_size, 1), c), rng.random((n_batches, batch_size)))
    logp = model.log_likelihood(theta, control, y)
    losses = y.astype(np.float64)
    total = None
    for k in range(n_batches):
        obj = surrogate_objective(losses[k], ad.getitem(logp, k), None, baseline, estimator)
        total = obj if total is None else ad.add(total, obj)
    if not ad.is_variable(total):
        return np.zeros(n_batches)
    return tape.backward(total)[cs.id].reshape(n_batches)
