import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsense import autodiff as ad
from qsense.sensors import (
    PROB_FLOOR,
    DolinarModel,
    HyperfineModel,
    Prior,
    RamseyModel,
    SensorError,
    make_model,
)


def p0(model, theta, control):
    return float(model.probabilities(np.array([theta]), np.array([control]))[0])


def test_ramsey_examples():
    m = RamseyModel(tau_bounds=(0.0, 100.0))
    assert p0(m, 0.3, 0.0) == pytest.approx(1.0)
    probs = m.probabilities(np.array([1.0]), np.array([math.pi]))
    assert probs[0] == pytest.approx(PROB_FLOOR, abs=1e-15)
    assert probs[1] == pytest.approx(1.0)
    assert p0(m, 1.0, math.pi / 3) == pytest.approx(0.75, abs=1e-14)


def test_ramsey_decay():
    m = RamseyModel(t2=10.0)
    expected = 0.5 * (1 + math.exp(-0.5) * math.cos(0.4 * 5.0))
    assert p0(m, 0.4, 5.0) == pytest.approx(expected, rel=1e-14)


def test_negative_tau_rejected():
    with pytest.raises(SensorError):
        RamseyModel().log_likelihood(np.array([0.5]), np.array([-1.0]), 0)
    with pytest.raises(SensorError):
        HyperfineModel().log_likelihood(np.array([0.05]), np.array([-1.0]), 0)


def test_hyperfine_examples():
    m = HyperfineModel(tau_bounds=(0.0, 100.0))
    assert p0(m, 0.05, 0.0) == pytest.approx(1.0)
    t2 = 20.0
    tau = 2 * math.pi / 0.1
    m = HyperfineModel(omega0=0.0, t2=t2)
    assert p0(m, 0.1, tau) == pytest.approx(0.5 * (1 - math.exp(-tau / t2)), rel=1e-12)


@pytest.mark.parametrize("t2", [math.inf, 7.0])
def test_hyperfine_zero_coupling_is_ramsey_bitwise(t2):
    rng = np.random.default_rng(0)
    taus = rng.uniform(0.1, 100.0, size=(500, 1))
    hf = HyperfineModel(omega0=0.37, t2=t2)
    ra = RamseyModel(t2=t2)
    for y in (0, 1):
        a = hf.log_likelihood(np.zeros((500, 1)), taus, y)
        b = ra.log_likelihood(np.full((500, 1), 0.37), taus, y)
        np.testing.assert_array_equal(a, b)


def test_dolinar_examples():
    m = DolinarModel()
    a = m.alpha_seg
    assert p0(m, 1.0, -a) == pytest.approx(1.0)
    unit = DolinarModel(mean_photons=8.0, segments=8)
    assert unit.alpha_seg == pytest.approx(1.0)
    assert p0(unit, 1.0, 0.0) == pytest.approx(math.exp(-1.0), rel=1e-14)


def test_dolinar_sign_symmetry():
    m = DolinarModel(mean_photons=0.5)
    betas = np.linspace(-2.0, 2.0, 41)[:, None]
    for y in (0, 1):
        plus = m.log_likelihood(np.ones((41, 1)), betas, y)
        minus = m.log_likelihood(-np.ones((41, 1)), -betas, y)
        np.testing.assert_allclose(plus, minus, rtol=1e-15)


def test_dolinar_reference_bounds():
    m = DolinarModel()
    assert m.helstrom_bound() == pytest.approx(0.5 * (1 - math.sqrt(1 - math.exp(-0.8))))
    assert m.kennedy_error() == pytest.approx(0.5 * math.exp(-0.8))
    assert m.helstrom_bound() < m.kennedy_error()


MODELS = [RamseyModel(), RamseyModel(t2=30.0), HyperfineModel(), HyperfineModel(t2=50.0),
          DolinarModel(), DolinarModel(mean_photons=0.5)]


def random_inputs(model, rng, n):
    if model.prior.is_discrete:
        theta = model.prior.points[rng.integers(0, len(model.prior.points), n)]
    else:
        theta = model.prior.sample(rng, n)
    control = model.control_low + (model.control_high - model.control_low) * rng.random((n, model.d_controls))
    return theta, control


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.name)
def test_normalization_and_bounds(model):
    rng = np.random.default_rng(11)
    theta, control = random_inputs(model, rng, 1000)
    total = sum(np.exp(model.log_likelihood(theta, control, y)) for y in range(model.n_outcomes))
    np.testing.assert_allclose(total, 1.0, atol=1e-10)
    for y in range(model.n_outcomes):
        ll = model.log_likelihood(theta, control, y)
        assert np.all(np.isfinite(ll)) and np.all(ll <= 0.0)


def fd_check(model, theta, control, y, wrt):
    tape = ad.Tape()
    t = tape.leaf(theta, wrt == "theta")
    c = tape.leaf(control, wrt == "control")
    ll = model.log_likelihood(t, c, y)
    grad = tape.backward(ll)[(t if wrt == "theta" else c).id][0]
    h = 1e-6
    base = theta if wrt == "theta" else control
    shifted = []
    for s in (h, -h):
        x = base.copy()
        x[0] += s
        args = (x, control) if wrt == "theta" else (theta, x)
        shifted.append(float(model.log_likelihood(*args, y)))
    fd = (shifted[0] - shifted[1]) / (2 * h)
    return grad, fd


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.name)
def test_likelihood_gradients_match_finite_differences(model):
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(60):
        theta, control = random_inputs(model, rng, 1)
        theta, control = theta[0], control[0]
        for y in range(model.n_outcomes):
            if float(model.probabilities(theta, control)[y]) <= 1e-8:
                continue
            targets = ["control"] if model.prior.is_discrete else ["control", "theta"]
            for wrt in targets:
                g, fd = fd_check(model, theta, control, y, wrt)
                assert abs(g - fd) <= 1e-5 * max(1.0, abs(fd)), (wrt, g, fd)
                checked += 1
    assert checked > 100


def test_sampling_deterministic_and_degenerate():
    m = RamseyModel(tau_bounds=(0.0, 10.0))
    draws = [m.sample_outcome(np.array([0.4]), np.array([0.0]), np.random.default_rng(s)) for s in range(200)]
    assert set(draws) == {0}
    a = m.sample_outcome(np.array([0.4]), np.array([3.0]), np.random.default_rng(42))
    b = m.sample_outcome(np.array([0.4]), np.array([3.0]), np.random.default_rng(42))
    assert a == b


def test_sampling_frequency():
    m = RamseyModel()
    u = np.random.default_rng(2024).random(100_000)
    theta = np.ones((u.size, 1))
    tau = np.full((u.size, 1), math.pi / 3)
    freq = np.mean(m.sample_outcomes(theta, tau, u) == 0)
    assert abs(freq - 0.75) < 0.006


@pytest.mark.parametrize("model", MODELS[::2], ids=lambda m: m.name)
def test_sampling_chi_square(model):
    rng = np.random.default_rng(77)
    theta, control = random_inputs(model, rng, 1)
    n = 100_000
    y = model.sample_outcomes(np.repeat(theta, n, 0), np.repeat(control, n, 0), rng.random(n))
    probs = model.probabilities(theta[0], control[0])
    counts = np.bincount(y, minlength=model.n_outcomes)
    expected = n * probs
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    dof = model.n_outcomes - 1
    # chi-square mean dof, std sqrt(2 dof)
    assert chi2 < dof + 4 * math.sqrt(2 * dof)


def test_resource_costs():
    assert float(RamseyModel().resource_cost(np.array([5.0]))) == 5.0
    assert float(RamseyModel(overhead=1.0).resource_cost(np.array([2.0]))) == 3.0
    assert float(HyperfineModel(overhead=0.5).resource_cost(np.array([2.0]))) == 2.5
    m = DolinarModel()
    np.testing.assert_array_equal(m.resource_cost(np.array([[-1.0], [0.3]])), [1.0, 1.0])
    assert RamseyModel(overhead=1.0).min_step_cost() == pytest.approx(1.1)


@settings(max_examples=50, deadline=None)
@given(tau=st.floats(0.1, 100.0), overhead=st.floats(0.0, 10.0))
def test_resource_cost_nonnegative(tau, overhead):
    cost = RamseyModel(overhead=overhead).resource_cost(np.array([tau]))
    assert np.isfinite(cost) and cost >= 0


def test_control_bounds_check():
    m = RamseyModel()
    m.check_control(np.array([50.0]))
    with pytest.raises(SensorError):
        m.check_control(np.array([200.0]))


def test_prior_validation_and_clip():
    with pytest.raises(ValueError):
        Prior.box([[0.0, 0.0]])
    p = Prior.box([[0.0, 1.0], [2.0, 4.0]])
    assert p.d_params == 2
    np.testing.assert_array_equal(p.midpoint, [0.5, 3.0])
    np.testing.assert_array_equal(p.clip(np.array([[-1.0, 5.0]])), [[0.0, 4.0]])
    assert p.contains(p.sample(np.random.default_rng(0), 100))


def test_make_model():
    assert isinstance(make_model("ramsey", t2=5.0), RamseyModel)
    assert make_model("hyperfine", coupling_bounds=[0.0, 0.2]).coupling_bounds == (0.0, 0.2)
    with pytest.raises(SensorError, match="unknown model"):
        make_model("squid")
