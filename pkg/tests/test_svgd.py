import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmaml import diffgraph as dg
from bmaml.diffgraph import NumericOverflowError
from bmaml.models import Model, regression_spec
from bmaml.rng import stream
from bmaml.svgd import (
    KernelConfig,
    bandwidth,
    median_bandwidth,
    rbf_kernel,
    stein_direction,
    svgd_n,
    svgd_step,
    svpg_step,
)
from bmaml.tasks import sample_sinusoid_task
import oracles
from oracles import fd_grad, rel_err


def normal_logp(mu=0.0, sigma=1.0):
    return lambda t: dg.vsum(-0.5 * ((t - mu) / sigma) ** 2, axis=-1)


def test_rbf_kernel_values():
    a = np.array([0.3, -1.0])
    assert rbf_kernel(a, a, 1.5).value == 1.0
    b = a + np.array([math.sqrt(2.0), 0.0])
    assert rbf_kernel(a, b, 2.0).value == pytest.approx(math.exp(-1))


def test_rbf_kernel_gradient_matches_finite_differences():
    r = np.random.default_rng(0)
    a, b = r.normal(size=3), r.normal(size=3)
    g = dg.grad(lambda y: rbf_kernel(a, y, 1.7), b)
    assert rel_err(g, fd_grad(lambda y: math.exp(-((a - y) ** 2).sum() / 1.7), b)) < 1e-8


def test_median_bandwidth_examples():
    assert median_bandwidth(np.array([[0.0, 0.0], [2.0, 0.0]])) == pytest.approx(4 / math.log(2))
    assert median_bandwidth(np.ones((4, 3))) == 1.0
    x = np.random.default_rng(0).normal(size=(5, 7))
    assert median_bandwidth(x) == pytest.approx(oracles.median_bandwidth(x), rel=1e-14)
    with pytest.raises(ValueError):
        median_bandwidth(np.zeros((1, 3)))


def test_bandwidth_batches_and_fixed_mode():
    x = np.random.default_rng(1).normal(size=(3, 4, 2))
    h = bandwidth(x, KernelConfig())
    assert h.shape == (3, 1, 1)
    assert h[1, 0, 0] == pytest.approx(oracles.median_bandwidth(x[1]))
    assert np.all(bandwidth(x, KernelConfig.fixed(0.7)) == 0.7)
    with pytest.raises(ValueError):
        KernelConfig("fixed", None)
    with pytest.raises(ValueError):
        KernelConfig("silverman")


def test_stein_direction_matches_double_loop_oracle():
    r = np.random.default_rng(2)
    theta, score = r.normal(size=(6, 4)), r.normal(size=(6, 4))
    ours = stein_direction(theta, score, 2.3).value
    assert np.allclose(ours, oracles.stein_direction(theta, score, 2.3), atol=1e-14)


def test_two_particle_gaussian_step_by_hand():
    # phi(-1) = (1/2)[1 - e^-2 - 2 e^-2]; symmetric for +1
    out = svgd_step(np.array([[-1.0], [1.0]]), normal_logp(), 0.1, KernelConfig.fixed(2.0))
    moved = 0.05 * (1 - 3 * math.exp(-2))
    assert out[0, 0] == pytest.approx(-1 + moved, abs=1e-15)
    assert out[1, 0] == pytest.approx(1 - moved, abs=1e-15)
    assert out[0, 0] == pytest.approx(-0.970300292485492, abs=1e-14)


def test_repulsion_alone_pushes_particles_apart():
    flat = lambda t: dg.vsum(t * 0.0, axis=-1)
    theta = np.array([[0.0, 0.0], [0.5, 0.2]])
    out = svgd_step(theta, flat, 0.1)
    assert np.linalg.norm(out[0] - out[1]) > np.linalg.norm(theta[0] - theta[1])


def test_single_particle_is_gradient_ascent_over_100_steps():
    r = np.random.default_rng(3)
    A = r.normal(size=(3, 3))
    A = A @ A.T / 3 + np.eye(3)
    logp = lambda t: dg.vsum(-0.5 * (t @ A) * t, axis=-1) + dg.vsum(dg.tanh(t), axis=-1)
    theta0 = r.normal(size=(1, 3))
    ours = svgd_n(theta0, logp, 100, 0.01)
    ref = theta0.copy()
    for _ in range(100):
        ref = ref + 0.01 * dg.grad(lambda t: dg.vsum(logp(t)), ref)
    assert np.max(np.abs(ours - ref)) <= 1e-12


def test_zero_steps_and_zero_step_size_are_identity():
    theta = np.random.default_rng(4).normal(size=(3, 2))
    assert svgd_n(theta, normal_logp(), 0, 0.1) is theta
    assert svgd_step(theta, normal_logp(), 0.0) is theta
    with pytest.raises(ValueError):
        svgd_step(theta, normal_logp(), -0.1)
    with pytest.raises(ValueError):
        svgd_n(theta, normal_logp(), -1, 0.1)


def test_non_finite_direction_names_the_particle():
    theta = np.array([[0.0], [900.0]])
    logp = lambda t: dg.vsum(dg.exp(t), axis=-1)
    with pytest.raises(NumericOverflowError, match="particle 1"):
        svgd_step(theta, logp, 0.1)


def test_unrolled_svgd_jacobian_matches_finite_differences():
    spec = regression_spec(hidden=(4,))
    model = Model(spec)
    data = sample_sinusoid_task(stream(0, "t"), 5).trn.expand()
    r = np.random.default_rng(5)
    theta0 = np.stack([spec.layout.init(r) for _ in range(2)])
    w = r.normal(size=theta0.shape)
    h = bandwidth(theta0, KernelConfig())[0, 0]
    logp = lambda t: model.log_posterior(t, data)
    scalar = lambda t: dg.vsum(svgd_n(t, logp, 1, 0.01) * w)
    g = dg.grad(scalar, theta0)
    # stop-gradient bandwidth: the oracle holds h at its snapshot value
    frozen = lambda t: float((svgd_n(t, logp, 1, 0.01, KernelConfig.fixed(h)) * w).sum())
    assert rel_err(g, fd_grad(frozen, theta0, 1e-6)) <= 1e-4


def test_svpg_single_particle_is_scaled_vpg():
    r = np.random.default_rng(6)
    theta, g = r.normal(size=(1, 5)), r.normal(size=(1, 5))
    for eta in (0.1, 1.0, 3.0):
        assert np.allclose(svpg_step(theta, g, eta, 0.2), theta + 0.2 * g / eta, rtol=0, atol=1e-15)


def test_svpg_two_particles_by_formula():
    theta = np.array([[0.0, 1.0], [1.0, 0.0]])
    g = np.array([[1.0, 2.0], [-1.0, 0.5]])
    h, eta, eps = 1.5, 0.5, 0.1
    k = math.exp(-2.0 / h)
    d = theta[1] - theta[0]
    phi0 = 0.5 * (g[0] / eta + k * g[1] / eta - (2 / h) * k * d)
    phi1 = 0.5 * (g[1] / eta + k * g[0] / eta + (2 / h) * k * d)
    out = svpg_step(theta, g, eta, eps, KernelConfig.fixed(h))
    assert np.allclose(out, theta + eps * np.stack([phi0, phi1]), atol=1e-15)


def test_svpg_large_eta_is_repulsion_dominated():
    theta = np.array([[0.0], [0.3]])
    g = np.array([[1.0], [1.0]])
    out = svpg_step(theta, g, 1e9, 0.1)
    assert out[0, 0] < 0 < out[1, 0] - 0.3


def test_svpg_validates_inputs():
    with pytest.raises(ValueError):
        svpg_step(np.zeros((2, 2)), np.zeros((2, 2)), 0.0, 0.1)
    with pytest.raises(ValueError):
        svpg_step(np.zeros((2, 2)), np.zeros((1, 2)), 1.0, 0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_step_is_permutation_equivariant(seed, m):
    r = np.random.default_rng(seed)
    theta = r.normal(size=(m, 3))
    perm = r.permutation(m)
    logp = lambda t: dg.vsum(-0.5 * t * t + dg.tanh(t), axis=-1)
    a = svgd_step(theta, logp, 0.05)[perm]
    b = svgd_step(theta[perm], logp, 0.05)
    assert np.allclose(a, b, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_batched_tasks_match_individual_updates(seed, m):
    r = np.random.default_rng(seed)
    theta = r.normal(size=(3, m, 2))
    mus = np.array([[-1.0], [0.0], [2.0]])[:, :, None]
    logp = lambda t: dg.vsum(-0.5 * (t - mus) ** 2, axis=-1)
    batched = svgd_step(theta, logp, 0.1)
    for i in range(3):
        one = svgd_step(theta[i], lambda t: dg.vsum(-0.5 * (t - mus[i]) ** 2, axis=-1), 0.1)
        assert np.allclose(batched[i], one, atol=1e-13)


def test_posterior_recovery_gaussian():
    theta = stream(0, "svgd-recovery").normal(0.0, 1.0, size=(50, 1))
    out = svgd_n(theta, normal_logp(3.0, 2.0), 2000, 0.05)
    assert 2.8 <= out.mean() <= 3.2
    assert 1.7 <= out.std() <= 2.3
