import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bmaml.models import policy_spec
from bmaml.rng import stream
from bmaml.tasks import (
    HORIZON,
    NavTask,
    SinusoidParams,
    nav_reset,
    nav_step,
    rollout,
    rollout_batch,
    sample_nav_task,
    sample_sinusoid_params,
    sample_sinusoid_task,
    sample_synthetic_classification_task,
    sinusoid_dataset,
)

POLICY = policy_spec()


def test_sinusoid_identity():
    assert SinusoidParams(1.0, 0.0, 1.0)(math.pi / 2) == pytest.approx(1.0)


def test_sinusoid_parameter_ranges():
    r = stream(0, "ranges")
    ps = [sample_sinusoid_params(r) for _ in range(1000)]
    assert all(0.1 <= p.amplitude <= 5.0 for p in ps)
    assert all(0.0 <= p.phase <= 2 * math.pi for p in ps)
    assert all(0.5 <= p.frequency <= 2.0 for p in ps)


def test_sinusoid_task_shapes_and_determinism():
    a = sample_sinusoid_task(stream(3, "t"), 5)
    b = sample_sinusoid_task(stream(3, "t"), 5)
    assert (len(a.trn), len(a.val), len(a.tst)) == (5, 5, 100)
    assert np.array_equal(a.trn.inputs, b.trn.inputs) and np.array_equal(a.tst.targets, b.tst.targets)
    assert np.all(np.abs(a.trn.inputs) <= 5.0)
    with pytest.raises(ValueError):
        sample_sinusoid_task(stream(0, "t"), 0)


def test_sinusoid_noise_std():
    p = SinusoidParams(2.0, 0.3, 1.1)
    d = sinusoid_dataset(stream(0, "noise"), p, 100_000)
    resid = d.targets - p(d.inputs)
    assert resid.std() == pytest.approx(0.02, rel=0.05)


def test_classification_counts_and_determinism():
    t = sample_synthetic_classification_task(stream(0, "c"), ways=5, shots=1)
    assert len(t.trn) == 5 and sorted(t.trn.targets) == list(range(5))
    assert t.pool_inputs.shape == (20, 8) and t.pool_labels.shape == (20,)
    assert np.all(t.pool_labels < 5)
    u = sample_synthetic_classification_task(stream(0, "c"), ways=5, shots=1)
    assert np.array_equal(t.pool_inputs, u.pool_inputs)
    with pytest.raises(ValueError):
        sample_synthetic_classification_task(stream(0, "c"), ways=1)


def test_classification_far_means_are_separable():
    t = sample_synthetic_classification_task(stream(1, "c"), mean_scale=100.0)
    d = ((t.tst.inputs[:, None, :] - t.means[None]) ** 2).sum(-1)
    assert np.mean(d.argmin(axis=1) == t.tst.targets) == 1.0


def test_nav_step_examples():
    nxt, r, done = nav_step((0.05, 0.0), np.zeros(2), np.array([0.1, 0.0]))
    assert np.allclose(nxt, [0.1, 0.0]) and r == pytest.approx(-0.0025) and not done
    nxt, r, done = nav_step((0.3, 0.4), np.zeros(2), np.array([1.0, 1.0]))
    assert np.allclose(nxt, [0.1, 0.1])
    nxt, r, done = nav_step((0.1, 0.1), np.zeros(2), np.array([0.1, 0.1]))
    assert r == 0.0 and done
    assert nav_step((0.9, 0.9), np.zeros(2), np.zeros(2), step_index=HORIZON - 1)[2]
    assert np.array_equal(nav_reset(NavTask((0.5, 0.5))), np.zeros(2))


def test_nav_task_validation():
    with pytest.raises(ValueError):
        NavTask((1.5, 0.0))
    g = sample_nav_task(stream(0, "g")).goal
    assert all(0 <= v <= 1 for v in g)


def test_deterministic_policy_is_seed_independent():
    theta = np.zeros(POLICY.layout.dim)
    theta[POLICY.layout.log_std] = -1e3
    a = rollout(POLICY, theta, NavTask((0.5, 0.5)), 2, stream(0, "r"))
    b = rollout(POLICY, theta, NavTask((0.5, 0.5)), 2, stream(1, "r"))
    for x, y in zip(a, b):
        assert np.array_equal(x.states, y.states) and np.array_equal(x.rewards, y.rewards)


def test_rollout_counts_returns_and_invariants():
    theta = POLICY.layout.init(stream(0, "p"), log_std=0.0)
    trajs = rollout(POLICY, theta, NavTask((0.2, 0.7)), 10, stream(0, "r"))
    assert len(trajs) == 10
    for tr in trajs:
        assert len(tr) <= HORIZON
        assert len(tr.states) == len(tr.actions) == len(tr.rewards)
        assert np.all(np.abs(tr.actions) <= 0.1)
        assert np.all(tr.rewards <= 0)
        assert tr.total_return == pytest.approx(tr.rewards.sum())
        # reward is recomputable from the recorded state and clipped action
        goal = np.array([0.2, 0.7])
        assert np.allclose(tr.rewards, -(((tr.states + tr.actions) - goal) ** 2).sum(-1))


def test_early_termination_near_goal():
    # a wide-variance policy on a goal one step away terminates some episodes early
    theta = np.zeros(POLICY.layout.dim)
    theta[POLICY.layout.log_std] = -1e3
    last = POLICY.layout.layers[-1][1]
    theta[last] = 0.05  # output bias: constant action (0.05, 0.05)
    trajs = rollout(POLICY, theta, NavTask((0.1, 0.1)), 1, stream(0, "r"))
    assert len(trajs[0]) == 2 and trajs[0].terminated_early


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batch_returns_match_trajectory_sums(seed):
    r = np.random.default_rng(seed)
    params = np.stack([POLICY.layout.init(r, log_std=0.0) for _ in range(2)])
    goals = r.uniform(size=(2, 2))
    batch = rollout_batch(POLICY, params, goals, 3, stream(seed, "r"), horizon=20)
    flat = [t.total_return for t in batch.trajectories()]
    assert np.allclose(batch.returns.ravel(), flat)
    assert np.all(batch.returns <= 0)
