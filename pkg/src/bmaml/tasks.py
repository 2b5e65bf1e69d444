"""Task distributions: sinusoid regression, synthetic few-shot classification
and the 2D point-navigation MDP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .models import Dataset, MlpSpec, mlp_forward

AMPLITUDE_RANGE = (0.1, 5.0)  # task amplitude A
PHASE_RANGE = (0.0, 2.0 * math.pi)
FREQUENCY_RANGE = (0.5, 2.0)
INPUT_RANGE = (-5.0, 5.0)
NOISE_FRACTION = 0.01  # noise std = 0.01 * amplitude


@dataclass
class Task:
    trn: Dataset
    val: Dataset
    tst: Dataset


@dataclass(frozen=True)
class SinusoidParams:
    amplitude: float
    phase: float
    frequency: float

    @property
    def noise_std(self) -> float:
        return NOISE_FRACTION * self.amplitude

    def __call__(self, x):
        return self.amplitude * np.sin(self.frequency * np.asarray(x) + self.phase)


@dataclass
class SinusoidTask(Task):
    params: SinusoidParams = None


def sample_sinusoid_params(rng: np.random.Generator) -> SinusoidParams:
    return SinusoidParams(
        amplitude=rng.uniform(*AMPLITUDE_RANGE),
        phase=rng.uniform(*PHASE_RANGE),
        frequency=rng.uniform(*FREQUENCY_RANGE),
    )


def sinusoid_dataset(rng: np.random.Generator, params: SinusoidParams, n: int) -> Dataset:
    x = rng.uniform(*INPUT_RANGE, size=(n, 1))
    y = params(x) + rng.normal(0.0, params.noise_std, size=(n, 1))
    return Dataset(x, y)


def sample_sinusoid_task(rng: np.random.Generator, K: int, n_test: int = 100) -> SinusoidTask:
    """K task-train and K task-validation points; ``n_test`` task-test points."""
    if K < 1:
        raise ValueError("K must be >= 1")
    params = sample_sinusoid_params(rng)
    return SinusoidTask(
        trn=sinusoid_dataset(rng, params, K),
        val=sinusoid_dataset(rng, params, K),
        tst=sinusoid_dataset(rng, params, n_test),
        params=params,
    )


# ------------------------------------------------------------ classification


@dataclass
class ClassificationTask(Task):
    ways: int = 0
    pool_inputs: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    pool_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    means: np.ndarray | None = None


def sample_synthetic_classification_task(
    rng: np.random.Generator,
    ways: int = 5,
    shots: int = 1,
    pool_size: int = 20,
    dim: int = 8,
    mean_scale: float = 3.0,
    cluster_var: float = 0.5,
    n_test_per_class: int = 20,
) -> ClassificationTask:
    """Gaussian clusters with means uniform in [-mean_scale, mean_scale]^dim.

    Returns ``shots`` labelled points per class for task-train and task-validation,
    ``n_test_per_class`` per class for task-test, and an unlabelled pool whose
    labels are drawn uniformly over classes (kept hidden in ``pool_labels``).
    """
    if ways < 2 or shots < 1:
        raise ValueError("need ways >= 2 and shots >= 1")
    means = rng.uniform(-mean_scale, mean_scale, size=(ways, dim))
    std = math.sqrt(cluster_var)

    def draw(labels: np.ndarray) -> Dataset:
        x = means[labels] + std * rng.standard_normal((len(labels), dim))
        return Dataset(x, labels.astype(np.int64))

    per_class = lambda k: np.repeat(np.arange(ways), k)
    trn = draw(per_class(shots))
    val = draw(per_class(shots))
    tst = draw(per_class(n_test_per_class))
    pool = draw(rng.integers(0, ways, size=pool_size))
    return ClassificationTask(
        trn, val, tst, ways=ways, pool_inputs=pool.inputs, pool_labels=pool.targets, means=means
    )


# ------------------------------------------------------------ 2D navigation

ACTION_LIMIT = 0.1  # velocity clip, Appendix C.4
GOAL_TOLERANCE = 0.01
HORIZON = 100


@dataclass(frozen=True)
class NavTask:
    goal: tuple[float, float]

    def __post_init__(self):
        if not all(0.0 <= g <= 1.0 for g in self.goal):
            raise ValueError("goal must lie in the unit square")


def sample_nav_task(rng: np.random.Generator) -> NavTask:
    return NavTask(tuple(float(v) for v in rng.uniform(0.0, 1.0, size=2)))


def nav_reset(task: NavTask | None = None) -> np.ndarray:
    return np.zeros(2)


def nav_step(goal, state, action, step_index: int = 0, horizon: int = HORIZON):
    """Apply the clipped velocity; returns ``(next_state, reward, done)``.

    Works elementwise on stacked states/actions (last axis of size 2).
    ``step_index`` counts steps already taken in the episode.
    """
    goal = np.asarray(goal.goal if isinstance(goal, NavTask) else goal, dtype=np.float64)
    action = np.clip(np.asarray(action, dtype=np.float64), -ACTION_LIMIT, ACTION_LIMIT)
    nxt = np.asarray(state, dtype=np.float64) + action
    sq = ((nxt - goal) ** 2).sum(axis=-1)
    done = (np.sqrt(sq) < GOAL_TOLERANCE) | (step_index + 1 >= horizon)
    return nxt, -sq, done


@dataclass
class Trajectory:
    states: np.ndarray  # (T, 2) observed positions
    actions: np.ndarray  # (T, 2) clipped velocities applied
    raw_actions: np.ndarray  # (T, 2) sampled before clipping; log-probs use these
    rewards: np.ndarray  # (T,)
    terminated_early: bool

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class EpisodeBatch:
    """Stacked episodes padded to the horizon.

    Arrays have shape ``(*B, K, H, ...)`` where ``*B`` are batch axes (tasks,
    particles), ``K`` episodes and ``H`` the horizon; ``mask`` marks steps taken.
    """

    states: np.ndarray
    actions: np.ndarray
    raw_actions: np.ndarray
    rewards: np.ndarray
    mask: np.ndarray

    @property
    def returns(self) -> np.ndarray:
        return (self.rewards * self.mask).sum(axis=-1)

    def trajectories(self) -> list[Trajectory]:
        out = []
        flat = lambda a, tail: a.reshape((-1,) + a.shape[-tail:])
        S, A, R = flat(self.states, 2), flat(self.actions, 2), flat(self.raw_actions, 2)
        rew, mask = flat(self.rewards, 1), flat(self.mask, 1)
        for i in range(len(rew)):
            n = int(mask[i].sum())
            out.append(Trajectory(S[i, :n], A[i, :n], R[i, :n], rew[i, :n], n < mask.shape[-1]))
        return out


def policy_mean(spec: MlpSpec, params, states) -> np.ndarray:
    with dg.no_grad():
        return mlp_forward(spec, params, states).value


def rollout_batch(
    spec: MlpSpec,
    params: np.ndarray,
    goals: np.ndarray,
    episodes: int,
    rng: np.random.Generator,
    horizon: int = HORIZON,
) -> EpisodeBatch:
    """Sample ``episodes`` episodes for every policy in ``params`` (shape ``(*B, dim)``)
    on the goals ``(*B, 2)`` (broadcastable), all steps vectorised."""
    params = np.asarray(params, dtype=np.float64)
    batch = params.shape[:-1]
    goals = np.broadcast_to(np.asarray(goals, dtype=np.float64), batch + (2,))
    goal = goals[..., None, :]
    with np.errstate(over="ignore"):
        std = np.exp(params[..., spec.layout.log_std])[..., None, :]
    shape = batch + (episodes,)
    states = np.zeros(shape + (horizon, 2))
    actions = np.zeros(shape + (horizon, 2))
    raws = np.zeros(shape + (horizon, 2))
    rewards = np.zeros(shape + (horizon,))
    mask = np.zeros(shape + (horizon,))
    state = np.zeros(shape + (2,))
    alive = np.ones(shape, dtype=bool)
    for t in range(horizon):
        mean = policy_mean(spec, params, state)
        raw = mean + std * rng.standard_normal(shape + (2,))
        nxt, reward, done = nav_step(goal, state, raw, t, horizon)
        states[..., t, :] = state
        raws[..., t, :] = raw
        actions[..., t, :] = np.clip(raw, -ACTION_LIMIT, ACTION_LIMIT)
        rewards[..., t] = np.where(alive, reward, 0.0)
        mask[..., t] = alive
        state = np.where(alive[..., None], nxt, state)
        alive = alive & ~done
        if not alive.any():
            break
    return EpisodeBatch(states, actions, raws, rewards, mask)


def rollout(
    spec: MlpSpec, params: np.ndarray, task: NavTask, episodes: int, rng: np.random.Generator
) -> list[Trajectory]:
    """``episodes`` sampled episodes of one Gaussian policy on one task."""
    return rollout_batch(spec, params, np.asarray(task.goal), episodes, rng).trajectories()
