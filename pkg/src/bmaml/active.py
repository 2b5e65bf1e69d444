"""Pool-based active learning with the particle ensemble's predictive entropy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg
from .meta import adapt
from .models import Dataset, Model, predictive
from .svgd import KernelConfig
from .tasks import ClassificationTask

STRATEGIES = ("entropy", "random")


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats over the last axis, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def predictive_entropy(spec, particles, x) -> np.ndarray:
    """Entropy of the particle-averaged class distribution at each row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    probs = predictive(spec, particles, x[None, :] if single else x)
    h = entropy(probs)
    return float(h[0]) if single else h


@dataclass
class PoolState:
    labeled: Dataset
    pool_inputs: np.ndarray
    pool_labels: np.ndarray  # hidden until acquired
    pool_index: np.ndarray = None  # original pool positions still unlabeled
    history: list[float] = field(default_factory=list)
    selected: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.labeled) == 0:
            raise ValueError("active learning needs a nonempty initial labeled set")
        if self.pool_index is None:
            self.pool_index = np.arange(len(self.pool_inputs))

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.pool_inputs)

    def acquire(self, i: int) -> None:
        """Reveal pool row ``i`` and move it into the labeled set."""
        self.labeled = self.labeled.append(self.pool_inputs[i], self.pool_labels[i])
        self.selected.append(int(self.pool_index[i]))
        keep = np.arange(len(self.pool_inputs)) != i
        self.pool_inputs = self.pool_inputs[keep]
        self.pool_labels = self.pool_labels[keep]
        self.pool_index = self.pool_index[keep]


@dataclass
class ActiveRun:
    state: PoolState
    initial_accuracy: float
    pool_entropies: list[np.ndarray]  # pool entropies seen at each acquisition
    picks: list[int]  # row chosen within the pool at that time

    @property
    def history(self) -> np.ndarray:
        return np.asarray(self.state.history)


def accuracy(model: Model, particles: np.ndarray, data: Dataset) -> float:
    probs = predictive(model.spec, particles, data.inputs)
    return float((probs.argmax(axis=-1) == data.targets).mean())


def _refit(algo, theta, labeled: Dataset, model, n, step, kernel):
    with dg.no_grad():
        return adapt(algo, theta, labeled.expand(), model, n, step, kernel)


def active_learning_loop(
    theta0: np.ndarray,
    task: ClassificationTask,
    model: Model,
    n: int,
    step: float,
    kernel: KernelConfig = KernelConfig(),
    strategy: str = "entropy",
    rng: np.random.Generator | None = None,
    algo: str = "bmaml",
) -> ActiveRun:
    """Adapt on the labeled shots, then acquire one pool item at a time until the pool is empty.

    Each round re-runs ``n`` inner steps on the whole labeled set starting
    from the current particles and records test accuracy.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == "random" and rng is None:
        raise ValueError("random acquisition needs an rng")
    state = PoolState(task.trn, np.array(task.pool_inputs, dtype=np.float64), np.array(task.pool_labels))
    theta = _refit(algo, np.asarray(theta0, dtype=np.float64), state.labeled, model, n, step, kernel)
    run = ActiveRun(state, accuracy(model, theta, task.tst), [], [])
    while len(state.pool_inputs):
        h = predictive_entropy(model.spec, theta, state.pool_inputs)
        # argmax takes the first maximum, so ties go to the lowest index
        i = int(np.argmax(h)) if strategy == "entropy" else int(rng.integers(len(h)))
        run.pool_entropies.append(h)
        run.picks.append(i)
        state.acquire(i)
        theta = _refit(algo, theta, state.labeled, model, n, step, kernel)
        state.history.append(accuracy(model, theta, task.tst))
    return run


def max_entropy(num_classes: int) -> float:
    return math.log(num_classes)
