"""Supervised meta-learners: MAML, EMAML, Bayesian fast adaptation (BFA) and
BMAML with the chaser loss.

Initial particles ``theta0`` have shape ``(M, dim)``; MAML is the ``M = 1``
case. A meta-batch of tasks is evaluated in one vectorised pass with
particles tiled to ``(T, M, dim)``. Meta-losses are summed over tasks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffgraph as dg
from .diffgraph import NumericOverflowError, Var
from .models import Dataset, Model, predictive
from .optim import make_optimizer
from .svgd import KernelConfig, score_fn, svgd_n
from .tasks import Task

ALGORITHMS = ("maml", "emaml", "bfa", "bmaml")
SVGD_ALGORITHMS = ("bfa", "bmaml")


@dataclass
class MetaConfig:
    num_particles: int = 5
    inner_steps: int = 1  # n, Appendix A.1
    leader_steps: int = 1  # s, Appendix A.1
    inner_lr: float = 0.01  # chaser step size, Appendix A.1
    leader_lr: float = 0.001  # leader step size, Appendix A.1
    meta_lr: float = 0.001  # Adam learning rate, Appendix A.1
    meta_batch: int = 10  # tasks per meta-batch, Appendix A.1
    optimizer: str = "adam"
    eval_steps: int | None = None  # meta-test inner steps; None means inner_steps
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig(**self.kernel)
        checks = {
            "num_particles": self.num_particles >= 1,
            "inner_steps": self.inner_steps >= 1,
            "leader_steps": self.leader_steps >= 1,
            "inner_lr": self.inner_lr > 0,
            "leader_lr": self.leader_lr >= 0,
            "meta_lr": self.meta_lr >= 0,
            "meta_batch": self.meta_batch >= 1,
            "optimizer": self.optimizer in ("adam", "sgd"),
            "eval_steps": self.eval_steps is None or self.eval_steps >= 0,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid MetaConfig field(s): {', '.join(bad)}")

    @property
    def n_eval(self) -> int:
        return self.inner_steps if self.eval_steps is None else self.eval_steps


class MetaDivergenceError(NumericOverflowError):
    def __init__(self, op: str, task_index: int | None, message: str):
        self.task_index = task_index
        super().__init__(op, message)


@dataclass
class TaskBatch:
    """Task datasets stacked along a leading task axis, with a particle axis inserted."""

    trn: Dataset
    val: Dataset
    tasks: Sequence[Task]

    @classmethod
    def from_tasks(cls, tasks: Sequence[Task]) -> "TaskBatch":
        tasks = list(tasks)
        return cls(
            Dataset.stack([t.trn for t in tasks]).expand(),
            Dataset.stack([t.val for t in tasks]).expand(),
            tasks,
        )

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def trn_val(self) -> Dataset:
        return self.trn.concat(self.val)


def _as_particles(theta0) -> np.ndarray:
    theta0 = np.asarray(theta0, dtype=np.float64)
    return theta0[None, :] if theta0.ndim == 1 else theta0


def tile(theta0, n_tasks: int):
    """Repeat the initial particles for every task (gradients sum back over tasks)."""
    if isinstance(theta0, Var):
        return dg.broadcast_to(theta0, (n_tasks,) + theta0.shape)
    return np.broadcast_to(theta0, (n_tasks,) + theta0.shape).copy()


def gd_n(theta, log_p, n: int, step: float):
    """``n`` plain gradient-ascent steps on ``log_p`` for every particle independently."""
    for _ in range(n):
        g = score_fn(theta, log_p)
        out = dg.as_var(theta) + g * step
        theta = out if isinstance(theta, Var) else out.value
    return theta


def adapt(algo: str, theta, data: Dataset, model: Model, n: int, step: float, kernel: KernelConfig):
    """The learner's inner update on ``data``: SVGD for BFA/BMAML, GD otherwise."""
    log_p = lambda th: model.log_posterior(th, data)
    if algo in SVGD_ALGORITHMS:
        return svgd_n(theta, log_p, n, step, kernel)
    return gd_n(theta, log_p, n, step)


def chaser_loss(chaser, leader) -> Var:
    """sum_m ||chaser_m - stopgrad(leader_m)||^2, particles paired by index."""
    chaser = dg.as_var(chaser)
    leader = dg.stop_gradient(leader)
    if chaser.shape != leader.shape:
        raise ValueError(f"chaser {chaser.shape} and leader {leader.shape} differ in shape")
    d = chaser - leader
    return (d * d).sum()


def log_mean_exp(values: Var, axis: int = -1) -> Var:
    n = values.shape[axis]
    return dg.logsumexp(values, axis=axis) - math.log(n)


# ------------------------------------------------------------- meta-losses


def maml_loss(theta0: Var, batch: TaskBatch, model: Model, cfg: MetaConfig) -> Var:
    """Validation negative log-likelihood after GD adaptation, summed over tasks
    and particles (independent ensemble members for M > 1)."""
    thetas = tile(theta0, len(batch))
    adapted = adapt("maml", thetas, batch.trn, model, cfg.inner_steps, cfg.inner_lr, cfg.kernel)
    return -model.log_likelihood(adapted, batch.val).sum()


def bfa_loss(theta0: Var, batch: TaskBatch, model: Model, cfg: MetaConfig) -> Var:
    """-sum_tasks log[(1/M) sum_m p(D_val | theta_m)] after SVGD adaptation."""
    thetas = tile(theta0, len(batch))
    adapted = adapt("bfa", thetas, batch.trn, model, cfg.inner_steps, cfg.inner_lr, cfg.kernel)
    return -log_mean_exp(model.log_likelihood(adapted, batch.val)).sum()


def leader_particles(chaser: np.ndarray, batch: TaskBatch, model: Model, cfg: MetaConfig) -> np.ndarray:
    """``s`` SVGD steps from the chaser toward the posterior on trn + val."""
    with dg.no_grad():
        return adapt("bmaml", np.asarray(chaser), batch.trn_val, model, cfg.leader_steps, cfg.leader_lr, cfg.kernel)


def bmaml_loss(theta0: Var, batch: TaskBatch, model: Model, cfg: MetaConfig) -> Var:
    thetas = tile(theta0, len(batch))
    chaser = adapt("bmaml", thetas, batch.trn, model, cfg.inner_steps, cfg.inner_lr, cfg.kernel)
    leader = leader_particles(dg.as_var(chaser).value, batch, model, cfg)
    return chaser_loss(chaser, leader)


META_LOSSES: dict[str, Callable[..., Var]] = {
    "maml": maml_loss,
    "emaml": maml_loss,
    "bfa": bfa_loss,
    "bmaml": bmaml_loss,
}


def _locate_task(algo: str, theta0: np.ndarray, tasks: Sequence[Task], model: Model, cfg: MetaConfig):
    for i, task in enumerate(tasks):
        try:
            meta_gradient(algo, theta0, [task], model, cfg, _locate=False)
        except NumericOverflowError:
            return i
    return None


def meta_gradient(
    algo: str, theta0, tasks: Sequence[Task] | TaskBatch, model: Model, cfg: MetaConfig, _locate: bool = True
) -> tuple[float, np.ndarray]:
    """Meta-loss and its gradient with respect to the initial particles."""
    theta0 = _as_particles(theta0)
    batch = tasks if isinstance(tasks, TaskBatch) else TaskBatch.from_tasks(tasks)
    leaf = dg.variable(theta0)
    try:
        with dg.enable_grad():
            loss = META_LOSSES[algo](leaf, batch, model, cfg)
        (g,) = dg.gradients(loss, [leaf])
    except NumericOverflowError as err:
        idx = _locate_task(algo, theta0, batch.tasks, model, cfg) if _locate else None
        where = f" in task {idx}" if idx is not None else ""
        raise MetaDivergenceError(err.op, idx, f"{algo} meta-update diverged{where}: {err}") from err
    return float(loss.value), g.value


def _train_step(algo, theta0, tasks, model, cfg, optimizer=None):
    shape = np.shape(theta0)
    optimizer = optimizer or make_optimizer(cfg.optimizer, cfg.meta_lr)
    loss, g = meta_gradient(algo, theta0, tasks, model, cfg)
    new = optimizer.step(_as_particles(theta0), g)
    return new.reshape(shape), loss


def maml_train_step(theta0, tasks, model: Model, cfg: MetaConfig, optimizer=None):
    """One MAML meta-update; returns ``(theta0', meta_loss)``."""
    return _train_step("maml", theta0, tasks, model, cfg, optimizer)


def emaml_train_step(theta0, tasks, model: Model, cfg: MetaConfig, optimizer=None):
    return _train_step("emaml", theta0, tasks, model, cfg, optimizer)


def bfa_train_step(theta0, tasks, model: Model, cfg: MetaConfig, optimizer=None):
    return _train_step("bfa", theta0, tasks, model, cfg, optimizer)


def bmaml_train_step(theta0, tasks, model: Model, cfg: MetaConfig, optimizer=None):
    return _train_step("bmaml", theta0, tasks, model, cfg, optimizer)


@dataclass
class MetaTrainer:
    """Initial particles plus optimizer state for repeated meta-updates."""

    algo: str
    model: Model
    cfg: MetaConfig
    theta: np.ndarray
    optimizer: object = None

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        self.theta = _as_particles(self.theta)
        if self.optimizer is None:
            self.optimizer = make_optimizer(self.cfg.optimizer, self.cfg.meta_lr)

    def step(self, tasks: Sequence[Task]) -> float:
        self.theta, loss = _train_step(self.algo, self.theta, tasks, self.model, self.cfg, self.optimizer)
        return loss


# ---------------------------------------------------------------- meta-test


def adapt_tasks(algo: str, theta0, tasks: Sequence[Task], model: Model, n_eval: int, step: float,
                kernel: KernelConfig = KernelConfig()) -> np.ndarray:
    """Adapted particles ``(T, M, dim)`` for each task, value-only."""
    theta0 = _as_particles(theta0)
    trn = Dataset.stack([t.trn for t in tasks]).expand()
    with dg.no_grad():
        return adapt(algo, tile(theta0, len(tasks)), trn, model, n_eval, step, kernel)


def evaluate_adapted(model: Model, adapted: np.ndarray, tasks: Sequence[Task]) -> np.ndarray:
    """Per-task test metric: MSE of the predictive mean, or argmax accuracy."""
    tst = Dataset.stack([t.tst for t in tasks])
    pred = predictive(model.spec, adapted, tst.inputs)
    if model.kind == "classification":
        return (pred.argmax(axis=-1) == tst.targets).mean(axis=-1)
    return ((pred.mean - tst.targets[..., 0]) ** 2).mean(axis=-1)


def meta_test(algo: str, theta0, tasks: Sequence[Task] | Task, model: Model, n_eval: int, step: float,
              kernel: KernelConfig = KernelConfig()) -> np.ndarray:
    """Adapt from ``theta0`` on each task's trn set and score on its tst set."""
    if isinstance(tasks, Task):
        tasks = [tasks]
    adapted = adapt_tasks(algo, theta0, tasks, model, n_eval, step, kernel)
    return evaluate_adapted(model, adapted, tasks)
