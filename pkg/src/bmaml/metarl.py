"""Meta-RL on 2D navigation: SVPG-Chaser versus VPG-Reptile.

Policies are Gaussian MLPs (``models.policy_spec``). Particle stacks follow
the supervised convention: ``theta0`` is ``(M, dim)`` and a meta-batch is
adapted as ``(T, M, dim)``. Policy gradients are REINFORCE estimates taken
from a frozen batch of episodes; differentiating that surrogate a second
time gives the chaser's path back to ``theta0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import diffgraph as dg
from .diffgraph import NumericOverflowError, Var
from .meta import MetaDivergenceError, chaser_loss, tile
from .models import MlpSpec, mlp_forward
from .optim import make_optimizer
from .svgd import KernelConfig, score_fn, svpg_step
from .tasks import HORIZON, EpisodeBatch, NavTask, Trajectory, rollout_batch

RL_ALGORITHMS = ("svpg-chaser", "vpg-reptile")
BASELINES = ("time", "none")


@dataclass
class RlMetaConfig:
    K: int = 10  # episodes per inner update, Appendix C.4
    meta_batch: int = 20  # tasks per meta-update, Appendix C.4
    inner_lr: float = 0.1  # Appendix C.3
    leader_lr: float = 0.1  # not stated; reuses the inner rate
    meta_lr: float = 0.01  # Appendix C.3
    eta: float = 0.1  # 2D navigation with SVPG-Chaser, Appendix C.3
    inner_steps: int = 1  # Appendix C.3
    num_particles: int = 5  # M, Appendix C.4
    meta_iterations: int = 100  # Appendix C.4
    horizon: int = HORIZON  # Appendix C.4
    init_log_std: float = 0.0  # unit policy std at initialization
    baseline: str = "time"
    normalize: bool = True  # standardized advantages, per-step average
    optimizer: str = "sgd"
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig(**self.kernel)
        checks = {
            "K": self.K >= 1,
            "meta_batch": self.meta_batch >= 1,
            "inner_lr": self.inner_lr > 0,
            "leader_lr": self.leader_lr >= 0,
            "meta_lr": self.meta_lr > 0,
            "eta": self.eta > 0,
            "inner_steps": self.inner_steps >= 1,
            "num_particles": self.num_particles >= 1,
            "meta_iterations": self.meta_iterations >= 1,
            "horizon": self.horizon >= 1,
            "baseline": self.baseline in BASELINES,
            "optimizer": self.optimizer in ("adam", "sgd"),
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid RlMetaConfig field(s): {', '.join(bad)}")


# ---------------------------------------------------------------- REINFORCE


def gaussian_log_prob(spec: MlpSpec, params, states, actions) -> Var:
    """log pi(a | s) of the diagonal Gaussian policy; states ``(*B, N, 2)`` give ``(*B, N)``."""
    params = dg.as_var(params)
    mean = mlp_forward(spec, params, states)
    log_std = params[..., spec.layout.log_std]
    log_std = log_std.reshape(log_std.shape[:-1] + (1, spec.n_out))
    z = (actions - mean) * dg.exp(-log_std)
    return (-0.5 * (z * z) - log_std).sum(axis=-1) - 0.5 * spec.n_out * math.log(2.0 * math.pi)


def reward_to_go(rewards: np.ndarray, mask: np.ndarray) -> np.ndarray:
    r = rewards * mask
    return np.flip(np.cumsum(np.flip(r, axis=-1), axis=-1), axis=-1) * mask


def advantages(batch: EpisodeBatch, baseline: str = "time") -> np.ndarray:
    """Reward-to-go minus the mean reward-to-go at the same step over the batch's episodes."""
    if baseline not in BASELINES:
        raise ValueError(f"unknown baseline {baseline!r}")
    G = reward_to_go(batch.rewards, batch.mask)
    if baseline == "none":
        return G
    count = batch.mask.sum(axis=-2, keepdims=True)
    b = G.sum(axis=-2, keepdims=True) / np.maximum(count, 1.0)
    return (G - b) * batch.mask


def as_batch(trajectories: Sequence[Trajectory] | EpisodeBatch, horizon: int | None = None) -> EpisodeBatch:
    """Pad a list of trajectories into a single-policy ``EpisodeBatch``."""
    if isinstance(trajectories, EpisodeBatch):
        return trajectories
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("need at least one trajectory")
    H = horizon or max(len(t) for t in trajectories)
    K = len(trajectories)
    out = EpisodeBatch(*(np.zeros((K, H, 2)) for _ in range(3)), np.zeros((K, H)), np.zeros((K, H)))
    for k, t in enumerate(trajectories):
        n = len(t)
        out.states[k, :n], out.actions[k, :n], out.raw_actions[k, :n] = t.states, t.actions, t.raw_actions
        out.rewards[k, :n] = t.rewards
        out.mask[k, :n] = 1.0
    return out


def surrogate(spec: MlpSpec, params, batch: EpisodeBatch, baseline: str = "time", normalize: bool = False) -> Var:
    """Mean over episodes of sum_t log pi(a_t | s_t) * A_t with the episodes held fixed.

    ``params`` is ``(*B, dim)`` and ``batch`` arrays ``(*B, K, H, ...)``; the
    result has shape ``*B``. Its gradient is the REINFORCE estimate. With
    ``normalize`` the advantages are standardized over each policy's batch
    and the sum runs over all steps divided by their count instead.
    """
    adv = advantages(batch, baseline)
    *lead, K, H, _ = batch.states.shape
    lead = tuple(lead)
    mask = batch.mask.reshape(lead + (K * H,))
    adv = adv.reshape(lead + (K * H,))
    scale = np.full(lead, 1.0 / K)
    if normalize:
        n = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
        mu = adv.sum(axis=-1, keepdims=True) / n
        sd = np.sqrt((((adv - mu) * mask) ** 2).sum(axis=-1, keepdims=True) / n)
        adv = (adv - mu) / (sd + 1e-8) * mask
        scale = 1.0 / n[..., 0]
    states = batch.states.reshape(lead + (K * H, 2))
    raws = batch.raw_actions.reshape(lead + (K * H, 2))
    logp = gaussian_log_prob(spec, params, states, raws)
    return (logp * adv).sum(axis=-1) * scale


def reinforce_gradient(trajectories, spec: MlpSpec, params, baseline: str = "time", normalize: bool = False):
    """grad J estimate at ``params`` from on-policy episodes (a Var if ``params`` is live)."""
    batch = as_batch(trajectories)
    if batch.mask.sum() == 0:
        raise ValueError("empty trajectory set")
    g = score_fn(params, lambda p: surrogate(spec, p, batch, baseline, normalize))
    return g if isinstance(params, Var) and dg.is_recording() and params.needs_grad else g.value


# ------------------------------------------------------------- inner loops


@dataclass
class SampleRecord:
    """Which parameters generated a batch of episodes (for on-policy checks)."""

    phase: str
    params: np.ndarray


def _values(theta) -> np.ndarray:
    return theta.value if isinstance(theta, Var) else np.asarray(theta)


def _sample(spec, theta, goals, cfg, rng, phase, log) -> EpisodeBatch:
    values = _values(theta)
    if log is not None:
        log.append(SampleRecord(phase, values.copy()))
    return rollout_batch(spec, values, goals[..., None, :], cfg.K, rng, cfg.horizon)


def _pg_step(algo: str, theta, batch: EpisodeBatch, spec, cfg: RlMetaConfig, step: float):
    g = reinforce_gradient(batch, spec, theta, cfg.baseline, cfg.normalize)
    if algo == "svpg-chaser":
        return svpg_step(theta, g, cfg.eta, step, cfg.kernel)
    out = dg.as_var(theta) + dg.as_var(g) * step
    return out if isinstance(theta, Var) else out.value


def inner_update(algo: str, theta, goals, spec, cfg: RlMetaConfig, rng, step=None, phase="trn", log=None):
    """``inner_steps`` policy-gradient updates, each on freshly sampled episodes.

    SVPG couples the particles; VPG updates each independently. ``goals`` is
    ``(T, 2)`` and ``theta`` ``(T, M, dim)``. Returns the adapted particles
    and the returns of the first batch (pre-update).
    """
    step = cfg.inner_lr if step is None else step
    first = None
    for _ in range(cfg.inner_steps):
        batch = _sample(spec, theta, goals, cfg, rng, phase, log)
        if first is None:
            first = batch.returns.mean(axis=-1)
        theta = _pg_step(algo, theta, batch, spec, cfg, step)
    return theta, first


# -------------------------------------------------------------- meta steps


class RlStepResult(NamedTuple):
    theta: np.ndarray
    meta_loss: float
    pre_returns: np.ndarray  # (T, M) mean episode return with theta0
    post_returns: np.ndarray  # (T, M) with the chaser (svpg-chaser only; else NaN)


def _goals(tasks: Sequence[NavTask]) -> np.ndarray:
    return np.array([t.goal for t in tasks], dtype=np.float64)


def _as_particles(theta0) -> np.ndarray:
    theta0 = np.asarray(theta0, dtype=np.float64)
    return theta0[None, :] if theta0.ndim == 1 else theta0


def svpg_chaser_gradient(theta0, tasks, spec, cfg: RlMetaConfig, rng, log=None):
    """Chaser loss and its gradient, one task at a time to bound graph memory."""
    theta0 = _as_particles(theta0)
    goals = _goals(tasks)
    total, grad = 0.0, np.zeros_like(theta0)
    pre, post = [], []
    for i in range(len(tasks)):
        leaf = dg.variable(theta0)
        try:
            with dg.enable_grad():
                chaser, r0 = inner_update("svpg-chaser", tile(leaf, 1), goals[i : i + 1], spec, cfg, rng, log=log)
                with dg.no_grad():
                    val = _sample(spec, chaser, goals[i : i + 1], cfg, rng, "val", log)
                    leader = _pg_step("svpg-chaser", _values(chaser), val, spec, cfg, cfg.leader_lr)
                loss = chaser_loss(chaser, leader)
            (g,) = dg.gradients(loss, [leaf])
        except NumericOverflowError as err:
            raise MetaDivergenceError(err.op, i, f"svpg-chaser meta-update diverged in task {i}: {err}") from err
        total += float(loss.value)
        grad += g.value
        pre.append(r0[0])
        post.append(val.returns.mean(axis=-1)[0])
    return total, grad, np.array(pre), np.array(post)


def vpg_reptile_gradient(theta0, tasks, spec, cfg: RlMetaConfig, rng, log=None):
    """sum_tasks ||theta0 - stopgrad(chaser)||^2 and its gradient 2 sum (theta0 - chaser)."""
    theta0 = _as_particles(theta0)
    goals = _goals(tasks)
    with dg.no_grad():
        chaser, pre = inner_update("vpg-reptile", tile(theta0, len(tasks)), goals, spec, cfg, rng, log=log)
    leaf = dg.variable(theta0)
    with dg.enable_grad():
        d = tile(leaf, len(tasks)) - dg.stop_gradient(chaser)
        loss = (d * d).sum()
    (g,) = dg.gradients(loss, [leaf])
    return float(loss.value), g.value, pre, np.full_like(pre, np.nan)


def _meta_step(algo, theta0, tasks, spec, cfg, rng, optimizer=None, log=None) -> RlStepResult:
    fn = svpg_chaser_gradient if algo == "svpg-chaser" else vpg_reptile_gradient
    loss, g, pre, post = fn(theta0, tasks, spec, cfg, rng, log)
    optimizer = optimizer or make_optimizer(cfg.optimizer, cfg.meta_lr)
    shape = np.shape(theta0)
    new = optimizer.step(_as_particles(theta0), g).reshape(shape)
    return RlStepResult(new, loss, pre, post)


def svpg_chaser_meta_step(theta0, tasks, spec, cfg: RlMetaConfig, rng, optimizer=None, log=None) -> RlStepResult:
    """Chaser = one SVPG step on D_trn from theta0; leader = one SVPG step on D_val
    (sampled with the chaser) from the chaser; first-order step on the chaser loss."""
    return _meta_step("svpg-chaser", theta0, tasks, spec, cfg, rng, optimizer, log)


def vpg_reptile_meta_step(theta0, tasks, spec, cfg: RlMetaConfig, rng, optimizer=None, log=None) -> RlStepResult:
    """Independent VPG chaser per particle; theta0 moves toward the adapted parameters."""
    return _meta_step("vpg-reptile", theta0, tasks, spec, cfg, rng, optimizer, log)


RL_META_STEPS = {"svpg-chaser": svpg_chaser_meta_step, "vpg-reptile": vpg_reptile_meta_step}


@dataclass
class RlMetaTrainer:
    algo: str
    spec: MlpSpec
    cfg: RlMetaConfig
    theta: np.ndarray
    optimizer: object = None

    def __post_init__(self):
        if self.algo not in RL_ALGORITHMS:
            raise ValueError(f"unknown RL algorithm {self.algo!r}")
        self.theta = _as_particles(self.theta)
        if self.optimizer is None:
            self.optimizer = make_optimizer(self.cfg.optimizer, self.cfg.meta_lr)

    def step(self, tasks: Sequence[NavTask], rng: np.random.Generator, log=None) -> RlStepResult:
        res = RL_META_STEPS[self.algo](self.theta, tasks, self.spec, self.cfg, rng, self.optimizer, log)
        self.theta = res.theta
        return res


# ---------------------------------------------------------------- meta-test


class RlEvalResult(NamedTuple):
    per_particle: np.ndarray  # (T, M) mean adapted return per task and particle

    @property
    def max_over_particles(self) -> float:
        """Mean over tasks of the best particle's return."""
        return float(self.per_particle.max(axis=-1).mean())

    @property
    def mean_over_particles(self) -> float:
        return float(self.per_particle.mean())


def meta_test_rl(algo: str, theta0, tasks: Sequence[NavTask] | NavTask, spec: MlpSpec, cfg: RlMetaConfig,
                 rng: np.random.Generator) -> RlEvalResult:
    """One inner update on fresh episodes, then the adapted policies' returns."""
    if isinstance(tasks, NavTask):
        tasks = [tasks]
    goals = _goals(tasks)
    theta0 = _as_particles(theta0)
    with dg.no_grad():
        adapted, _ = inner_update(algo, tile(theta0, len(tasks)), goals, spec, cfg, rng)
        batch = _sample(spec, adapted, goals, cfg, rng, "test", None)
    return RlEvalResult(batch.returns.mean(axis=-1))
