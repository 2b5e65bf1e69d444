"""Suite construction, the training loop, evaluation and active-learning runs.

Every random draw comes from ``rng.stream(seed, tag, *indices)`` so a run is
a pure function of its configuration.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .active import active_learning_loop
from .config import ExperimentConfig
from .diffgraph import NumericOverflowError
from .meta import SVGD_ALGORITHMS, MetaTrainer, meta_test
from .metarl import RlMetaTrainer, meta_test_rl
from .models import MlpSpec, Model, init_particles, policy_spec, regression_spec
from .rng import stream
from .tasks import sample_nav_task, sample_sinusoid_task, sample_synthetic_classification_task

CSV_COLUMNS = ("iter", "meta_loss", "eval_mse_or_acc_or_return", "wall_ms")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        super().__init__(f"numeric divergence at iteration {iteration}: {cause}")


# ------------------------------------------------------------------ suites


def build_spec(cfg: ExperimentConfig) -> MlpSpec:
    if cfg.suite == "sinusoid":
        return regression_spec()
    if cfg.suite == "nav2d":
        return policy_spec()
    c = cfg.classification
    return MlpSpec((c.input_dim, *c.hidden, c.ways), "relu", "softmax")


def build_model(cfg: ExperimentConfig) -> Model:
    spec = build_spec(cfg)
    if spec.output_head == "softmax":
        return Model(spec, cfg.classification.hyperprior())
    return Model(spec)


def num_particles(cfg: ExperimentConfig) -> int:
    return cfg.rl.num_particles if cfg.is_rl else cfg.meta.num_particles


def initial_particles(cfg: ExperimentConfig) -> np.ndarray:
    spec = build_spec(cfg)
    rngs = [stream(cfg.seed, "init", m) for m in range(num_particles(cfg))]
    if cfg.is_rl:
        return np.stack([spec.layout.init(r, log_std=cfg.rl.init_log_std) for r in rngs])
    return init_particles(spec, rngs)


def make_task(cfg: ExperimentConfig, rng: np.random.Generator):
    if cfg.suite == "sinusoid":
        return sample_sinusoid_task(rng, cfg.K, cfg.n_test)
    if cfg.suite == "nav2d":
        return sample_nav_task(rng)
    c = cfg.classification
    return sample_synthetic_classification_task(
        rng, c.ways, cfg.K, c.pool_size, c.input_dim, c.mean_scale, c.cluster_var, c.n_test_per_class
    )


def training_tasks(cfg: ExperimentConfig) -> list:
    return [make_task(cfg, stream(cfg.seed, "train-task", i)) for i in range(cfg.task_count)]


def eval_tasks(cfg: ExperimentConfig, n: int | None = None, seed: int | None = None) -> list:
    seed = cfg.seed if seed is None else seed
    return [make_task(cfg, stream(seed, "eval-task", i)) for i in range(n or cfg.eval_tasks)]


def adapt_algo(algo: str) -> str:
    """Inner update used at meta-test: SVGD for the Bayesian learners, GD otherwise."""
    return "bmaml" if algo in SVGD_ALGORITHMS else "maml"


def higher_is_better(cfg: ExperimentConfig) -> bool:
    return cfg.suite != "sinusoid"


def evaluate(cfg: ExperimentConfig, theta: np.ndarray, tasks: list, rng_tag=("eval",)) -> np.ndarray:
    """Per-task metric: test MSE, test accuracy, or best-particle adapted return."""
    if cfg.is_rl:
        res = meta_test_rl(cfg.algo, theta, tasks, build_spec(cfg), cfg.rl, stream(cfg.seed, *rng_tag))
        return res.per_particle.max(axis=-1)
    m = cfg.meta
    return meta_test(adapt_algo(cfg.algo), theta, tasks, build_model(cfg), m.n_eval, m.inner_lr, m.kernel)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    theta: np.ndarray
    best_theta: np.ndarray
    rows: list[tuple]
    out_dir: Path | None


def _fmt(x: float) -> str:
    return repr(float(x))


class _Batches:
    """Meta-batches drawn by walking a fresh permutation of the task set each epoch."""

    def __init__(self, cfg: ExperimentConfig, tasks: list):
        self.cfg, self.tasks = cfg, tasks
        self.epoch, self.queue = 0, []

    def next(self) -> list:
        size = self.cfg.meta.meta_batch
        if len(self.queue) < size:
            perm = stream(self.cfg.seed, "order", self.epoch).permutation(len(self.tasks))
            self.epoch += 1
            # a short tail is completed from the next epoch's order
            self.queue.extend(int(i) for i in perm)
        batch, self.queue = self.queue[:size], self.queue[size:]
        return [self.tasks[i] for i in batch]


def train(cfg: ExperimentConfig, out_dir: str | Path | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Meta-train as configured, writing metrics and checkpoints into ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
    theta = initial_particles(cfg)
    total = cfg.total_iterations
    evals = eval_tasks(cfg)
    if cfg.is_rl:
        trainer = RlMetaTrainer(cfg.algo, build_spec(cfg), cfg.rl, theta)
    else:
        trainer = MetaTrainer(cfg.algo, build_model(cfg), cfg.meta, theta)
        batches = _Batches(cfg, training_tasks(cfg))
    sign = 1.0 if higher_is_better(cfg) else -1.0
    best, best_theta, rows = -np.inf, trainer.theta.copy(), []
    start = time.perf_counter()
    writer = fh = None
    if out is not None:
        fh = open(out / "metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
    try:
        for it in range(1, total + 1):
            try:
                if cfg.is_rl:
                    tasks = [make_task(cfg, stream(cfg.seed, "task", it, i)) for i in range(cfg.rl.meta_batch)]
                    loss = trainer.step(tasks, stream(cfg.seed, "rollout", it)).meta_loss
                else:
                    loss = trainer.step(batches.next())
                if not np.isfinite(loss) or not np.isfinite(trainer.theta).all():
                    raise NumericOverflowError("meta-update", "non-finite meta-loss or parameters")
                if it == 1 or it % cfg.eval_interval == 0 or it == total:
                    metric = float(np.mean(evaluate(cfg, trainer.theta, evals, ("eval", it))))
                    if not np.isfinite(metric):
                        raise NumericOverflowError("evaluation", "non-finite evaluation metric")
                    wall = int((time.perf_counter() - start) * 1000) if cfg.wall_clock else 0
                    row = (it, loss, metric, wall)
                    rows.append(row)
                    if writer is not None:
                        writer.writerow([it, _fmt(loss), _fmt(metric), wall])
                        fh.flush()
                    if sign * metric > best:
                        best, best_theta = sign * metric, trainer.theta.copy()
                        if out is not None:
                            checkpoint.save(out / "best.ckpt", best_theta)
                    if log:
                        log(f"iter {it}/{total} meta_loss {loss:.6g} eval {metric:.6g}")
            except NumericOverflowError as err:
                raise TrainingDiverged(it, err) from err
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        checkpoint.save(out / "final.ckpt", trainer.theta)
    return TrainResult(trainer.theta, best_theta, rows, out)


# -------------------------------------------------------------- evaluation


def eval_summary(cfg: ExperimentConfig, theta: np.ndarray, n_tasks: int, seed: int) -> dict:
    """Mean and (population) std of the per-task metric over fresh tasks."""
    tasks = eval_tasks(cfg, n_tasks, seed)
    values = evaluate(cfg, theta, tasks, ("cli-eval",))
    metric = {"sinusoid": "mse", "nav2d": "return"}.get(cfg.suite, "accuracy")
    return {
        "algo": cfg.algo,
        "suite": cfg.suite,
        "metric": metric,
        "eval_tasks": n_tasks,
        "seed": seed,
        "mean": float(np.mean(values)),
        "std": float(np.std(values)),
        "per_task": [float(v) for v in values],
    }


# ---------------------------------------------------------- active learning


def active_histories(cfg: ExperimentConfig, theta: np.ndarray, n_tasks: int | None = None) -> dict:
    """Accuracy after each acquisition (entry 0 is before any) for both strategies."""
    model = build_model(cfg)
    m = cfg.meta
    algo = adapt_algo(cfg.algo)
    tasks = eval_tasks(cfg, n_tasks)
    out = {"entropy": [], "random": []}
    for i, task in enumerate(tasks):
        for strategy in out:
            run = active_learning_loop(theta, task, model, m.n_eval, m.inner_lr, m.kernel, strategy,
                                       rng=stream(cfg.seed, "acquire", i), algo=algo)
            out[strategy].append([run.initial_accuracy, *run.history])
    return {k: np.asarray(v) for k, v in out.items()}


def write_active_csv(path: str | Path, histories: dict) -> None:
    ent = histories["entropy"].mean(axis=0)
    rnd = histories["random"].mean(axis=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["acquisitions", "acc_entropy_mean", "acc_random_mean"])
        for a, (e, r) in enumerate(zip(ent, rnd)):
            w.writerow([a, _fmt(e), _fmt(r)])


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
