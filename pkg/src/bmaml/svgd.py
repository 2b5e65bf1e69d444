"""Stein variational gradient descent and its policy-gradient variant.

A particle set is an array (or Var) of shape ``(..., M, dim)``; leading axes
are independent batches (one per task). Row ``m`` keeps its identity across
steps. Log densities are callables mapping such a stack to per-particle
values of shape ``(..., M)``.

Passing a Var that requires gradients keeps every step differentiable with
respect to it; passing a plain array runs the update in value-only mode.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from . import diffgraph as dg
from .diffgraph import NumericOverflowError, Var

LogDensity = Callable[[Var], Var]


@dataclass(frozen=True)
class KernelConfig:
    """RBF bandwidth choice: ``"median"`` heuristic per step or a ``"fixed"`` h."""

    mode: str = "median"
    h: float | None = None

    def __post_init__(self):
        if self.mode not in ("median", "fixed"):
            raise ValueError(f"unknown bandwidth mode {self.mode!r}")
        if self.mode == "fixed" and not (self.h is not None and self.h > 0):
            raise ValueError("fixed bandwidth needs h > 0")

    @classmethod
    def fixed(cls, h: float) -> "KernelConfig":
        return cls("fixed", float(h))


def rbf_kernel(a, b, h: float) -> Var:
    """exp(-||a - b||^2 / h) over the last axis."""
    d = dg.as_var(a) - dg.as_var(b)
    return dg.exp(-(d * d).sum(axis=-1) / h)


def median_bandwidth(particles) -> float:
    """h = med^2 / log M with med the median pairwise distance; 1 if med is 0."""
    x = np.asarray(particles.value if isinstance(particles, Var) else particles, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        raise ValueError("median bandwidth needs at least two particles")
    med = float(np.median(pdist(x)))
    if med == 0.0:
        return 1.0
    return med**2 / math.log(m)


def bandwidth(particles: np.ndarray, kernel: KernelConfig) -> np.ndarray:
    """Per-batch bandwidth of shape ``(..., 1, 1)`` computed from values only."""
    batch = particles.shape[:-2]
    if kernel.mode == "fixed":
        return np.full(batch + (1, 1), kernel.h)
    if particles.shape[-2] == 1:
        # k(x, x) = 1 and the repulsion vanishes whatever h is
        return np.ones(batch + (1, 1))
    flat = particles.reshape((-1,) + particles.shape[-2:])
    hs = np.array([median_bandwidth(p) for p in flat])
    return hs.reshape(batch + (1, 1))


def stein_direction(theta, score, h) -> Var:
    """phi(theta_i) = 1/M sum_j [k(theta_j, theta_i) score_j + grad_{theta_j} k(theta_j, theta_i)]."""
    theta = dg.as_var(theta)
    score = dg.as_var(score)
    *batch, m, d = theta.shape
    batch = tuple(batch)
    diff = theta.reshape(batch + (m, 1, d)) - theta.reshape(batch + (1, m, d))
    k = dg.exp(-(diff * diff).sum(axis=-1) / h)
    drive = k @ score
    repulse = (theta * k.sum(axis=-1, keepdims=True) - k @ theta) * (2.0 / h)
    return (drive + repulse) * (1.0 / m)


def _is_live(theta) -> bool:
    return isinstance(theta, Var) and theta.needs_grad and dg.is_recording()


def score_fn(theta, log_p: LogDensity) -> Var:
    """Per-particle gradient of ``log_p``; differentiable when ``theta`` is live."""
    if _is_live(theta):
        (g,) = dg.gradients(log_p(theta).sum(), [theta], create_graph=True)
        return g
    leaf = dg.variable(theta)
    with dg.enable_grad():
        total = log_p(leaf).sum()
    (g,) = dg.gradients(total, [leaf])
    return g


def _bad_particle(theta: np.ndarray, log_p: LogDensity) -> int | None:
    for i in range(theta.shape[-2]):
        piece = theta[..., i : i + 1, :]
        if not np.isfinite(piece).all():
            return i
        try:
            score_fn(piece, log_p)
        except NumericOverflowError:
            return i
    return None


def _apply(theta, direction: Var, step: float):
    finite = np.isfinite(direction.value)
    if not finite.all():
        per_particle = finite.reshape((-1,) + direction.shape[-2:]).all(axis=(0, 2))
        bad = int(np.argmin(per_particle))
        raise NumericOverflowError("svgd_step", f"non-finite SVGD direction for particle {bad}")
    out = dg.as_var(theta) + direction * step
    return out if isinstance(theta, Var) else out.value


def svgd_step(theta, log_p: LogDensity, step: float, kernel: KernelConfig = KernelConfig()):
    """One synchronous SVGD update of every particle from the same snapshot.

    A zero step size returns ``theta`` untouched.
    """
    if step < 0:
        raise ValueError("SVGD step size must be non-negative")
    if step == 0:
        return theta
    values = theta.value if isinstance(theta, Var) else np.asarray(theta, dtype=np.float64)
    h = bandwidth(values, kernel)
    try:
        score = score_fn(theta, log_p)
        direction = stein_direction(theta if _is_live(theta) else values, score, h)
    except NumericOverflowError as err:
        bad = _bad_particle(values, log_p)
        where = f" at particle {bad}" if bad is not None else ""
        raise NumericOverflowError(err.op, f"SVGD step diverged{where}: {err}") from err
    return _apply(theta, direction, step)


def svgd_n(theta0, log_p: LogDensity, n: int, step: float, kernel: KernelConfig = KernelConfig()):
    """``n`` composed SVGD steps; ``n = 0`` returns the input unchanged."""
    if n < 0:
        raise ValueError("number of SVGD steps must be >= 0")
    theta = theta0
    for _ in range(n):
        theta = svgd_step(theta, log_p, step, kernel)
    return theta


def svpg_step(theta, policy_grads, eta: float, step: float, kernel: KernelConfig = KernelConfig()):
    """SVGD with the score replaced by ``policy_grads / eta``.

    ``policy_grads`` holds one estimate of grad J per particle, same shape as
    ``theta``; the kernel repulsion supplies the entropy term.
    """
    if eta <= 0 or step < 0:
        raise ValueError("eta must be positive and the step size non-negative")
    values = theta.value if isinstance(theta, Var) else np.asarray(theta, dtype=np.float64)
    policy_grads = dg.as_var(policy_grads)
    if policy_grads.shape != values.shape:
        raise ValueError(f"need one gradient per particle: {policy_grads.shape} vs {values.shape}")
    if step == 0:
        return theta
    h = bandwidth(values, kernel)
    direction = stein_direction(theta if _is_live(theta) else values, policy_grads * (1.0 / eta), h)
    return _apply(theta, direction, step)
