"""MLP models, parameter layout and the task-train log-posteriors SVGD targets.

Particles are flat float64 vectors. Stacks of particles are arrays of shape
``(..., M, dim)``; every function here broadcasts over the leading axes, so a
whole meta-batch of tasks times particles is evaluated in one pass.

Parameter layout for an ``MlpSpec`` with ``layer_sizes = [n0, n1, ..., nL]``::

    W1 (n0*n1, row-major, used as x @ W1) | b1 (n1) | ... | WL | bL
    | log_std (nL)          # gaussian-policy head only
    | log_gamma             # linear (regression) head only
    | log_lambda            # linear and softmax heads

``log_gamma`` is the log observation precision and ``log_lambda`` the log
precision of the zero-mean Gaussian prior shared by all weights and biases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln

from . import diffgraph as dg
from .diffgraph import Var

LOG_2PI = math.log(2.0 * math.pi)

ACTIVATIONS = {"tanh": dg.tanh, "relu": dg.relu}
HEADS = ("linear", "softmax", "gaussian-policy")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    output_head: str = "linear"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer_sizes must have >= 2 positive entries, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @cached_property
    def layout(self) -> "ParamLayout":
        return ParamLayout(self)


def regression_spec(hidden: Sequence[int] = (40, 40, 40)) -> MlpSpec:
    # three hidden layers of 40 units for sinusoid regression
    return MlpSpec((1, *hidden, 1), "tanh", "linear")


def policy_spec(hidden: Sequence[int] = (100, 100)) -> MlpSpec:
    # two hidden layers of 100 ReLU units for the navigation policy
    return MlpSpec((2, *hidden, 2), "relu", "gaussian-policy")


class ParamLayout:
    """Offsets of each named block inside a flat parameter vector."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.layers: list[tuple[slice, slice, int, int]] = []
        pos = 0
        for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos = w.stop
            b = slice(pos, pos + fan_out)
            pos = b.stop
            self.layers.append((w, b, fan_in, fan_out))
        self.n_weights = pos
        self.log_std: slice | None = None
        self.log_gamma: int | None = None
        self.log_lambda: int | None = None
        if spec.output_head == "gaussian-policy":
            self.log_std = slice(pos, pos + spec.n_out)
            pos = self.log_std.stop
        if spec.output_head == "linear":
            self.log_gamma = pos
            pos += 1
        if spec.output_head in ("linear", "softmax"):
            self.log_lambda = pos
            pos += 1
        self.dim = pos

    @property
    def weights(self) -> slice:
        return slice(0, self.n_weights)

    def init(self, rng: np.random.Generator, log_std: float = math.log(0.1)) -> np.ndarray:
        """One particle: weights ~ N(0, 1/fan_in), zero biases, unit precisions."""
        theta = np.zeros(self.dim)
        for w, _, fan_in, _ in self.layers:
            theta[w] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=w.stop - w.start)
        if self.log_std is not None:
            theta[self.log_std] = log_std
        return theta


def init_particles(spec: MlpSpec, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Stack of ``len(rngs)`` particles, each drawn from its own generator."""
    return np.stack([spec.layout.init(rng) for rng in rngs])


@dataclass
class Dataset:
    """Inputs ``(..., N, d_in)``; targets ``(..., N, d_out)`` or class indices ``(..., N)``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.inputs.shape[:-1] != self.targets.shape[: self.inputs.ndim - 1]:
            raise ValueError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} disagree on rows"
            )

    def __len__(self) -> int:
        return self.inputs.shape[-2]

    def concat(self, other: "Dataset") -> "Dataset":
        axis = self.inputs.ndim - 2
        return Dataset(
            np.concatenate([self.inputs, other.inputs], axis=axis),
            np.concatenate([self.targets, other.targets], axis=axis),
        )

    def append(self, x: np.ndarray, y) -> "Dataset":
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        y = np.asarray(y).reshape((1,) + self.targets.shape[1:])
        return Dataset(np.concatenate([self.inputs, x]), np.concatenate([self.targets, y]))

    @staticmethod
    def stack(datasets: Sequence["Dataset"]) -> "Dataset":
        return Dataset(
            np.stack([d.inputs for d in datasets]), np.stack([d.targets for d in datasets])
        )

    def expand(self) -> "Dataset":
        """Insert a singleton particle axis before the row axis."""
        t = self.targets
        t = t[..., None, :, :] if t.ndim == self.inputs.ndim else t[..., None, :]
        return Dataset(self.inputs[..., None, :, :], t)


@dataclass(frozen=True)
class HyperpriorConfig:
    """Gamma(shape, rate) hyperpriors on the observation and weight precisions."""

    gamma_shape: float = 2.0  # a, Appendix A.1
    gamma_rate: float = 0.2  # b, Appendix A.1
    lambda_shape: float = 2.0  # a', Appendix A.1
    lambda_rate: float = 2.0  # b', Appendix A.1

    def __post_init__(self):
        for name in ("gamma_shape", "gamma_rate", "lambda_shape", "lambda_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def classification(cls, shape: float = 2.0, rate: float = 0.2) -> "HyperpriorConfig":
        # Appendix A.2 uses a=2.0, b=0.2 (alternatively a=1.0, b=0.1) on lambda
        return cls(lambda_shape=shape, lambda_rate=rate)


# ------------------------------------------------------------------ forward


def mlp_forward(spec: MlpSpec, params, x) -> Var:
    """Network output before the head (regression values, logits, policy means).

    ``params`` has shape ``(*P, dim)`` and ``x`` shape ``(*X, N, n_in)`` with
    ``*X`` broadcastable against ``*P``; the result has shape
    ``(*broadcast, N, n_out)``. A single input vector ``(n_in,)`` gives
    ``(*P, n_out)``.
    """
    params = dg.as_var(params)
    x = dg.as_var(x)
    layout = spec.layout
    if params.shape[-1] != layout.dim:
        raise ValueError(f"parameter vector has length {params.shape[-1]}, expected {layout.dim}")
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {spec.n_in}")
    single = x.ndim == 1
    if single:
        x = x.reshape(1, spec.n_in)
    batch = params.shape[:-1]
    act = ACTIVATIONS[spec.activation]
    h = x
    for i, (w, b, fan_in, fan_out) in enumerate(layout.layers):
        W = params[..., w].reshape(batch + (fan_in, fan_out))
        bias = params[..., b].reshape(batch + (1, fan_out))
        h = h @ W + bias
        if i < len(layout.layers) - 1:
            h = act(h)
    if single:
        h = h.reshape(h.shape[:-2] + (spec.n_out,))
    return h


# ------------------------------------------------------------- densities


def log_likelihood_regression(spec: MlpSpec, params, data: Dataset) -> Var:
    """Gaussian log-likelihood with precision exp(log_gamma), per particle."""
    params = dg.as_var(params)
    pred = mlp_forward(spec, params, data.inputs)
    log_gamma = params[..., spec.layout.log_gamma]
    resid = data.targets - pred
    sq = (resid * resid).sum(axis=(-2, -1))
    n = data.targets.shape[-2] * data.targets.shape[-1]
    return 0.5 * n * (log_gamma - LOG_2PI) - 0.5 * dg.exp(log_gamma) * sq


def log_likelihood_classification(spec: MlpSpec, params, data: Dataset) -> Var:
    """Softmax categorical log-likelihood of integer class targets, per particle."""
    logits = mlp_forward(spec, params, data.inputs)
    onehot = np.eye(spec.n_out)[np.asarray(data.targets, dtype=np.int64)]
    return (dg.log_softmax(logits) * onehot).sum(axis=(-2, -1))


def log_prior_weights(spec: MlpSpec, params) -> Var:
    """Zero-mean Gaussian log-prior with precision exp(log_lambda) on every weight and bias."""
    params = dg.as_var(params)
    layout = spec.layout
    w = params[..., layout.weights]
    log_lambda = params[..., layout.log_lambda]
    n = layout.n_weights
    return 0.5 * n * (log_lambda - LOG_2PI) - 0.5 * dg.exp(log_lambda) * (w * w).sum(axis=-1)


def log_gamma_density_logspace(log_prec, shape: float, rate: float) -> Var:
    """log Gamma(p | shape, rate) + log p evaluated at p = exp(log_prec).

    The extra ``log p`` is the Jacobian of the log parameterisation, so the
    density is over the unconstrained coordinate.
    """
    log_prec = dg.as_var(log_prec)
    norm = shape * math.log(rate) - float(gammaln(shape))
    return norm + shape * log_prec - rate * dg.exp(log_prec)


def log_posterior_regression(spec: MlpSpec, params, data: Dataset, hp: HyperpriorConfig) -> Var:
    """Unnormalised task-train log-posterior over (weights, log_gamma, log_lambda)."""
    params = dg.as_var(params)
    layout = spec.layout
    return (
        log_likelihood_regression(spec, params, data)
        + log_prior_weights(spec, params)
        + log_gamma_density_logspace(params[..., layout.log_gamma], hp.gamma_shape, hp.gamma_rate)
        + log_gamma_density_logspace(params[..., layout.log_lambda], hp.lambda_shape, hp.lambda_rate)
    )


def log_posterior_classification(spec: MlpSpec, params, data: Dataset, hp: HyperpriorConfig) -> Var:
    params = dg.as_var(params)
    return (
        log_likelihood_classification(spec, params, data)
        + log_prior_weights(spec, params)
        + log_gamma_density_logspace(
            params[..., spec.layout.log_lambda], hp.lambda_shape, hp.lambda_rate
        )
    )


@dataclass(frozen=True)
class Model:
    """An MLP plus its likelihood family and hyperpriors."""

    spec: MlpSpec
    hyper: HyperpriorConfig = HyperpriorConfig()

    @property
    def kind(self) -> str:
        return "classification" if self.spec.output_head == "softmax" else "regression"

    def log_likelihood(self, params, data: Dataset) -> Var:
        if self.kind == "classification":
            return log_likelihood_classification(self.spec, params, data)
        return log_likelihood_regression(self.spec, params, data)

    def log_posterior(self, params, data: Dataset) -> Var:
        if self.kind == "classification":
            return log_posterior_classification(self.spec, params, data, self.hyper)
        return log_posterior_regression(self.spec, params, data, self.hyper)


# ------------------------------------------------------------- predictive


class RegressionPredictive(NamedTuple):
    mean: np.ndarray
    variance: np.ndarray
    component_means: np.ndarray


def predictive(spec: MlpSpec, particles, x):
    """Uniform mixture over particles of their predictive distributions.

    Regression returns the mixture mean and variance (each component has
    noise variance 1/gamma). Classification returns class probabilities
    averaged over particles. ``particles`` is ``(..., M, dim)`` and ``x`` is
    ``(..., N, n_in)`` broadcastable with the particle batch axes.
    """
    particles = np.asarray(particles.value if isinstance(particles, Var) else particles)
    if particles.shape[-2] < 1:
        raise ValueError("predictive needs at least one particle")
    x = np.asarray(x, dtype=np.float64)
    x = x[..., None, :, :]
    with dg.no_grad():
        out = mlp_forward(spec, particles, x).value
    if spec.output_head == "softmax":
        z = out - out.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return p.mean(axis=-3)
    if spec.output_head != "linear":
        raise ValueError("predictive is defined for regression and classification heads")
    means = out[..., 0]
    noise = np.exp(-particles[..., spec.layout.log_gamma])[..., None]
    mean = means.mean(axis=-2)
    var = (noise + means**2).mean(axis=-2) - mean**2
    return RegressionPredictive(mean, np.maximum(var, 0.0), means)
