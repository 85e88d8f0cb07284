"""SGD and Adam updates over :class:`~seizure_lstm.nncore.ModelParams`."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be positive and finite")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class OptimizerState:
    m: object  # ModelParams of first moments
    v: object  # ModelParams of second moments
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(params.zeros_like(), params.zeros_like(), 0)


def _check_shapes(a, b, what):
    for name, x in a.arrays().items():
        y = b.arrays()[name]
        if x.shape != y.shape:
            raise ShapeError(f"{what}: {name} has shape {y.shape}, expected {x.shape}")


def sgd_step(params, grads, learning_rate):
    """``theta - lr * g`` for every array; returns new params."""
    _check_shapes(params, grads, "gradient")
    return params.map(lambda p, g: p - learning_rate * g, grads)


def adam_step(params, grads, config, state):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    _check_shapes(params, grads, "gradient")
    _check_shapes(params, state.m, "first moment")
    _check_shapes(params, state.v, "second moment")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    m = state.m.map(lambda m_, g: b1 * m_ + (1.0 - b1) * g, grads)
    v = state.v.map(lambda v_, g: b2 * v_ + (1.0 - b2) * (g * g), grads)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    lr, eps = config.learning_rate, config.epsilon
    new = params.map(lambda p, m_, v_: p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps), m, v)
    return new, OptimizerState(m, v, t)


class Optimizer:
    """Small stateful wrapper used by the training loop."""

    def __init__(self, name="adam", learning_rate=1e-3, adam=None):
        self.name = name
        if name == "adam":
            self.config = adam or AdamConfig(learning_rate=learning_rate)
        elif name == "sgd":
            if not (learning_rate > 0 and math.isfinite(learning_rate)):
                raise ConfigError("learning_rate must be positive and finite")
            self.config = None
        else:
            raise ConfigError(f"unknown optimizer {name!r}; expected adam or sgd")
        self.learning_rate = self.config.learning_rate if self.config else learning_rate
        self.state = None

    def step(self, params, grads):
        if self.name == "sgd":
            return sgd_step(params, grads, self.learning_rate)
        if self.state is None:
            self.state = OptimizerState.zeros_like(params)
        params, self.state = adam_step(params, grads, self.config, self.state)
        return params

