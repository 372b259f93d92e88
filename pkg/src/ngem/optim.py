"""SGD and Adam on flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ngem.errors import ConfigError, ShapeError

SGD = "sgd"
ADAM = "adam"


@dataclass
class OptimizerState:
    kind: str
    lr: float
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8


def _check(params, grad):
    if params.shape != grad.shape:
        raise ShapeError(f"parameter length {params.shape} != gradient length {grad.shape}")


def sgd_step(params, grad, state: OptimizerState):
    _check(params, grad)
    return params - state.lr * grad


def adam_step(params, grad, state: OptimizerState):
    """Bias-corrected Adam. Moments in ``state`` are updated in place."""
    _check(params, grad)
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ShapeError("moment vectors do not match parameter length")
    state.t += 1
    m, v = state.m, state.v
    tmp = np.multiply(grad, 1.0 - state.b1)
    m *= state.b1
    m += tmp
    np.square(grad, out=tmp)
    tmp *= 1.0 - state.b2
    v *= state.b2
    v += tmp
    # sqrt(v_hat) + eps, then the bias-corrected first moment over it
    np.sqrt(v, out=tmp)
    tmp *= 1.0 / np.sqrt(1.0 - state.b2 ** state.t)
    tmp += state.eps
    np.divide(m, tmp, out=tmp)
    tmp *= state.lr / (1.0 - state.b1 ** state.t)
    return params - tmp, state


class Optimizer:
    """Holds an ``OptimizerState`` and applies the matching update rule."""

    def __init__(self, kind: str, lr: float):
        if kind not in (SGD, ADAM):
            raise ConfigError(f"unknown optimizer {kind!r}")
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.state = OptimizerState(kind, float(lr))

    def step(self, params, grad):
        if self.state.kind == SGD:
            self.state.t += 1
            return sgd_step(params, grad, self.state)
        return adam_step(params, grad, self.state)[0]
