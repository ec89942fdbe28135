"""Nesterov-Adam, plateau learning-rate decay and He-uniform initialization."""
import math
from dataclasses import dataclass, field

import numpy as np

from segkit.errors import NonFiniteError
from segkit.nn import BatchNorm2d, Conv2d, ConvTranspose2d


@dataclass
class NadamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def nadam_step(params, grads, state):
    """Apply one Nesterov-Adam update to ``params`` in place.

    With g the gradient and t the step count after incrementing::

        m = b1*m + (1-b1)*g          v = b2*v + (1-b2)*g^2
        m_hat = m / (1-b1^t)         v_hat = v / (1-b2^t)
        num = b1*m_hat + (1-b1)*g / (1-b1^t)
        p  -= lr * num / (sqrt(v_hat) + eps)

    Raises NonFiniteError, leaving params and state untouched, when any
    gradient holds NaN or inf.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; step rejected")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        num = b1 * (m / c1) + (1.0 - b1) * g / c1
        p -= (state.lr * num / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


class Nadam:
    """Optimizer bound to a network's trainable parameters."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = NadamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = value

    def step(self):
        nadam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0


@dataclass
class PlateauScheduler:
    """Divide the learning rate by ``factor`` after ``patience`` epochs
    without an improvement larger than ``min_delta``."""

    factor: float = 10.0
    patience: int = 2
    min_delta: float = 1e-4
    best_loss: float = math.inf
    stagnation: int = 0
    reductions: int = 0

    def epoch_end(self, val_loss, state):
        if math.isnan(val_loss):
            raise NonFiniteError("validation loss is NaN")
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.stagnation = 0
            return state.lr
        self.stagnation += 1
        if self.stagnation >= self.patience:
            state.lr = state.lr / self.factor
            self.reductions += 1
            self.stagnation = 0
        return state.lr


def scheduler_epoch_end(val_loss, sched, state):
    return sched.epoch_end(val_loss, state)


def he_uniform_init(shape, rng, fan_in=None, dtype=np.float32):
    """Uniform samples in [-sqrt(6/fan_in), sqrt(6/fan_in)].

    ``fan_in`` defaults to shape[1]*k*k, i.e. in_c*k*k for (out_c, in_c, k, k)
    conv weights.
    """
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def init_network(net, rng):
    """He-uniform weights, zero biases, BN gamma=1/beta=0, in graph order."""
    for m in net.modules():
        if isinstance(m, (Conv2d, ConvTranspose2d)):
            w = m.param("weight")
            w.data[...] = he_uniform_init(w.data.shape, rng, m.fan_in, w.data.dtype)
            if "bias" in m._params:
                m.param("bias").data[...] = 0
        elif isinstance(m, BatchNorm2d):
            m.param("gamma").data[...] = 1
            m.param("beta").data[...] = 0
    return net
