"""PF-ODE Euler solver and multi-step consistency sampler with NFE accounting."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .networks import cfg_forward
from .schedule import cm_apply

BASELINE_EULER_STEPS = 100
FEW_STEPS = 8


@dataclass
class SampleBatch:
    samples: np.ndarray
    nfe: int
    wall_clock_ns: int
    seed: int | None = None


class CallCounter:
    """Counts forward evaluations of a wrapped velocity function."""

    def __init__(self, net):
        self.net = net
        self.count = 0

    def __call__(self, x_t, t, c):
        self.count += 1
        return self.net(x_t, t, c)


def _guided(net, w: float):
    if w == 1.0:
        return net
    return lambda x_t, t, c: cfg_forward(net, x_t, t, c, w)


def euler_trajectory(net, eps, steps: int, c, w: float = 1.0):
    """Integrate dx/dt = F from t=1 to t=0 on a uniform grid; returns the endpoint."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    f = _guided(net, w)
    ts = np.linspace(1.0, 0.0, steps + 1)
    x = ad.tensor(eps)
    for k in range(steps):
        x = x + f(x, ts[k], c) * (ts[k + 1] - ts[k])
    return x


def consistency_chain(net, eps, steps: int, c, rng: np.random.Generator, w: float = 1.0):
    """Multi-step consistency sampling; differentiable when grad mode is on.

    Step i evaluates the consistency map at t_i = 1 - i/steps, then renoises the
    estimate to t_{i+1} with fresh noise. The last estimate is returned.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    f = _guided(net, w)
    ts = 1.0 - np.arange(steps) / steps
    x = ad.tensor(eps)
    x_hat = x
    for i, t in enumerate(ts):
        x_hat = cm_apply(f(x, t, c), x, t)
        if i + 1 < steps:
            t_next = ts[i + 1]
            noise = rng.standard_normal(x_hat.shape)
            x = x_hat * (1.0 - t_next) + noise * t_next
    return x_hat


def euler_solve(net, eps, steps: int, c, w: float = 1.0) -> SampleBatch:
    counter = CallCounter(net)
    start = time.perf_counter_ns()
    with ad.no_grad():
        x = euler_trajectory(counter, eps, steps, c, w)
    elapsed = time.perf_counter_ns() - start
    return SampleBatch(np.array(x.data), counter.count, elapsed)


def consistency_sample(net, eps, steps: int, c, seed, w: float = 1.0) -> SampleBatch:
    counter = CallCounter(net)
    rng = np.random.default_rng(seed)
    start = time.perf_counter_ns()
    with ad.no_grad():
        x = consistency_chain(counter, eps, steps, c, rng, w)
    elapsed = time.perf_counter_ns() - start
    return SampleBatch(np.array(x.data), counter.count, elapsed, seed)
