"""Flow-matching teacher training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, NonFiniteError
from .networks import NetSpec, VelocityNet
from .schedule import T_MAX, T_MIN, interpolate, sample_times, velocity_target
from .training import LossLog, OptimConfig, TrainingError, check_loss, lr_at


def fm_loss(net, x, eps, t, c) -> ad.Tensor:
    """Mean squared error between F(x_t, t, c) and the straight-line velocity eps - x."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ad.ShapeError(f"data {x.shape} and noise {eps.shape} differ")
    x_t = interpolate(x, eps, t)
    return ad.mse(net(x_t, t, c), velocity_target(x, eps))


@dataclass
class TeacherConfig:
    steps: int = 20_000
    batch: int = 256
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=2e-3, weight_decay=0.0))
    t_min: float = T_MIN
    t_max: float = T_MAX


def make_optimizer(params, optim: OptimConfig) -> AdamW:
    return AdamW(params, optim.lr, (optim.beta1, optim.beta2), optim.eps, optim.weight_decay)


def teacher_steps(net: VelocityNet, opt: AdamW, source, config: TeacherConfig, seed: int,
                  start: int, stop: int, log: LossLog) -> None:
    """Run optimisation steps ``start..stop-1``; step ``s`` draws from rng(seed, s)."""
    for step in range(start, stop):
        rng = np.random.default_rng([seed, step])
        x, c = source.sample(rng, config.batch)
        eps = rng.standard_normal(x.shape)
        t = sample_times(rng, config.batch, config.t_min, config.t_max)
        try:
            loss = fm_loss(net, x, eps, t, c)
            ad.backward(loss, net.params)
            opt.step(lr_at(config.optim, step, config.steps))
        except NonFiniteError as exc:
            raise TrainingError(f"teacher training diverged at step {step}: {exc}; last rows {log.rows[-5:]}") from exc
        value = loss.item()
        check_loss(value, step, log)
        log.append(step, value)


def train_teacher(spec: NetSpec, source, config: TeacherConfig, seed: int) -> tuple[VelocityNet, LossLog]:
    """Train a velocity net on ``source`` batches; returns a frozen copy and the loss log."""
    net = VelocityNet(spec, seed=seed)
    opt = make_optimizer(net.params, config.optim)
    log = LossLog(("step", "loss"))
    teacher_steps(net, opt, source, config, seed, 0, config.steps, log)
    return net.frozen(), log
