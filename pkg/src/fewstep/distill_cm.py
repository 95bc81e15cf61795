"""Continuous-time consistency training in the flow-matching parameterization.

With f(x_t, t) = x_t - t F(x_t, t) and weighting 1/t, the continuous-time
consistency gradient reduces to a regression of F onto

    eps - x - t * dF_minus/dt,

where F_minus is a stop-gradient snapshot of the student. The time derivative
is a central difference along the conditional path x_s = (1 - s) x + s eps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ParamSet
from .networks import VelocityNet, as_array
from .schedule import T_MAX, T_MIN, check_time, interpolate, sample_times, time_column
from .train_fm import make_optimizer
from .training import LossLog, OptimConfig, TrainingError, check_loss, lr_at

DEFAULT_FD_EPSILON = 5e-3
TANGENT_CLIP = 100.0


@dataclass(frozen=True)
class FdConfig:
    epsilon: float = DEFAULT_FD_EPSILON

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"finite-difference epsilon must lie in (0, 0.5), got {self.epsilon}")


def tangent_fd(net_minus, x, eps_noise, t, c, fd: FdConfig = FdConfig()) -> np.ndarray:
    """(F(x_{t+e}, t+e) - F(x_{t-e}, t-e)) / 2e along the conditional path."""
    h = fd.epsilon
    t = check_time(t)
    if np.any(t - h < 0.0) or np.any(t + h > 1.0):
        raise ValueError(f"t +/- {h} leaves [0, 1]; sample t in [{h}, {1 - h}]")
    x = np.asarray(x, dtype=np.float64)
    eps_noise = np.asarray(eps_noise, dtype=np.float64)
    with ad.no_grad():
        f_plus = as_array(net_minus(interpolate(x, eps_noise, t + h), t + h, c))
        f_minus = as_array(net_minus(interpolate(x, eps_noise, t - h), t - h, c))
    return (f_plus - f_minus) / (2.0 * h)


def cm_target(
    net_minus, x, eps_noise, t, c, fd: FdConfig = FdConfig(), clip: float | None = TANGENT_CLIP
) -> np.ndarray:
    """eps - x - t * dF_minus/dt as a plain array (no gradient path)."""
    tangent = tangent_fd(net_minus, x, eps_noise, t, c, fd)
    if clip is not None:
        tangent = np.clip(tangent, -clip, clip)
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(eps_noise, dtype=np.float64) - x - time_column(t, x) * tangent


def cm_loss(student, x, eps_noise, t, c, target) -> ad.Tensor:
    if isinstance(target, ad.Tensor):
        if target.requires_grad:
            raise ad.GradientError("consistency target must be detached")
        target = target.data
    target = np.asarray(target, dtype=np.float64)
    x_t = interpolate(np.asarray(x, dtype=np.float64), np.asarray(eps_noise, dtype=np.float64), t)
    return ad.mse(student(x_t, t, c), target)


@dataclass
class CmConfig:
    steps: int = 2_000
    batch: int = 1_024  # the conditional-path target is single-sample; big batches tame it
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-4, weight_decay=0.0))
    fd: FdConfig = field(default_factory=FdConfig)
    ema_decay: float = 0.0  # 0 -> target net is the current student, stop-gradient
    tangent_clip: float | None = TANGENT_CLIP
    t_min: float = T_MIN
    t_max: float = T_MAX


@dataclass
class DistillState:
    student: VelocityNet
    target: VelocityNet  # theta-minus, frozen
    teacher: VelocityNet | None


def refresh_target(state: DistillState, decay: float) -> None:
    if decay <= 0.0:
        state.target = state.student.frozen()
        return
    mixed = {
        k: decay * state.target.params[k].data + (1.0 - decay) * p.data
        for k, p in state.student.params.items()
    }
    state.target = state.student.with_params(ParamSet(mixed, frozen=True))


def distill_cm(teacher: VelocityNet, source, config: CmConfig, seed: int) -> tuple[VelocityNet, LossLog]:
    """Consistency-tune a student initialised from ``teacher``."""
    student = teacher.copy()
    state = DistillState(student, student.frozen(), teacher)
    opt = make_optimizer(student.params, config.optim)
    h = config.fd.epsilon
    t_lo, t_hi = max(config.t_min, h), min(config.t_max, 1.0 - h)
    log = LossLog(("step", "loss"))
    for step in range(config.steps):
        rng = np.random.default_rng([seed, step])
        refresh_target(state, config.ema_decay if step else 0.0)
        x, c = source.sample(rng, config.batch, drop=False)
        eps = rng.standard_normal(x.shape)
        t = sample_times(rng, config.batch, t_lo, t_hi)
        try:
            target = cm_target(state.target, x, eps, t, c, config.fd, config.tangent_clip)
            loss = cm_loss(student, x, eps, t, c, target)
            ad.backward(loss, student.params)
            opt.step(lr_at(config.optim, step, config.steps))
        except NonFiniteError as exc:
            raise TrainingError(f"consistency training diverged at step {step}: {exc}; last rows {log.rows[-5:]}") from exc
        value = loss.item()
        check_loss(value, step, log)
        log.append(step, value)
    return student.frozen(), log
