"""Distribution-matching distillation under reverse KL.

A fake-score net tracks the student's sample distribution with the
flow-matching loss. The student update direction is the weighted difference
between the guided teacher velocity and the fake-score velocity at a
re-noised student sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, NonFiniteError
from .networks import VelocityNet, as_array, cfg_forward
from .samplers import FEW_STEPS, consistency_chain
from .schedule import check_time, interpolate, sample_times, time_column
from .train_fm import fm_loss, make_optimizer
from .training import LossLog, OptimConfig, TrainingError, check_loss, lr_at

DEFAULT_CFG_SCALE = 6.0


@dataclass
class DmdConfig:
    steps: int = 1_000
    batch: int = 256
    cfg_scale: float = DEFAULT_CFG_SCALE
    update_ratio: int = 5  # fake-score steps per generator step
    generator_steps: int = FEW_STEPS
    student_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-5, weight_decay=0.0))
    fake_lr_ratio: float = 0.2  # fake lr / student lr
    t_min: float = 0.02
    t_max: float = 0.98
    fake_warmup: int = 0

    def __post_init__(self):
        if self.cfg_scale < 1.0 or self.update_ratio < 1 or self.generator_steps < 1:
            raise ValueError("need cfg_scale >= 1, update_ratio >= 1, generator_steps >= 1")

    @property
    def fake_optim(self) -> OptimConfig:
        o = self.student_optim
        return OptimConfig(o.lr * self.fake_lr_ratio, o.beta1, o.beta2, o.eps, o.weight_decay, o.cosine)


def generate_few_step(student, eps, n_steps: int, c, rng: np.random.Generator) -> ad.Tensor:
    """G(eps): ``n_steps`` consistency sampling; differentiable w.r.t. student params."""
    return consistency_chain(student, eps, n_steps, c, rng)


def dmd_gradient(teacher, fake, x, t, c, w: float = DEFAULT_CFG_SCALE, eps_hat=None, rng=None) -> np.ndarray:
    """((1 - t) / t) * (F_teacher^CFG(x_t) - F_fake(x_t)) at x_t = (1 - t) x + t eps_hat.

    Guidance applies to the teacher only.
    """
    x = as_array(x)
    t = check_time(t)
    if np.any(t == 0.0):
        raise ZeroDivisionError("distribution-matching gradient is undefined at t = 0")
    if eps_hat is None:
        if rng is None:
            raise ValueError("need eps_hat or an rng to draw it")
        eps_hat = rng.standard_normal(x.shape)
    x_t = interpolate(x, np.asarray(eps_hat, dtype=np.float64), t)
    with ad.no_grad():
        f_teacher = as_array(cfg_forward(teacher, x_t, t, c, w))
        f_fake = as_array(fake(x_t, t, c))
    tc = time_column(t, x)
    return (1.0 - tc) / tc * (f_teacher - f_fake)


def dmd_loss(sample: ad.Tensor, g) -> ad.Tensor:
    """Batch mean of 1/2 ||G - stopgrad(G) + g||^2; its gradient w.r.t. G is g / batch."""
    sample = ad.tensor(sample)
    g = as_array(g)
    if sample.shape != g.shape:
        raise ad.ShapeError(f"sample {sample.shape} and g {g.shape} differ")
    residual = sample - sample.data + g
    return ad.tsum(ad.square(residual)) * (0.5 / sample.shape[0])


def fake_score_update(fake: VelocityNet, samples, c, opt: AdamW, rng: np.random.Generator, lr: float,
                      t_min: float = 0.02, t_max: float = 0.98) -> float:
    """One flow-matching step of the fake-score net on detached student samples."""
    samples = as_array(samples)
    eps = rng.standard_normal(samples.shape)
    t = sample_times(rng, samples.shape[0], t_min, t_max)
    loss = fm_loss(fake, samples, eps, t, c)
    ad.backward(loss, fake.params)
    opt.step(lr)
    return loss.item()


def distill_dmd(
    cm_student: VelocityNet, teacher: VelocityNet, source, config: DmdConfig, seed: int
) -> tuple[VelocityNet, LossLog]:
    """Alternate ``update_ratio`` fake-score steps with one generator step.

    Generator step ``s`` draws all its randomness from rng(seed, 0, s); warm-up
    round ``i`` of the fake score uses rng(seed, 1, i).
    """
    student = cm_student.copy()
    fake = teacher.copy()
    so, fo = config.student_optim, config.fake_optim
    gen_opt = make_optimizer(student.params, so)
    fake_opt = make_optimizer(fake.params, fo)
    log = LossLog(("step", "gen_loss", "fake_loss"))

    def student_batch(rng):
        x, c = source.sample(rng, config.batch, drop=False)
        return rng.standard_normal(x.shape), c

    def fake_round(rng, lr):
        noise, c = student_batch(rng)
        with ad.no_grad():
            samples = generate_few_step(student, noise, config.generator_steps, c, rng).data
        return fake_score_update(fake, samples, c, fake_opt, rng, lr, config.t_min, config.t_max)

    try:
        for i in range(config.fake_warmup):
            fake_round(np.random.default_rng([seed, 1, i]), fo.lr)
        for step in range(config.steps):
            rng = np.random.default_rng([seed, 0, step])
            fake_lr = lr_at(fo, step, config.steps)
            fake_losses = [fake_round(rng, fake_lr) for _ in range(config.update_ratio)]
            noise, c = student_batch(rng)
            sample = generate_few_step(student, noise, config.generator_steps, c, rng)
            t = sample_times(rng, config.batch, config.t_min, config.t_max)
            g = dmd_gradient(teacher, fake, sample.data, t, c, config.cfg_scale, rng=rng)
            loss = dmd_loss(sample, g)
            ad.backward(loss, student.params)
            gen_opt.step(lr_at(so, step, config.steps))
            value = loss.item()
            check_loss(value, step, log)
            log.append(step, value, float(np.mean(fake_losses)))
    except NonFiniteError as exc:
        raise TrainingError(f"distribution matching diverged: {exc}; last rows {log.rows[-5:]}") from exc
    return student.frozen(), log
