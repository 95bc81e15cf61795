import numpy as np
import pytest

from fewstep import autodiff as ad
from fewstep.autodiff import ParamSet
from fewstep.datasets import OracleNet, ToyDistribution, oracle_velocity
from fewstep.distill_dmd import (
    DEFAULT_CFG_SCALE,
    DmdConfig,
    distill_dmd,
    dmd_gradient,
    dmd_loss,
    fake_score_update,
    generate_few_step,
)
from fewstep.networks import NULL_TOKEN, NetSpec, VelocityNet
from fewstep.schedule import cm_apply
from fewstep.train_fm import make_optimizer
from fewstep.training import OptimConfig, ToySource

from conftest import FnNet, fd_gradient, rel_err

GAUSS = ToyDistribution("standard-gaussian", dim=2)


def small_net(seed=0, vocab=2):
    return VelocityNet(NetSpec(dim=2, hidden=8, depth=2, vocab=vocab), seed=seed)


def test_defaults():
    cfg = DmdConfig()
    assert cfg.cfg_scale == DEFAULT_CFG_SCALE == 6.0
    assert cfg.update_ratio == 5 and cfg.generator_steps == 8
    assert cfg.fake_optim.lr == pytest.approx(cfg.student_optim.lr / 5)
    with pytest.raises(ValueError):
        DmdConfig(cfg_scale=0.5)


def test_one_step_generator_is_cm_apply(rng):
    net = small_net()
    eps = rng.standard_normal((5, 2))
    out = generate_few_step(net, eps, 1, 1, rng)
    assert np.array_equal(out.data, cm_apply(net(eps, 1.0, 1).data, eps, 1.0))


def test_generator_deterministic_given_seed(rng):
    net = small_net()
    eps = rng.standard_normal((5, 2))
    a = generate_few_step(net, eps, 8, 1, np.random.default_rng(3)).data
    b = generate_few_step(net, eps, 8, 1, np.random.default_rng(3)).data
    assert np.array_equal(a, b)


def test_fixed_point_is_bitwise_zero(rng):
    net = small_net().frozen()
    twin = net.with_params(net.params.copy(frozen=True))
    x = rng.standard_normal((64, 2))
    t = rng.uniform(0.02, 0.98, 64)
    g = dmd_gradient(net, twin, x, t, 1, w=1.0, rng=rng)
    assert np.array_equal(g, np.zeros_like(x))


def test_weight_is_one_at_half(rng):
    teacher = FnNet(lambda x_t, t, c: np.full_like(x_t, 2.0))
    fake = FnNet(lambda x_t, t, c: np.full_like(x_t, 0.5))
    x = rng.standard_normal((3, 2))
    assert np.array_equal(dmd_gradient(teacher, fake, x, 0.5, 1, w=1.0, rng=rng), np.full((3, 2), 1.5))
    with pytest.raises(ZeroDivisionError):
        dmd_gradient(teacher, fake, x, 0.0, 1, w=1.0, rng=rng)


def test_matched_gaussians_have_zero_mean_gradient():
    """Generator = teacher = N(0, I); the fake score is the unbiased per-sample velocity eps_hat - x."""
    r = np.random.default_rng(0)
    n = 10_000
    x = r.standard_normal((n, 2))
    eps_hat = r.standard_normal((n, 2))
    t = r.uniform(0.02, 0.98, n)
    fake = FnNet(lambda x_t, t_, c: eps_hat - x)
    g = dmd_gradient(OracleNet(GAUSS), fake, x, t, 1, w=1.0, eps_hat=eps_hat)
    mean, se = g.mean(axis=0), g.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean) < 3 * se)


def test_shifted_generator_gradient_direction(rng):
    """For N(mu, I) samples against an N(0, I) teacher, g = (1 - t) mu / ((1 - t)^2 + t^2)."""
    mu = np.array([0.8, -0.3])
    shifted = ToyDistribution("gaussian-mixture", dim=2, means=(tuple(mu),), weights=(1.0,))
    x = mu + rng.standard_normal((4000, 2))
    t = rng.uniform(0.05, 0.95, 4000)
    g = dmd_gradient(OracleNet(GAUSS), OracleNet(shifted), x, t, 1, w=1.0, rng=rng)
    s = (1 - t) ** 2 + t**2
    assert np.allclose(g, ((1 - t) / s)[:, None] * mu, atol=1e-12)
    # descending the loss moves samples by -g, i.e. against the shift
    assert np.dot(g.mean(axis=0), mu) > 0


def test_guidance_only_on_teacher(rng):
    teacher = FnNet(lambda x_t, t, c: np.where(np.asarray(c)[:, None] == NULL_TOKEN, 0.0, 1.0) * np.ones_like(x_t))
    fake = FnNet(lambda x_t, t, c: np.zeros_like(x_t))
    x = rng.standard_normal((4, 2))
    g = dmd_gradient(teacher, fake, x, 0.5, np.ones(4, int), w=6.0, rng=rng)
    assert np.allclose(g, 6.0)
    assert fake.calls == 1 and np.all(fake.conditions[0] != NULL_TOKEN)
    assert teacher.calls == 2


def test_loss_value_and_gradient(rng):
    g = rng.standard_normal((4, 2))
    sample = ad.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    loss = dmd_loss(sample, g)
    assert loss.item() == pytest.approx(0.5 * np.sum(g**2) / 4, rel=1e-15)
    ad.backward(loss, [sample])
    assert np.allclose(sample.grad, g / 4, rtol=0, atol=1e-15)


def test_scalar_generator_gradient_is_g():
    u = ad.Tensor([[0.7]], requires_grad=True)
    ad.backward(dmd_loss(u, np.array([[-1.25]])), [u])
    assert u.grad[0, 0] == -1.25


def test_zero_g_gives_zero_gradient(rng):
    net = small_net()
    eps = rng.standard_normal((4, 2))
    sample = generate_few_step(net, eps, 2, 1, rng)
    ad.backward(dmd_loss(sample, np.zeros((4, 2))), net.params)
    assert all(np.array_equal(p.grad, np.zeros_like(p.data)) for p in net.params.values())


def test_loss_gradient_matches_estimator_fd(rng):
    """d loss / d theta equals the FD derivative of <g, G(theta)> / B with g held fixed."""
    net = small_net(seed=4)
    eps = rng.standard_normal((5, 2))
    g = rng.standard_normal((5, 2))

    def sample():
        return generate_few_step(net, eps, 3, 1, np.random.default_rng(9))

    ad.backward(dmd_loss(sample(), g), net.params)
    for name, p in net.params.items():
        num = fd_gradient(lambda: float(np.sum(g * sample().data)) / 5, p.data)
        assert rel_err(p.grad, num) < 1e-5, name


def test_one_parameter_generator():
    theta = ParamSet({"a": [0.3]})
    eps = np.array([[1.0], [-2.0], [0.5]])
    g = np.array([[0.2], [-0.4], [1.0]])
    ad.backward(dmd_loss(ad.mul(eps, theta["a"]), g), theta)
    # G = a * eps, so the estimator is sum(g * eps) / B
    assert theta["a"].grad[0] == pytest.approx(np.sum(g * eps) / 3, rel=1e-15)


def test_fake_score_update_fits_teacher_samples():
    fake = small_net(seed=1)
    opt = make_optimizer(fake.params, OptimConfig(lr=3e-3, weight_decay=0.0))
    r = np.random.default_rng(2)
    probe_x = r.standard_normal((512, 2))
    probe_t = r.uniform(0.05, 0.95, 512)
    truth = oracle_velocity(GAUSS, probe_x, probe_t)

    def rmse():
        return float(np.sqrt(np.mean((fake(probe_x, probe_t, 1).data - truth) ** 2)))

    start = rmse()
    for _ in range(300):
        samples = r.standard_normal((128, 2))
        fake_score_update(fake, samples, 1, opt, r, 3e-3)
    assert rmse() < 0.5 * start


def test_fake_update_never_touches_student(rng):
    student = small_net(seed=0)
    fake = small_net(seed=1)
    before = student.params.state()
    with ad.no_grad():
        samples = generate_few_step(student, rng.standard_normal((8, 2)), 2, 1, rng).data
    student.params.zero_grad()
    fake_score_update(fake, samples, 1, make_optimizer(fake.params, OptimConfig()), rng, 1e-3)
    assert all(p.grad is None for p in student.params.values())
    assert all(np.array_equal(before[k], student.params[k].data) for k in before)


def test_distill_dmd_smoke():
    src = ToySource(ToyDistribution("two-moons"))
    teacher = small_net(seed=0).frozen()
    cm = small_net(seed=5).frozen()
    t_before, c_before = teacher.params.state(), cm.params.state()
    cfg = DmdConfig(steps=4, batch=16, cfg_scale=1.0, student_optim=OptimConfig(lr=1e-4, weight_decay=0))
    student, log = distill_dmd(cm, teacher, src, cfg, seed=0)
    assert log.columns == ("step", "gen_loss", "fake_loss") and len(log.rows) == 4
    assert all(np.array_equal(t_before[k], teacher.params[k].data) for k in t_before)
    assert all(np.array_equal(c_before[k], cm.params[k].data) for k in c_before)
    assert not all(np.array_equal(c_before[k], student.params[k].data) for k in c_before)
    again, log2 = distill_dmd(cm, teacher, src, cfg, seed=0)
    assert log.rows == log2.rows
