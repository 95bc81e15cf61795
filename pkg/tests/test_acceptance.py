"""End-to-end acceptance suite; one test per criterion, summarised at the end of the run.

Run on its own with ``pytest tests/test_acceptance.py -v``; the PASS/FAIL table is
printed in the "acceptance criteria" section of the terminal summary.
"""

import time

import numpy as np
import pytest

from fewstep import autodiff as ad
from fewstep.cli import main
from fewstep.datasets import (
    OracleNet,
    ToyDistribution,
    make_composition_dataset,
    oracle_velocity,
    sample_data,
    two_gaussian_1d,
)
from fewstep.distill_cm import CmConfig, cm_loss, cm_target, distill_cm, tangent_fd
from fewstep.distill_dmd import DmdConfig, distill_dmd, dmd_gradient, dmd_loss, generate_few_step
from fewstep.evaluation import conditioning_accuracy, consistency_generator, sliced_wasserstein, speedup_report
from fewstep.networks import NetSpec, VelocityNet
from fewstep.packing import LatentGrid, build_unified, pack, replace_target_with_noise, unpack
from fewstep.samplers import consistency_sample, euler_solve
from fewstep.schedule import cm_apply, interpolate, score_from_velocity
from fewstep.train_fm import TeacherConfig, fm_loss, train_teacher
from fewstep.training import CompositionSource, OptimConfig, ToySource

from conftest import FnNet, check_param_grads, fd_gradient, rel_err, t_column

slow = pytest.mark.slow


def measured(request, text: str) -> None:
    request.node.user_properties.append(("measured", text))


# 1 ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "gradient integrity of fm_loss / cm_loss / dmd_loss vs central differences")
def test_gradient_integrity(request):
    start = time.perf_counter()
    r = np.random.default_rng(0)
    worst = {}
    for seed in range(3):
        net = VelocityNet(NetSpec(dim=2, hidden=8, depth=2), seed=seed)
        x, eps = r.standard_normal((6, 2)), r.standard_normal((6, 2))
        t = r.uniform(0.01, 0.99, 6)
        worst["fm"] = max(worst.get("fm", 0.0), check_param_grads(lambda: fm_loss(net, x, eps, t, 1), net.params))
        tc = r.uniform(0.01, 0.99, 6)
        target = cm_target(net.frozen(), x, eps, tc, 1)
        err = check_param_grads(lambda: cm_loss(net, x, eps, tc, 1, target), net.params)
        worst["cm"] = max(worst.get("cm", 0.0), err)
        # dmd_loss through a 3-step generator; g held fixed as in the estimator
        g = r.standard_normal((5, 2))
        noise = r.standard_normal((5, 2))

        def sample():
            return generate_few_step(net, noise, 3, 1, np.random.default_rng(seed))

        ad.backward(dmd_loss(sample(), g), net.params)
        for p in net.params.values():
            num = fd_gradient(lambda: 0.5 * float(np.sum((sample().data + g) ** 2 - sample().data ** 2)) / 5, p.data)
            worst["dmd"] = max(worst.get("dmd", 0.0), rel_err(p.grad, num))
    elapsed = time.perf_counter() - start
    measured(request, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
    assert max(worst.values()) < 1e-5
    assert elapsed < 60


# 2 ---------------------------------------------------------------------------


@pytest.mark.criterion(2, "cm_apply(F, x, 0) == x exactly")
def test_boundary_condition(request):
    r = np.random.default_rng(1)
    for _ in range(1000):
        shape = tuple(r.integers(1, 6, size=r.integers(1, 4)))
        x = r.standard_normal(shape) * 10.0 ** r.integers(-3, 4)
        f = r.standard_normal(shape) * 1e6
        assert np.array_equal(cm_apply(f, x, 0.0), x)
    measured(request, "1000 random inputs")


# 3 ---------------------------------------------------------------------------


@pytest.mark.criterion(3, "score identity on the analytic Gaussian optimum")
def test_score_identity(request):
    r = np.random.default_rng(2)
    gauss = ToyDistribution("standard-gaussian", dim=3)
    worst = 0.0
    for _ in range(100):
        x_t = r.standard_normal((1, 3)) * 3
        t = r.uniform(1e-3, 1.0)
        s = (1 - t) ** 2 + t**2
        assert np.allclose(oracle_velocity(gauss, x_t, t), (2 * t - 1) * x_t / s, rtol=0, atol=1e-14)
        score = score_from_velocity((2 * t - 1) * x_t / s, x_t, t)
        worst = max(worst, float(np.abs(score - (-x_t / s)).max()))
    measured(request, f"max abs err {worst:.1e}")
    assert worst < 1e-12


# 4 ---------------------------------------------------------------------------


@pytest.mark.criterion(4, "finite-difference tangent and CM == FM on constant-in-t fields")
def test_tangent_accuracy(request):
    r = np.random.default_rng(3)
    x, eps = r.standard_normal((64, 2)), r.standard_normal((64, 2))
    t = r.uniform(5e-3, 1 - 5e-3, 64)
    quad = FnNet(lambda x_t, tt, c: np.ones_like(x_t) * t_column(tt, x_t) ** 2)
    fd_err = float(np.abs(tangent_fd(quad, x, eps, t, 1) - 2 * t[:, None]).max())
    assert fd_err < 2.5e-5
    const = FnNet(lambda x_t, tt, c: np.full_like(x_t, 0.8))
    assert np.array_equal(cm_target(const, x, eps, t, 1), eps - x)
    student = VelocityNet(NetSpec(dim=2, hidden=16, depth=2), seed=0)
    gap = 0.0
    for seed in range(10):
        rb = np.random.default_rng([3, seed])
        xb, eb = rb.standard_normal((32, 2)), rb.standard_normal((32, 2))
        tb = rb.uniform(5e-3, 1 - 5e-3, 32)
        a = cm_loss(student, xb, eb, tb, 1, cm_target(const, xb, eb, tb, 1)).item()
        gap = max(gap, abs(a - fm_loss(student, xb, eb, tb, 1).item()))
    measured(request, f"fd err {fd_err:.1e}, |cm - fm| {gap:.1e}")
    assert gap <= 1e-12


# 5 ---------------------------------------------------------------------------


@pytest.mark.criterion(5, "DMD fixed point: g == 0 bitwise on shared weights, zero-mean on matched Gaussians")
def test_dmd_fixed_point(request):
    r = np.random.default_rng(4)
    net = VelocityNet(NetSpec(dim=2, hidden=16, depth=2), seed=1).frozen()
    twin = net.with_params(net.params.copy(frozen=True))
    x = r.standard_normal((256, 2))
    g = dmd_gradient(net, twin, x, r.uniform(0.02, 0.98, 256), 1, w=1.0, rng=r)
    assert np.array_equal(g, np.zeros_like(x))
    n = 10_000
    gauss = ToyDistribution("standard-gaussian", dim=2)
    x = r.standard_normal((n, 2))
    eps_hat = r.standard_normal((n, 2))
    t = r.uniform(0.02, 0.98, n)
    fake = FnNet(lambda x_t, tt, c: eps_hat - x)  # unbiased single-draw fake score for the generator N(0, I)
    g = dmd_gradient(OracleNet(gauss), fake, x, t, 1, w=1.0, eps_hat=eps_hat)
    z = g.mean(axis=0) / (g.std(axis=0, ddof=1) / np.sqrt(n))
    measured(request, f"z-scores {z[0]:+.2f}, {z[1]:+.2f}")
    assert np.all(np.abs(z) < 3)


# 6 ---------------------------------------------------------------------------


def velocity_rmse(net, dist, n=4000, seed=1) -> float:
    r = np.random.default_rng(seed)
    x = sample_data(dist, n, [seed, 1])
    eps = r.standard_normal(x.shape)
    t = r.uniform(0.02, 0.98, n)
    x_t = interpolate(x, eps, t)
    with ad.no_grad():
        f = net(x_t, t, np.ones(n, dtype=np.int64)).data
    return float(np.sqrt(np.mean((f - oracle_velocity(dist, x_t, t)) ** 2)))


@slow
@pytest.mark.criterion(6, "teacher velocity RMSE vs oracle on Gaussian / mixture toys")
def test_teacher_quality(request):
    results = {}
    for name, dist in (("gaussian", ToyDistribution("standard-gaussian", dim=2)), ("mixture", two_gaussian_1d())):
        start = time.perf_counter()
        net, _ = train_teacher(NetSpec(dim=dist.dim, hidden=64, depth=2), ToySource(dist),
                               TeacherConfig(steps=8000), seed=0)
        results[name] = (velocity_rmse(net, dist), time.perf_counter() - start)
    measured(request, ", ".join(f"{k} rmse {v[0]:.4f} in {v[1]:.0f}s" for k, v in results.items()))
    assert results["gaussian"][0] < 0.05
    assert results["mixture"][0] < 0.08
    assert all(v[1] < 600 for v in results.values())


# 7 and 8 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def moons():
    """Two-moons teacher -> consistency student -> DMD finetune, with timings."""
    start = time.perf_counter()
    src = ToySource(ToyDistribution("two-moons"), cfg_dropout=0.1)
    spec = NetSpec(dim=2, hidden=128, depth=3, vocab=src.vocab)
    teacher, _ = train_teacher(spec, src, TeacherConfig(steps=20_000), seed=0)
    cm, _ = distill_cm(teacher, src, CmConfig(steps=2_000), seed=1)
    dmd_cfg = DmdConfig(steps=200, batch=256, cfg_scale=1.0, student_optim=OptimConfig(lr=1e-5, weight_decay=0.0))
    dmd, _ = distill_dmd(cm, teacher, src, dmd_cfg, seed=2)
    return {"teacher": teacher, "cm": cm, "dmd": dmd, "seconds": time.perf_counter() - start}


@slow
@pytest.mark.criterion(7, "two-moons fidelity: CM 8-step <= 1.5x, 1-step <= 3x baseline; DMD 8-step <= CM 8-step")
def test_distillation_fidelity(request, moons):
    n = 2000
    c = np.ones(n, dtype=np.int64)

    def noise(seed):
        return np.random.default_rng(seed).standard_normal((n, 2))

    ref = euler_solve(moons["teacher"], noise(100), 100, c).samples
    baseline = sliced_wasserstein(ref, euler_solve(moons["teacher"], noise(101), 100, c).samples, seed=7)

    def ratio(net, steps):
        x = consistency_sample(net, noise(200), steps, c, 5).samples
        return sliced_wasserstein(ref, x, seed=7) / baseline

    cm1, cm8, dmd8 = ratio(moons["cm"], 1), ratio(moons["cm"], 8), ratio(moons["dmd"], 8)
    measured(request, f"baseline {baseline:.4f}, cm 1-step {cm1:.2f}x, cm 8-step {cm8:.2f}x, "
                      f"dmd 8-step {dmd8:.2f}x, pipeline {moons['seconds']:.0f}s")
    assert cm8 <= 1.5
    assert cm1 <= 3.0
    assert dmd8 <= cm8
    assert moons["seconds"] < 1800


@slow
@pytest.mark.criterion(8, "speedup: NFE ratio exactly 12.5, wall-clock ratio >= 10 on equal nets")
def test_speedup(request, moons):
    rep = speedup_report(moons["teacher"], moons["cm"], (2000, 2), np.ones(2000, dtype=np.int64), seed=0, repeats=5)
    measured(request, f"nfe ratio {rep.nfe_ratio}, wall ratio {rep.wall_ratio:.2f}")
    assert moons["teacher"].spec == moons["cm"].spec
    assert rep.nfe_ratio == 12.5
    assert rep.wall_ratio >= 10


# 9 ---------------------------------------------------------------------------


@pytest.mark.criterion(9, "packing round trip, unified offsets, reference segments untouched by noising")
def test_packing(request):
    r = np.random.default_rng(9)
    for _ in range(1000):
        c, h, w = r.integers(1, 5), 2 * r.integers(1, 9), 2 * r.integers(1, 9)
        g = LatentGrid(r.standard_normal((c, h, w)))
        assert np.array_equal(unpack(pack(g)).values, g.values)
    for _ in range(50):
        ch = int(r.integers(1, 4))
        parts = [pack(LatentGrid(r.standard_normal((ch, 2 * r.integers(1, 5), 2 * r.integers(1, 5)))))
                 for _ in range(r.integers(2, 7))]
        seq = build_unified(parts[0], parts[1:])
        assert list(seq.offsets) == list(np.cumsum([0] + [p.num_tokens for p in parts[:-1]]))
        for k, p in enumerate(parts):
            assert np.array_equal(seq.tokens[seq.segment(k)], p.tokens)
        noisy = replace_target_with_noise(seq, int(r.integers(1 << 30)))
        refs = slice(seq.target_rows.stop, None)
        assert np.array_equal(noisy.tokens[refs], seq.tokens[refs])
    measured(request, "1000 round trips, 50 unified sequences")


# 10 --------------------------------------------------------------------------


@slow
@pytest.mark.criterion(10, "composition conditioning: K in {2,3} >= 0.9, K in {4,5,6} >= 5x chance")
def test_conditioning(request):
    src = CompositionSource(make_composition_dataset((1, 6), 4000, 0), cfg_dropout=0.1)
    spec = NetSpec("seq", dim=src.dim, hidden=32, depth=2, vocab=2)
    optim = OptimConfig(lr=1e-3, weight_decay=0.0)
    teacher, _ = train_teacher(spec, src, TeacherConfig(steps=2000, batch=32, optim=optim), seed=0)
    student, _ = distill_cm(teacher, src, CmConfig(steps=500, batch=32), seed=1)
    held_out = make_composition_dataset((2, 6), 600, 99)
    rep = conditioning_accuracy(consistency_generator(student, 8, 5), held_out, 1)
    per_k, chance = rep["per_k"], rep["chance"]
    measured(request, f"chance {chance:.3f}, " + ", ".join(f"K={k} {v:.3f}" for k, v in sorted(per_k.items())))
    assert per_k[2] >= 0.9 and per_k[3] >= 0.9
    assert all(per_k[k] >= 5 * chance for k in (4, 5, 6))


# 11 --------------------------------------------------------------------------

REPRO = """\
seed: 11
dataset: {kind: two-moons, cfg_dropout: 0.1}
net: {hidden: 16, depth: 2}
teacher: {steps: 60, batch: 64}
cm: {steps: 20, batch: 64}
dmd: {steps: 3, batch: 32, cfg_scale: 1.0}
sample: {n: 100}
"""


@pytest.mark.criterion(11, "CLI reruns with identical config and seed give byte-identical artifacts")
def test_cli_reproducibility(request, tmp_path):
    config = tmp_path / "run.yaml"
    config.write_text(REPRO)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for task in ("train-teacher", "distill-cm", "distill-dmd", "sample"):
            assert main([task, "--config", str(config), "--out", str(out)]) == 0
        assert main(["sample", "--config", str(config), "--out", str(out / "euler"), "--sampler", "euler",
                     "--checkpoint", str(out / "teacher.ckpt")]) == 0
        runs.append(out)
    artifacts = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*") if p.suffix in (".csv", ".ckpt"))
    assert len(artifacts) >= 8
    for rel in artifacts:
        assert (runs[0] / rel).read_bytes() == (runs[1] / rel).read_bytes(), rel
    measured(request, f"{len(artifacts)} artifacts compared")
