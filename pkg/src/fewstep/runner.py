"""Task orchestration behind the CLI: one function per task, artifacts under ``cfg.out``."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .datasets import ToyDistribution, make_composition_dataset, make_sample
from .distill_cm import CmConfig, FdConfig, distill_cm
from .distill_dmd import DmdConfig, distill_dmd
from .evaluation import (
    conditioning_accuracy,
    consistency_generator,
    score_oracle_check,
    sliced_wasserstein,
    speedup_report,
    write_json,
)
from .networks import NetSpec, SeqCondition
from .packing import PackedSeq, dump_sequences, load_sequences, unpack
from .plots import loss_curve_svg, scatter_svg
from .samplers import consistency_sample, euler_solve
from .train_fm import TeacherConfig, train_teacher
from .training import CompositionSource, OptimConfig, ToySource

log = logging.getLogger("fewstep")


def toy_distribution(cfg: RunConfig) -> ToyDistribution:
    d = cfg.dataset
    return ToyDistribution.from_dict(
        {"kind": d.kind, "dim": d.dim, "means": d.means, "weights": d.weights, "std": d.std, "noise": d.noise}
    )


def make_source(cfg: RunConfig):
    d = cfg.dataset
    if d.kind == "composition":
        samples = make_composition_dataset((d.k_min, d.k_max), d.size, cfg.seed)
        return CompositionSource(samples, cfg_dropout=d.cfg_dropout)
    return ToySource(toy_distribution(cfg), conditional=d.conditional, cfg_dropout=d.cfg_dropout)


def net_spec(cfg: RunConfig, source) -> NetSpec:
    n = cfg.net
    if cfg.dataset.kind == "composition":
        return NetSpec("seq", source.dim, n.hidden, n.depth, n.time_dim, source.vocab, n.pos_dim)
    return NetSpec("point", cfg.dataset.dim, n.hidden, n.depth, n.time_dim, source.vocab, n.pos_dim)


def _optim(cfg: RunConfig, lr: float | None = None) -> OptimConfig:
    o = cfg.optim
    return OptimConfig(o.lr if lr is None else lr, o.beta1, o.beta2, o.eps, o.weight_decay, o.cosine)


def _ckpt_path(cfg: RunConfig, role: str) -> Path:
    explicit = getattr(cfg.checkpoints, role)
    return Path(explicit) if explicit else Path(cfg.out) / f"{role}.ckpt"


def _load_net(cfg: RunConfig, role: str):
    path = _ckpt_path(cfg, role)
    if not path.exists():
        raise FileNotFoundError(f"{role} checkpoint not found at {path}; run the {role} stage first")
    return load_checkpoint(path).net()


def _save(cfg: RunConfig, role: str, net, step: int) -> Path:
    path = Path(cfg.out) / f"{role}.ckpt"
    save_checkpoint(path, Checkpoint.from_net(net, step, cfg.digest(), meta={"role": role, "seed": cfg.seed}))
    return path


def toy_conditions(source, n: int) -> np.ndarray:
    if getattr(source, "conditional", False):
        return 1 + np.arange(n) % source.dist.num_classes
    return np.ones(n, dtype=np.int64)


def run_train_teacher(cfg: RunConfig) -> dict:
    source = make_source(cfg)
    spec = net_spec(cfg, source)
    tc = TeacherConfig(cfg.teacher.steps, cfg.teacher.batch, _optim(cfg))
    teacher, losses = train_teacher(spec, source, tc, cfg.seed)
    out = Path(cfg.out)
    path = _save(cfg, "teacher", teacher, tc.steps)
    losses.write_csv(out / "teacher_loss.csv")
    loss_curve_svg(losses, out / "teacher_loss.svg")
    return {"checkpoint": str(path), "final_loss": float(np.mean(losses.column("loss")[-100:]))}


def run_distill_cm(cfg: RunConfig) -> dict:
    source = make_source(cfg)
    teacher = _load_net(cfg, "teacher")
    c = cfg.cm
    cc = CmConfig(c.steps, c.batch, _optim(cfg, c.lr), FdConfig(c.fd_epsilon), c.ema_decay, c.tangent_clip)
    student, losses = distill_cm(teacher, source, cc, cfg.seed)
    out = Path(cfg.out)
    path = _save(cfg, "cm", student, cc.steps)
    losses.write_csv(out / "cm_loss.csv")
    loss_curve_svg(losses, out / "cm_loss.svg")
    return {"checkpoint": str(path), "final_loss": float(np.mean(losses.column("loss")[-100:]))}


def run_distill_dmd(cfg: RunConfig) -> dict:
    source = make_source(cfg)
    teacher = _load_net(cfg, "teacher")
    cm = _load_net(cfg, "cm")
    d = cfg.dmd
    dc = DmdConfig(d.steps, d.batch, d.cfg_scale, d.update_ratio, d.generator_steps, _optim(cfg, d.lr),
                   d.fake_lr_ratio, d.t_min, d.t_max, d.fake_warmup)
    student, losses = distill_dmd(cm, teacher, source, dc, cfg.seed)
    out = Path(cfg.out)
    path = _save(cfg, "dmd", student, dc.steps)
    losses.write_csv(out / "dmd_loss.csv")
    loss_curve_svg(losses, out / "dmd_loss.svg")
    return {"checkpoint": str(path), "final_gen_loss": float(np.mean(losses.column("gen_loss")[-20:]))}


def _student(cfg: RunConfig):
    if cfg.sample.checkpoint:
        return load_checkpoint(cfg.sample.checkpoint).net()
    for role in ("dmd", "cm", "teacher"):
        if _ckpt_path(cfg, role).exists():
            return _load_net(cfg, role)
    raise FileNotFoundError(f"no checkpoint in {cfg.out}; train something first")


def _write_samples_csv(path: Path, samples: np.ndarray, header: dict) -> None:
    lines = ["# " + " ".join(f"{k}={v}" for k, v in header.items())]
    lines.append(",".join(f"x{i}" for i in range(samples.shape[1])))
    lines += [",".join(repr(float(v)) for v in row) for row in samples]
    path.write_text("\n".join(lines) + "\n")


def read_samples_csv(path: str | Path) -> tuple[np.ndarray, dict]:
    lines = Path(path).read_text().splitlines()
    header = dict(item.split("=", 1) for item in lines[0][2:].split())
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    return data, header


def run_sample(cfg: RunConfig) -> dict:
    s = cfg.sample
    net = _student(cfg)
    source = make_source(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    out = Path(cfg.out)
    if cfg.dataset.kind == "composition":
        samples = make_composition_dataset((cfg.dataset.k_min, cfg.dataset.k_max), s.n, [cfg.seed, 2])
        k = samples[0].k
        group = [q for q in samples if q.k == k]
        seqs = [q.packed() for q in group]
        rows = seqs[0].target_rows
        cond = SeqCondition(np.stack([q.tokens[rows.stop :] for q in seqs]), seqs[0].descriptors,
                            np.array([q.token for q in group]))
        eps = rng.standard_normal((len(group),) + seqs[0].tokens[rows].shape)
        batch = _draw(net, eps, cond, s, cfg.seed)
        target = seqs[0].descriptors[0]
        dump_sequences(out / "samples.ups", [PackedSeq(x, target) for x in batch.samples])
        artifact = out / "samples.ups"
    else:
        eps = rng.standard_normal((s.n, cfg.dataset.dim))
        batch = _draw(net, eps, toy_conditions(source, s.n), s, cfg.seed)
        artifact = out / "samples.csv"
        _write_samples_csv(artifact, batch.samples, {"nfe": batch.nfe, "steps": s.steps, "sampler": s.sampler})
    meta = {"nfe": batch.nfe, "steps": s.steps, "sampler": s.sampler, "seed": cfg.seed,
            "wall_clock_ns": batch.wall_clock_ns, "artifact": artifact.name}
    write_json(out / "samples.json", meta)
    return meta


def _draw(net, eps, c, s, seed):
    if s.sampler == "euler":
        return euler_solve(net, eps, s.steps, c, s.cfg_scale)
    return consistency_sample(net, eps, s.steps, c, [seed, 3], s.cfg_scale)


def run_eval(cfg: RunConfig, speedup: bool = False, fidelity: bool = False,
             score_check: bool = False, conditioning: bool = False) -> dict:
    out = Path(cfg.out)
    e = cfg.eval
    report: dict = {}
    source = make_source(cfg)
    if not any((speedup, fidelity, score_check, conditioning)):
        speedup = True
    if speedup:
        teacher, student = _load_net(cfg, "teacher"), _student(cfg)
        if cfg.dataset.kind == "composition":
            sample = make_sample([(0, 1), (4, 2)])
            cond = SeqCondition.from_sequence(sample.packed())
            shape = (1,) + sample.packed().tokens[sample.packed().target_rows].shape
            rep = speedup_report(teacher, student, shape, cond, cfg.seed, e.euler_steps, e.consistency_steps, e.repeats)
        else:
            rep = speedup_report(teacher, student, (e.n, cfg.dataset.dim), toy_conditions(source, e.n), cfg.seed,
                                 e.euler_steps, e.consistency_steps, e.repeats)
        report["speedup"] = rep.to_dict()
        (out / "speedup.txt").write_text(rep.table() + "\n")
    if fidelity:
        report["fidelity"] = fidelity_report(cfg, source, out)
    if score_check:
        report["score_check"] = score_oracle_check(_load_net(cfg, "teacher"), toy_distribution(cfg), seed=cfg.seed)
    if conditioning:
        d = cfg.dataset
        held_out = make_composition_dataset((d.k_min, d.k_max), e.n, [cfg.seed, 4])
        gen = consistency_generator(_student(cfg), e.consistency_steps, [cfg.seed, 5])
        report["conditioning"] = conditioning_accuracy(gen, held_out, cfg.seed)
    write_json(out / "eval.json", report)
    return report


def fidelity_report(cfg: RunConfig, source, out: Path) -> dict:
    """Sliced-Wasserstein of few-step students to 100-step teacher samples."""
    e = cfg.eval
    n, dim = e.n, cfg.dataset.dim
    c = toy_conditions(source, n)
    teacher = _load_net(cfg, "teacher")

    def noise(k):
        return np.random.default_rng([cfg.seed, 10, k]).standard_normal((n, dim))

    ref = euler_solve(teacher, noise(0), e.euler_steps, c).samples
    resample = euler_solve(teacher, noise(1), e.euler_steps, c).samples
    sw = lambda x: sliced_wasserstein(ref, x, e.n_proj, cfg.seed)  # noqa: E731
    rep = {"baseline": sw(resample)}
    sets = {"teacher": ref}
    for role in ("cm", "dmd"):
        if not _ckpt_path(cfg, role).exists():
            continue
        net = _load_net(cfg, role)
        for steps in (1, e.consistency_steps):
            x = consistency_sample(net, noise(2), steps, c, [cfg.seed, 11]).samples
            rep[f"{role}_{steps}step"] = sw(x)
            if steps == e.consistency_steps:
                sets[f"{role} {steps}-step"] = x
    if dim == 2:
        scatter_svg(sets, out / "fidelity_scatter.svg")
    return rep


def run_pack_demo(cfg: RunConfig) -> dict:
    """Pack a K=3 composition sample, dump it, reload it and check the round trip."""
    rng = np.random.default_rng(cfg.seed)
    regions = rng.permutation(6)[:3]
    colours = rng.integers(0, 8, size=3)
    sample = make_sample(list(zip(regions, colours)))
    seq = sample.packed()
    out = Path(cfg.out)
    dump_sequences(out / "pack_demo.ups", [seq])
    (back,) = load_sequences(out / "pack_demo.ups")
    parts = back.split()
    exact = bool(np.array_equal(back.tokens, seq.tokens)) and all(
        np.array_equal(unpack(p).values, g.values) for p, g in zip(parts, (sample.target,) + sample.refs)
    )
    summary = {
        "tokens": list(seq.tokens.shape),
        "offsets": list(seq.offsets),
        "descriptors": [[d.height, d.width, d.role, d.index] for d in seq.descriptors],
        "attributes": [list(map(int, a)) for a in sample.attributes],
        "round_trip_exact": exact,
    }
    write_json(out / "pack_demo.json", summary)
    return summary


TASK_RUNNERS = {
    "train-teacher": run_train_teacher,
    "distill-cm": run_distill_cm,
    "distill-dmd": run_distill_dmd,
    "sample": run_sample,
    "eval": run_eval,
    "pack-demo": run_pack_demo,
}


def run(cfg: RunConfig, task: str | None = None, **options) -> dict:
    task = task or cfg.task
    if task not in TASK_RUNNERS:
        raise ValueError(f"unknown task {task!r}")
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("running %s into %s", task, cfg.out)
    return TASK_RUNNERS[task](cfg, **options)
