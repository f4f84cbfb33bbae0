"""Experiment orchestration: simulate, evaluate, sweep, validate, schedule tables."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gcdm import sampler as smp
from gcdm.config import ExperimentConfig, header_lines
from gcdm.guidance import (
    GuidanceConfig,
    GuidedField,
    compose_cdm,
    compose_cfg,
    compose_gcdm,
    compose_joint,
    finite_difference_gradient,
    relative_error,
)
from gcdm.metrics import (
    diversity,
    gaussian_w2,
    histogram_kl,
    loglik_stderr,
    mean_loglik,
    moment_summary,
)
from gcdm.schedule import ConditionSchedule, NoiseSchedule, weight_content, weight_style
from gcdm.world import (
    World,
    conditional_density,
    dependence_gap,
    diffuse,
    is_independent,
    joint,
    log_density,
    marginal_density,
    score,
)

KL_BINS = {1: 50, 2: 30}


@dataclass
class Simulation:
    config: ExperimentConfig
    config_hash: str
    samples: np.ndarray
    trajectory: smp.Trajectory | None
    metrics: list[tuple[str, float]] = field(default_factory=list)


def guided_field(cfg: ExperimentConfig, sched: NoiseSchedule | None = None, style: int | None = None):
    sched = cfg.noise_schedule() if sched is None else sched
    return GuidedField(
        cfg.world, sched, cfg.guidance, cfg.content,
        cfg.style if style is None else style, cfg.condition_schedule,
    )


def _sample(cfg: ExperimentConfig, sched, style=None, jobs=1, record=False):
    return smp.run(
        guided_field(cfg, sched, style), cfg.sampler, cfg.n, cfg.seed,
        x0=cfg.x0, jobs=jobs, record=record,
    )


def evaluate(cfg: ExperimentConfig, samples: np.ndarray, sched: NoiseSchedule, jobs: int = 1):
    """Metric rows for one run.

    ``realism`` is the mean log-likelihood under the true joint conditional of
    the configured labels; ``diversity`` is the trace of the pooled sample
    covariance over every style label at the configured content label (all
    runs share the root seed); ``kl`` and ``w2`` compare the samples to the
    same joint conditional.
    """
    target = conditional_density(cfg.world, joint(cfg.content, cfg.style))
    mean, cov = moment_summary(samples) if samples.shape[0] > 1 else (samples[0], None)
    rows = [(f"mean_{k}", float(v)) for k, v in enumerate(mean)]
    if cov is not None:
        d = cov.shape[0]
        rows += [(f"cov_{a}{b}", float(cov[a, b])) for a in range(d) for b in range(a, d)]
    rows.append(("realism", mean_loglik(samples, target)))
    rows.append(("realism_stderr", loglik_stderr(samples, target)))
    per_style = []
    for j in range(cfg.world.shape[1]):
        per_style.append(samples if j == cfg.style else _sample(cfg, sched, j, jobs).samples)
    if samples.shape[0] > 1:
        rows.append(("diversity", diversity(per_style)))
    if cfg.world.dim <= 2:
        tm, tc = target.means[0], target.covs[0]
        sd = np.sqrt(np.diag(tc))
        rng_ = [(float(m - 5 * s), float(m + 5 * s)) for m, s in zip(tm, sd)]
        try:
            rows.append(("kl", histogram_kl(samples, target, KL_BINS[cfg.world.dim], rng_)))
        except ValueError:
            rows.append(("kl", math.inf))
    if cov is not None:
        try:
            rows.append(("w2", gaussian_w2(mean, cov, target.means[0], target.covs[0])))
        except ValueError:
            rows.append(("w2", math.nan))
    return rows


def simulate(cfg: ExperimentConfig, jobs: int = 1, record: bool = False) -> Simulation:
    sched = cfg.noise_schedule()
    result = _sample(cfg, sched, jobs=jobs, record=record)
    sim = Simulation(cfg, cfg.config_hash(), result.samples, result.trajectory)
    sim.metrics = evaluate(cfg, result.samples, sched, jobs)
    return sim


def _fmt(v) -> str:
    return repr(float(v))


def write_simulation(sim: Simulation, out_dir) -> list[Path]:
    """Write samples, metrics and (if recorded) trajectories; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, seed, n = sim.config_hash, sim.config.seed, sim.config.n
    stem = h[:12]
    head = header_lines(h, seed)
    d = sim.samples.shape[1]
    paths = []

    lines = head + ["traj," + ",".join(f"x{k}" for k in range(d))]
    lines += [f"{i}," + ",".join(_fmt(v) for v in row) for i, row in enumerate(sim.samples)]
    paths.append(out / f"{stem}.samples.csv")
    paths[-1].write_text("\n".join(lines) + "\n")

    lines = head + ["config_hash,metric,value,n,seed"]
    lines += [f"{h},{name},{_fmt(v)},{n},{seed}" for name, v in sim.metrics]
    paths.append(out / f"{stem}.metrics.csv")
    paths[-1].write_text("\n".join(lines) + "\n")

    if sim.trajectory is not None:
        tr = sim.trajectory
        names = ["eps_u", "eps_c", "eps_s", "eps_j", "composite"]
        cols = ["traj", "t"] + [f"x{k}" for k in range(d)] + [f"norm_{m}" for m in names]
        norms = {m: [np.linalg.norm(a, axis=1) for a in tr.terms[m]] for m in names}
        lines = head + [",".join(cols)]
        for i in range(tr.n):
            for k, t in enumerate(tr.ts):
                xs = ",".join(_fmt(v) for v in tr.states[k][i])
                if k < len(tr.ts) - 1:
                    ns = ",".join(_fmt(norms[m][k][i]) for m in names)
                else:
                    ns = ",".join("" for _ in names)
                lines.append(f"{i},{t},{xs},{ns}")
        paths.append(out / f"{stem}.trajectories.csv")
        paths[-1].write_text("\n".join(lines) + "\n")
    return paths


# --------------------------------------------------------------------------
# Sweeps

SUMMARY = (("realism", max), ("diversity", max), ("kl", min), ("w2", min))


def grid_points(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid is empty")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def sweep(cfg: ExperimentConfig, grid: dict, jobs: int = 1):
    """Simulate every grid point; returns ``(point, Simulation)`` pairs in grid order."""
    points = grid_points(grid)
    results = []
    for point in points:
        sim = simulate(cfg.with_overrides(**point), jobs=jobs)
        results.append((point, sim))
    return results


def write_sweep(cfg: ExperimentConfig, results, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    params = ("alpha", "lambda", "beta_s", "a", "b")
    lines = header_lines(h, cfg.seed, {"grid_points": len(results)})
    lines.append("config_hash," + ",".join(params) + ",metric,value,n,seed")
    table = []
    for _, sim in results:
        c = sim.config
        cs = c.condition_schedule
        vals = (c.guidance.alpha, c.guidance.lam, c.guidance.beta_s,
                cs.a if cs else math.nan, cs.b if cs else math.nan)
        prefix = sim.config_hash + "," + ",".join(_fmt(v) for v in vals)
        for name, v in sim.metrics:
            lines.append(f"{prefix},{name},{_fmt(v)},{c.n},{c.seed}")
        table.append((vals, dict(sim.metrics), sim.config_hash))
    for metric, pick in SUMMARY:
        scored = [(m[metric], vals, ch) for vals, m, ch in table if metric in m]
        if scored:
            best = pick(scored, key=lambda r: r[0])
            desc = ",".join(f"{p}={_fmt(v)}" for p, v in zip(params, best[1]))
            word = "argmax" if pick is max else "argmin"
            lines.append(f"# {word} {metric}: {desc} value={_fmt(best[0])} config_hash={best[2]}")
    path = out / f"{h[:12]}.sweep.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------------
# Validation


def check_noise_schedule(sched: NoiseSchedule) -> list[tuple[str, bool, str]]:
    return [
        ("noise: 0 < beta_t < 1", bool(np.all((sched.beta > 0) & (sched.beta < 1))), ""),
        ("noise: alpha_bar strictly decreasing", bool(np.all(np.diff(sched.alpha_bar) < 0)), ""),
        ("noise: SNR strictly decreasing", bool(np.all(np.diff(sched.snr) < 0)), ""),
    ]


def check_condition_schedule(s: ConditionSchedule) -> list[tuple[str, bool, str]]:
    t = np.arange(-10 * s.T, 10 * s.T + 1)
    wc, ws = weight_content(s, t), weight_style(s, t)
    inside = bool(np.all((wc >= s.floor) & (wc <= s.ceiling) & (ws >= s.floor) & (ws <= s.ceiling)))
    checks = [(f"condition schedule ({s.kind}): weights within [floor, ceiling]", inside, "")]
    if s.kind == "sigmoid":
        mid = weight_content(s, s.b)
        checks.append(("condition schedule: w_c(b) is the midpoint",
                       abs(mid - 0.5 * (s.floor + s.ceiling)) <= 1e-15, f"w_c(b)={mid!r}"))
    return checks


def check_world(w: World, sched: NoiseSchedule, probes: int = 10, seed: int = 0):
    rng = np.random.default_rng(seed)
    checks = [("world: label weights sum to 1", abs(w.weights.sum() - 1.0) <= 1e-12, "")]
    worst = 0.0
    for t in (-1, sched.T // 2):
        mix = diffuse(marginal_density(w), sched, t)
        xs = mix.means[rng.integers(mix.n_components, size=probes)] + rng.standard_normal((probes, w.dim))
        for x in xs:
            fd = finite_difference_gradient(lambda y: log_density(mix, y), x)
            worst = max(worst, relative_error(score(mix, x), fd))
    checks.append(("world: score matches finite differences", worst < 1e-5, f"max rel err {worst:.2e}"))
    gap = dependence_gap(w)
    label = "independent" if is_independent(w) else "dependent"
    checks.append((f"world: dependence indicator = {label}", True, f"max |pi - outer| = {gap:.3e}"))
    return checks


def check_guidance(cfg: ExperimentConfig, draws: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    g = cfg.guidance
    worst = [0.0, 0.0, 0.0]
    for _ in range(draws):
        u, c, s, j = rng.standard_normal((4, cfg.world.dim))
        g1 = GuidanceConfig(g.alpha, 1.0, g.beta_c, g.beta_s)
        g0 = GuidanceConfig(g.alpha, 0.0, g.beta_c, g.beta_s)
        gcfg = GuidanceConfig(g.alpha, 0.0, 1.0, 0.0)
        worst[0] = max(worst[0], np.max(np.abs(compose_gcdm(u, c, s, j, g1) - compose_joint(u, j, g.alpha))))
        worst[1] = max(worst[1], np.max(np.abs(compose_gcdm(u, c, s, j, g0) - compose_cdm(u, c, s, g0))))
        worst[2] = max(worst[2], np.max(np.abs(compose_gcdm(u, c, s, j, gcfg) - compose_cfg(u, c, g.alpha, 1.0))))
    names = ("lambda=1 gives joint guidance", "lambda=0 gives CDM", "lambda=0, beta_s=0 gives CFG")
    return [(f"guidance: {n}", w <= 1e-12, f"max dev {w:.1e}") for n, w in zip(names, worst)]


def validate(cfg: ExperimentConfig) -> list[tuple[str, bool, str]]:
    sched = cfg.noise_schedule()
    checks = check_noise_schedule(sched)
    if cfg.condition_schedule is not None:
        checks += check_condition_schedule(cfg.condition_schedule)
    checks += check_world(cfg.world, sched)
    checks += check_guidance(cfg)
    steps_ok = cfg.sampler.steps[-1] < sched.T
    checks.append(("sampler: steps inside schedule", steps_ok, f"{len(cfg.sampler.steps)} steps"))
    return checks


def schedule_table(s: ConditionSchedule, sched: NoiseSchedule) -> list[str]:
    t = np.arange(sched.T)
    wc, ws = weight_content(s, t), weight_style(s, t)
    lines = [f"# gcdm condition schedule kind={s.kind} a={s.a!r} b={s.b!r} floor={s.floor!r} "
             f"ceiling={s.ceiling!r} T={s.T}", "t,w_c,w_s,snr"]
    lines += [f"{k},{_fmt(a)},{_fmt(b)},{_fmt(c)}" for k, a, b, c in zip(t, wc, ws, sched.snr)]
    return lines
