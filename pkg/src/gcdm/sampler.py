"""Reverse-process integrators driven by an arbitrary noise-prediction field.

A field is any callable ``field(x, t) -> eps`` on batches ``x`` of shape
``(n, d)``. Timesteps follow :mod:`gcdm.schedule`: states live at indices
``steps[k]`` and the final update always lands on clean data (``t = -1``),
returning the predicted ``x_0`` with no added noise.

Randomness: trajectories are grouped into fixed blocks of :data:`BLOCK`
consecutive indices and each block owns a generator seeded by
``SeedSequence(seed, spawn_key=(block,))``. Every draw pulls a full block, so
the noise seen by trajectory ``k`` depends only on ``(seed, k)``, never on
``n``, chunking, or the number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gcdm.errors import ConstraintError
from gcdm.schedule import NoiseSchedule, alpha_bar_at

BLOCK = 1024
STARTS = ("pure_noise", "sdedit", "inverted")
KINDS = ("ddpm", "ddim")

Field = Callable[[np.ndarray, int], np.ndarray]


def uniform_steps(T: int, num_steps: int) -> tuple[int, ...]:
    """``num_steps`` evenly strided timesteps including ``0`` and ``T - 1``."""
    if not 2 <= num_steps <= T:
        raise ConstraintError(f"num_steps must be in [2, {T}], got {num_steps}")
    return tuple(int(t) for t in np.round(np.linspace(0, T - 1, num_steps)).astype(int))


@dataclass(frozen=True)
class SamplerConfig:
    """Integrator choice and start mode.

    ``steps`` is strictly increasing; generation walks it backwards.
    ``t0`` is the SDEdit start timestep in original-schedule units and is
    snapped to the nearest member of ``steps``. ``t0 = 0`` means no edit.
    """

    kind: str = "ddim"
    eta: float = 0.0
    steps: tuple[int, ...] = ()
    start: str = "pure_noise"
    t0: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        if self.kind not in KINDS:
            raise ConstraintError(f"sampler kind must be one of {KINDS}, got {self.kind!r}")
        if self.start not in STARTS:
            raise ConstraintError(f"start must be one of {STARTS}, got {self.start!r}")
        if not self.steps:
            raise ConstraintError("sampler step list is empty")
        if self.steps[0] < 0 or any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ConstraintError("sampler steps must be nonnegative and strictly increasing")
        if not math.isfinite(self.eta) or self.eta < 0:
            raise ConstraintError(f"eta must be >= 0, got {self.eta}")
        if self.kind == "ddpm" and self.steps != tuple(range(self.steps[-1] + 1)):
            raise ConstraintError("ddpm sampling needs the contiguous step list 0..t_max")
        if self.start == "sdedit" and self.t0 is None:
            raise ConstraintError("sdedit start needs t0")
        if self.start == "inverted" and (self.kind != "ddim" or self.eta != 0):
            raise ConstraintError("inverted start needs deterministic ddim (eta = 0)")

    def check(self, sched: NoiseSchedule) -> None:
        if self.steps[-1] >= sched.T:
            raise ConstraintError(f"sampler step {self.steps[-1]} beyond schedule T={sched.T}")
        if self.t0 is not None and not 0 <= self.t0 < sched.T:
            raise ConstraintError(f"t0={self.t0} outside [0, {sched.T - 1}]")

    def start_index(self) -> int:
        """Index into ``steps`` where generation begins."""
        if self.start != "sdedit":
            return len(self.steps) - 1
        steps = np.asarray(self.steps)
        return int(np.argmin(np.abs(steps - self.t0)))


# --------------------------------------------------------------------------
# Single updates


def predict_x0(x_t, eps, alpha_bar: float):
    return (x_t - math.sqrt(1.0 - alpha_bar) * eps) / math.sqrt(alpha_bar)


def ddpm_step(x_t, eps, t: int, sched: NoiseSchedule, rng=None, noise=None):
    """Ancestral step ``x_t -> x_{t-1}``.

    Uses the posterior variance ``(1 - abar_{t-1}) / (1 - abar_t) * beta_t``.
    At ``t = 0`` that variance is zero and the step returns the predicted
    clean sample.
    """
    if not 0 <= t < sched.T:
        raise ConstraintError(f"timestep {t} outside [0, {sched.T - 1}]")
    beta = sched.beta[t]
    abar, abar_prev = alpha_bar_at(sched, t), alpha_bar_at(sched, t - 1)
    mean = (x_t - beta / sched.sigma[t] * eps) / math.sqrt(1.0 - beta)
    var = (1.0 - abar_prev) / (1.0 - abar) * beta
    if var == 0.0:
        return mean
    if noise is None:
        noise = rng.standard_normal(np.shape(x_t))
    return mean + math.sqrt(var) * noise


def ddim_sigma(sched: NoiseSchedule, t_from: int, t_to: int, eta: float) -> float:
    a_from, a_to = alpha_bar_at(sched, t_from), alpha_bar_at(sched, t_to)
    return eta * math.sqrt((1.0 - a_to) / (1.0 - a_from) * (1.0 - a_from / a_to))


def ddim_step(x_t, eps, t_from: int, t_to: int, eta: float, sched: NoiseSchedule, rng=None, noise=None):
    """Generalised DDIM update from ``t_from`` down to ``t_to`` (``-1`` = clean)."""
    if t_to >= t_from:
        raise ConstraintError(f"ddim step must decrease t, got {t_from} -> {t_to}")
    a_from, a_to = alpha_bar_at(sched, t_from), alpha_bar_at(sched, t_to)
    x0 = predict_x0(x_t, eps, a_from)
    s = ddim_sigma(sched, t_from, t_to, eta)
    out = math.sqrt(a_to) * x0 + math.sqrt(max(1.0 - a_to - s * s, 0.0)) * eps
    if s > 0.0:
        if noise is None:
            noise = rng.standard_normal(np.shape(x_t))
        out = out + s * noise
    return out


def _invert_ddim_step(y, eps, t_lo: int, t_hi: int, sched: NoiseSchedule):
    """Solve ``ddim_step(x, eps, t_hi, t_lo, 0) = y`` for ``x`` given ``eps``."""
    a_lo, a_hi = alpha_bar_at(sched, t_lo), alpha_bar_at(sched, t_hi)
    return math.sqrt(a_hi / a_lo) * (y - math.sqrt(1.0 - a_lo) * eps) + math.sqrt(1.0 - a_hi) * eps


def reverse_ddim(
    x0,
    eps_field: Field,
    sched: NoiseSchedule,
    steps,
    max_iter: int = 100,
    tol: float = 1e-13,
):
    """Deterministic DDIM inversion: clean ``x0`` up to the latent at ``steps[-1]``.

    Each update is the exact inverse of the matching eta=0 DDIM step. The
    implicit equation (``eps`` is evaluated at the unknown point) is solved by
    fixed-point iteration seeded with the explicit inversion; ``max_iter=0``
    gives the classic one-shot inversion.
    """
    x = np.array(x0, dtype=np.float64)
    prev = -1
    for t in steps:
        x_new = _invert_ddim_step(x, eps_field(x, t), prev, t, sched)
        for _ in range(max_iter):
            x_next = _invert_ddim_step(x, eps_field(x_new, t), prev, t, sched)
            delta = np.max(np.abs(x_next - x_new))
            x_new = x_next
            if delta <= tol * (1.0 + np.max(np.abs(x_new))):
                break
        x, prev = x_new, t
    return x


def ddim_generate(x_T, eps_field: Field, sched: NoiseSchedule, steps):
    """Deterministic (eta = 0) DDIM from ``steps[-1]`` down to clean data."""
    x = np.array(x_T, dtype=np.float64)
    ts = list(steps)[::-1] + [-1]
    for t_from, t_to in zip(ts, ts[1:]):
        x = ddim_step(x, eps_field(x, t_from), t_from, t_to, 0.0, sched)
    return x


# --------------------------------------------------------------------------
# Batched runs


class BlockNoise:
    """Standard normal draws for trajectories ``[lo, hi)`` from per-block streams."""

    def __init__(self, seed: int, lo: int, hi: int, dim: int):
        self.first = lo // BLOCK
        last = -(-hi // BLOCK)
        self.offset = lo - self.first * BLOCK
        self.count = hi - lo
        self.dim = dim
        self.gens = [
            np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(b,))))
            for b in range(self.first, last)
        ]

    def draw(self) -> np.ndarray:
        full = np.concatenate([g.standard_normal((BLOCK, self.dim)) for g in self.gens])
        return full[self.offset : self.offset + self.count]


@dataclass
class Trajectory:
    """Recorded sampler path for a batch of ``n`` trajectories.

    ``ts[k]`` is the timestep of ``states[k]`` (decreasing, ending at ``-1`` for
    clean data); ``terms[name][k]`` holds the predictions used for the update
    ``states[k] -> states[k + 1]`` and ``noise[k]`` the Gaussian draw (``None``
    for deterministic updates).
    """

    kind: str
    eta: float
    ts: list[int]
    states: list[np.ndarray]
    terms: dict[str, list[np.ndarray]] = field(default_factory=dict)
    noise: list[np.ndarray | None] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.states[0].shape[0]


@dataclass
class RunResult:
    samples: np.ndarray
    trajectory: Trajectory | None = None
    x_start: np.ndarray | None = None


def _update(kind, x, eps, t_from, t_to, eta, sched, noise):
    if kind == "ddpm":
        return ddpm_step(x, eps, t_from, sched, noise=noise)
    return ddim_step(x, eps, t_from, t_to, eta, sched, noise=noise)


def _needs_noise(kind, t_from, t_to, eta, sched) -> bool:
    if kind == "ddpm":
        return t_from > 0
    return ddim_sigma(sched, t_from, t_to, eta) > 0.0


def _run_chunk(guided, sched, cfg: SamplerConfig, lo, hi, seed, x0, inversion_field, record):
    rng = BlockNoise(seed, lo, hi, guided.world.dim)
    k0 = cfg.start_index()
    steps = cfg.steps
    if cfg.start == "pure_noise":
        x = rng.draw()
    elif cfg.start == "sdedit":
        ref = x0[lo:hi]
        if cfg.t0 == 0:
            return ref.copy(), None, ref.copy()
        t_start = steps[k0]
        abar = alpha_bar_at(sched, t_start)
        x = math.sqrt(abar) * ref + math.sqrt(1.0 - abar) * rng.draw()
    else:
        x = reverse_ddim(x0[lo:hi], inversion_field, sched, steps)
    x_start = x.copy()
    ts = list(steps[: k0 + 1])[::-1] + [-1]
    traj = None
    if record:
        traj = Trajectory(cfg.kind, cfg.eta, ts, [x.copy()], {}, [])
    for t_from, t_to in zip(ts, ts[1:]):
        if record:
            terms = guided.terms(x, t_from)
            eps = terms["composite"]
        else:
            eps = guided(x, t_from)
        noise = rng.draw() if _needs_noise(cfg.kind, t_from, t_to, cfg.eta, sched) else None
        x = _update(cfg.kind, x, eps, t_from, t_to, cfg.eta, sched, noise)
        if record:
            for name, value in terms.items():
                traj.terms.setdefault(name, []).append(value)
            traj.noise.append(noise)
            traj.states.append(x.copy())
    return x, traj, x_start


def _merge(trajs: list[Trajectory]) -> Trajectory:
    first = trajs[0]
    cat = lambda arrs: np.concatenate(arrs, axis=0)  # noqa: E731
    return Trajectory(
        first.kind,
        first.eta,
        list(first.ts),
        [cat([tr.states[k] for tr in trajs]) for k in range(len(first.states))],
        {name: [cat([tr.terms[name][k] for tr in trajs]) for k in range(len(vals))]
         for name, vals in first.terms.items()},
        [None if v is None else cat([tr.noise[k] for tr in trajs]) for k, v in enumerate(first.noise)],
    )


def run(
    guided,
    cfg: SamplerConfig,
    n: int,
    seed: int,
    x0=None,
    jobs: int = 1,
    record: bool = False,
    inversion_field: Field | None = None,
) -> RunResult:
    """Draw ``n`` guided samples.

    Args:
        guided: a :class:`gcdm.guidance.GuidedField` (or any field with the
            same ``__call__``/``terms`` interface and ``schedule``/``world``
            attributes).
        cfg: sampler configuration.
        n: number of trajectories.
        seed: root seed; see the module docstring for the stream layout.
        x0: ``(n, d)`` or ``(d,)`` reference points for ``sdedit``/``inverted`` starts.
        jobs: worker threads; results do not depend on it.
        record: keep the full :class:`Trajectory`.
        inversion_field: field used by the ``inverted`` start; defaults to the
            unconditional prediction.
    """
    if n < 1:
        raise ConstraintError("n must be >= 1")
    sched = guided.schedule
    cfg.check(sched)
    if cfg.start != "pure_noise":
        if x0 is None:
            raise ConstraintError(f"{cfg.start} start needs reference points x0")
        x0 = np.asarray(x0, dtype=np.float64)
        x0 = np.broadcast_to(x0, (n, x0.shape[-1])) if x0.ndim == 1 or x0.shape[0] == 1 else x0
        if x0.shape[0] != n:
            raise ConstraintError(f"x0 has {x0.shape[0]} rows, expected 1 or {n}")
    if cfg.start == "inverted" and inversion_field is None:
        inversion_field = guided.oracles["eps_u"]
    n_blocks = -(-n // BLOCK)
    jobs = max(1, min(int(jobs), n_blocks))
    edges = [round(b * n_blocks / jobs) * BLOCK for b in range(jobs + 1)]
    chunks = [(lo, min(hi, n)) for lo, hi in zip(edges, edges[1:]) if lo < min(hi, n)]
    work = lambda c: _run_chunk(guided, sched, cfg, c[0], c[1], seed, x0, inversion_field, record)  # noqa: E731
    if jobs == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, chunks))
    samples = np.concatenate([p[0] for p in parts])
    starts = np.concatenate([p[2] for p in parts])
    traj = None
    if record and parts[0][1] is not None:
        traj = _merge([p[1] for p in parts])
    return RunResult(samples, traj, starts)


def replay_error(traj: Trajectory, sched: NoiseSchedule) -> float:
    """Max abs gap when re-deriving each recorded transition from its records."""
    worst = 0.0
    for k, (t_from, t_to) in enumerate(zip(traj.ts, traj.ts[1:])):
        x_next = _update(
            traj.kind, traj.states[k], traj.terms["composite"][k], t_from, t_to,
            traj.eta, sched, traj.noise[k],
        )
        worst = max(worst, float(np.max(np.abs(x_next - traj.states[k + 1]))))
    return worst
