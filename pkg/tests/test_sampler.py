import math

import numpy as np
import pytest

from gcdm.errors import ConstraintError
from gcdm.guidance import GuidanceConfig, GuidedField, unconditional_field
from gcdm.sampler import (
    BLOCK,
    SamplerConfig,
    ddim_generate,
    ddim_sigma,
    ddim_step,
    ddpm_step,
    predict_x0,
    replay_error,
    reverse_ddim,
    run,
    uniform_steps,
)
from gcdm.schedule import NoiseSchedule, alpha_bar_at, build_noise_schedule
from gcdm.world import World, marginal_density
from gcdm.worldfile import load_world
from oracles import ddim_gaussian_gain

SCHED = build_noise_schedule()
STEPS100 = uniform_steps(1000, 100)
ALL = tuple(range(1000))


def gaussian_world(mean, var):
    mean = np.atleast_1d(np.asarray(mean, float))
    d = mean.size
    cov = np.atleast_2d(np.asarray(var, float)) * (np.eye(d) if np.ndim(var) == 0 else 1)
    return World(np.ones((1, 1)), mean[None, None], cov[None, None])


def plain(world, g=GuidanceConfig(0.0, 0.0, 0.5, 0.5)):
    return GuidedField(world, SCHED, g, 0, 0)


def test_uniform_steps():
    s = uniform_steps(1000, 100)
    assert len(s) == 100 and s[0] == 0 and s[-1] == 999
    assert all(b > a for a, b in zip(s, s[1:]))
    assert uniform_steps(1000, 1000) == ALL
    with pytest.raises(ConstraintError):
        uniform_steps(1000, 1)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"steps": (5, 3)},
        {"steps": (0, 0, 1)},
        {"steps": ()},
        {"kind": "euler", "steps": (0, 1)},
        {"kind": "ddpm", "steps": (0, 2, 4)},
        {"start": "sdedit", "steps": (0, 1)},
        {"start": "inverted", "eta": 0.5, "steps": (0, 1)},
        {"eta": -1.0, "steps": (0, 1)},
        {"start": "middle", "steps": (0, 1)},
    ],
)
def test_invalid_sampler_configs(kwargs):
    with pytest.raises(ConstraintError):
        SamplerConfig(**kwargs)


def test_steps_beyond_schedule():
    with pytest.raises(ConstraintError):
        SamplerConfig(steps=(0, 1000)).check(SCHED)


def test_sdedit_snaps_to_nearest_step():
    cfg = SamplerConfig(steps=STEPS100, start="sdedit", t0=600)
    assert STEPS100[cfg.start_index()] in (595, 605)
    assert abs(STEPS100[cfg.start_index()] - 600) == min(abs(s - 600) for s in STEPS100)


def test_predict_x0():
    assert predict_x0(math.sqrt(0.25) * 2.0, 0.0, 0.25) == 2.0


def test_tiny_beta_step_is_identity():
    s = NoiseSchedule.from_betas([1e-14, 2e-14, 3e-14])
    x = np.array([0.7, -1.2])
    out = ddpm_step(x, np.array([5.0, -3.0]), 2, s, noise=np.array([1.0, 1.0]))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_ddpm_last_step_returns_mean():
    x, eps = np.array([1.0]), np.array([0.5])
    out = ddpm_step(x, eps, 0, SCHED, rng=None)
    assert out[0] == pytest.approx(predict_x0(x, eps, SCHED.alpha_bar[0])[0], rel=1e-14)


def test_step_argument_checks():
    with pytest.raises(ConstraintError):
        ddim_step(np.zeros(1), np.zeros(1), 10, 10, 0.0, SCHED)
    with pytest.raises(ConstraintError):
        ddpm_step(np.zeros(1), np.zeros(1), 1000, SCHED)


def test_ddim_with_eta_one_matches_ddpm_variance():
    # eta = 1 on adjacent steps reproduces the DDPM posterior variance
    t = 500
    a, ap = SCHED.alpha_bar[t], SCHED.alpha_bar[t - 1]
    expect = (1 - ap) / (1 - a) * SCHED.beta[t]
    assert ddim_sigma(SCHED, t, t - 1, 1.0) ** 2 == pytest.approx(expect, rel=1e-12)


def test_ddim_is_affine_for_gaussian():
    f = unconditional_field(gaussian_world([1.0, -2.0], [[2.0, 0.3], [0.3, 0.5]]), SCHED)
    x = np.random.default_rng(0).normal(size=(3, 2))
    gen = lambda v: ddim_generate(v, f, SCHED, STEPS100)  # noqa: E731
    o = gen(np.zeros((1, 2)))
    lhs = gen(x[:1] + 2 * x[1:2]) - o
    rhs = (gen(x[:1]) - o) + 2 * (gen(x[1:2]) - o)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("var", [0.25, 1.0, 9.0])
def test_ddim_gain_matches_closed_form(var):
    f = unconditional_field(gaussian_world(0.0, var), SCHED)
    x = np.array([[1.0], [-2.5]])
    levels = [alpha_bar_at(SCHED, t) for t in STEPS100[::-1]] + [1.0]
    gain = ddim_gaussian_gain(levels, var)
    np.testing.assert_allclose(ddim_generate(x, f, SCHED, STEPS100), gain * x, rtol=1e-12)
    # delivered variance from the exact x_T marginal: the coarse chain falls
    # short of the target, the full chain much less so
    a_T = SCHED.alpha_bar[-1]
    start = a_T * var + 1 - a_T
    full = ddim_gaussian_gain([alpha_bar_at(SCHED, t) for t in ALL[::-1]] + [1.0], var)
    assert gain**2 * start < full**2 * start < var
    assert 1 - full**2 * start / var < 0.25 * (1 - gain**2 * start / var)


def test_ddpm_single_gaussian_moments():
    n = 100_000
    res = run(plain(gaussian_world(1.0, 4.0)), SamplerConfig("ddpm", steps=ALL), n, seed=3)
    x = res.samples[:, 0]
    assert abs(x.mean() - 1.0) < 4 * 2.0 / math.sqrt(n)
    assert abs(x.var(ddof=1) - 4.0) < 4 * 4.0 / math.sqrt(n)


def test_fixed_seed_is_deterministic():
    w = load_world("builtin:dependent")
    for cfg in (SamplerConfig("ddpm", steps=ALL[:200]), SamplerConfig("ddim", 0.5, STEPS100)):
        a = run(plain(w), cfg, 300, seed=1).samples
        b = run(plain(w), cfg, 300, seed=1).samples
        c = run(plain(w), cfg, 300, seed=2).samples
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


@pytest.mark.parametrize("cfg", [SamplerConfig("ddpm", steps=ALL[:300]), SamplerConfig("ddim", 0.3, STEPS100)])
def test_jobs_and_prefix_invariance(cfg):
    w = load_world("builtin:independent")
    f = plain(w, GuidanceConfig(1.5, 0.5, 0.5, 0.5))
    n = 2 * BLOCK + 100
    one = run(f, cfg, n, seed=5).samples
    three = run(f, cfg, n, seed=5, jobs=3).samples
    shorter = run(f, cfg, BLOCK + 7, seed=5).samples
    assert np.array_equal(one, three)
    assert np.array_equal(one[: BLOCK + 7], shorter)


def test_stride_ten_agrees_with_full_ddim():
    for name in ("independent", "dependent"):
        f = plain(load_world(f"builtin:{name}"))
        a = run(f, SamplerConfig("ddim", steps=STEPS100), 20_000, seed=0).samples
        b = run(f, SamplerConfig("ddim", steps=ALL), 20_000, seed=0).samples
        assert np.all(np.abs(a.mean(0) - b.mean(0)) < 0.05)


def test_alpha_zero_run_matches_data_moments():
    w = load_world("builtin:independent")
    n = 20_000
    x = run(plain(w), SamplerConfig("ddpm", steps=ALL), n, seed=8).samples
    m = marginal_density(w)
    sd = np.sqrt(np.diag(m.covariance()))
    assert np.all(np.abs(x.mean(0) - m.mean()) < 4 * sd / math.sqrt(n))


def test_reverse_ddim_single_gaussian_exact():
    w = gaussian_world([0.5, -1.0], [[1.3, 0.4], [0.4, 0.8]])
    f = unconditional_field(w, SCHED)
    x0 = np.random.default_rng(1).normal(size=(50, 2))
    xT = reverse_ddim(x0, f, SCHED, STEPS100)
    back = ddim_generate(xT, f, SCHED, STEPS100)
    assert np.max(np.abs(back - x0)) / np.max(np.abs(x0)) < 1e-9


def test_reverse_ddim_fixture_round_trip():
    w = load_world("builtin:dependent")
    f = unconditional_field(w, SCHED)
    x0 = np.random.default_rng(2).normal(0, 2, size=(50, 2))
    back = ddim_generate(reverse_ddim(x0, f, SCHED, STEPS100), f, SCHED, STEPS100)
    assert np.linalg.norm(back - x0) / np.linalg.norm(x0) < 1e-3


def test_one_shot_inversion_is_worse():
    w = load_world("builtin:dependent")
    f = unconditional_field(w, SCHED)
    x0 = np.random.default_rng(2).normal(0, 2, size=(50, 2))
    exact = ddim_generate(reverse_ddim(x0, f, SCHED, STEPS100), f, SCHED, STEPS100)
    naive = ddim_generate(reverse_ddim(x0, f, SCHED, STEPS100, max_iter=0), f, SCHED, STEPS100)
    assert np.linalg.norm(exact - x0) < np.linalg.norm(naive - x0)


def test_reverse_ddim_empty_steps():
    x0 = np.array([[1.0, 2.0]])
    assert np.array_equal(reverse_ddim(x0, None, SCHED, ()), x0)


def test_sdedit_zero_returns_reference():
    w = load_world("builtin:dependent")
    ref = np.random.default_rng(4).normal(size=(10, 2))
    cfg = SamplerConfig("ddim", steps=STEPS100, start="sdedit", t0=0)
    out = run(plain(w, GuidanceConfig()), cfg, 10, seed=0, x0=ref).samples
    assert np.array_equal(out, ref)


def test_sdedit_and_inverted_need_reference():
    f = plain(load_world("builtin:dependent"))
    with pytest.raises(ConstraintError):
        run(f, SamplerConfig(steps=STEPS100, start="sdedit", t0=500), 4, 0)
    with pytest.raises(ConstraintError):
        run(f, SamplerConfig(steps=STEPS100, start="sdedit", t0=500), 4, 0, x0=np.zeros((3, 2)))


def test_sdedit_single_reference_broadcasts():
    f = plain(load_world("builtin:dependent"), GuidanceConfig())
    cfg = SamplerConfig(steps=STEPS100, start="sdedit", t0=600)
    res = run(f, cfg, 64, seed=0, x0=np.array([0.0, 3.0]))
    assert res.samples.shape == (64, 2)
    assert len(np.unique(res.samples[:, 0])) == 64


def test_inverted_start_reconstructs_with_unconditional_field():
    w = load_world("builtin:independent")
    ref = np.random.default_rng(6).normal(0, 2, size=(20, 2))
    cfg = SamplerConfig("ddim", steps=STEPS100, start="inverted")
    res = run(plain(w), cfg, 20, seed=0, x0=ref)
    assert np.linalg.norm(res.samples - ref) / np.linalg.norm(ref) < 1e-3


@pytest.mark.parametrize(
    "cfg",
    [SamplerConfig("ddpm", steps=ALL[:150]), SamplerConfig("ddim", 0.0, STEPS100), SamplerConfig("ddim", 0.7, STEPS100)],
)
def test_trajectory_replay(cfg):
    f = plain(load_world("builtin:dependent"), GuidanceConfig())
    res = run(f, cfg, BLOCK + 3, seed=9, record=True, jobs=2)
    tr = res.trajectory
    assert tr.n == BLOCK + 3
    assert tr.ts[-1] == -1 and len(tr.states) == len(tr.ts)
    assert np.array_equal(tr.states[-1], res.samples)
    assert replay_error(tr, SCHED) == 0.0
    assert set(tr.terms) == {"eps_u", "eps_c", "eps_s", "eps_j", "composite"}
