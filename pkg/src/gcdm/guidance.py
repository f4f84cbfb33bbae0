"""Epsilon oracles and the guidance composition algebra.

Sign convention: ``eps(x, t) = -sigma_t * grad_x log p_t(x)``, i.e. the DDPM
noise-prediction parameterisation. Every composition below is an affine
combination whose coefficients sum to one, so it commutes with that scaling
and the composite ``-eps / sigma_t`` is the score of the tilted density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gcdm.errors import ConstraintError
from gcdm.schedule import ConditionSchedule, NoiseSchedule, weight_content, weight_style
from gcdm.world import (
    UNCONDITIONAL,
    GaussianMixture,
    Selector,
    World,
    conditional_density,
    content,
    diffuse,
    joint,
    score,
    style,
    tilted_density,
)

BETA_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GuidanceConfig:
    """Strengths of a GCDM composition.

    Attributes:
        alpha: overall guidance strength, ``alpha >= 0``.
        lam: weight of the joint term against the independent terms, in ``[0, 1]``.
        beta_c: content weight inside the independent terms.
        beta_s: style weight inside the independent terms; ``beta_c + beta_s = 1``.
    """

    alpha: float = 1.5
    lam: float = 0.9
    beta_c: float = 0.0
    beta_s: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "lam", "beta_c", "beta_s"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ConstraintError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(value))
        if self.alpha < 0:
            raise ConstraintError(f"alpha must be >= 0 (guidance strength), got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConstraintError(f"lambda must lie in [0, 1], got {self.lam}")
        for name in ("beta_c", "beta_s"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConstraintError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if abs(self.beta_c + self.beta_s - 1.0) > BETA_SUM_TOL:
            raise ConstraintError(
                "beta_c + beta_s must equal 1 (the per-condition weights of a GCDM "
                f"composition are a convex pair), got {self.beta_c} + {self.beta_s} "
                f"= {self.beta_c + self.beta_s}"
            )

    @classmethod
    def from_beta_s(cls, alpha: float, lam: float, beta_s: float) -> "GuidanceConfig":
        return cls(alpha=alpha, lam=lam, beta_c=1.0 - beta_s, beta_s=beta_s)


@dataclass(frozen=True, eq=False)
class EpsilonOracle:
    """Exact noise prediction for one density of a world."""

    world: World
    schedule: NoiseSchedule
    selector: Selector = UNCONDITIONAL
    density: GaussianMixture = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "density", conditional_density(self.world, self.selector))

    def __call__(self, x, t: int):
        return epsilon(self, x, t)


def epsilon(o: EpsilonOracle, x, t: int):
    """``-sigma_t * score(diffused density at t, x)``."""
    if not 0 <= t < o.schedule.T:
        raise ConstraintError(f"timestep {t} outside [0, {o.schedule.T - 1}]")
    return -o.schedule.sigma[t] * score(diffuse(o.density, o.schedule, t), x)


def compose_cfg(eps_u, eps_c, alpha: float, beta: float = 1.0):
    """Classifier-free guidance: ``eps_u + alpha * beta * (eps_c - eps_u)``."""
    return eps_u + alpha * beta * (eps_c - eps_u)


def compose_cdm(eps_u, eps_c, eps_s, g: GuidanceConfig):
    """Independent (product-of-conditionals) guidance over the two labels."""
    return eps_u + g.alpha * (g.beta_c * (eps_c - eps_u) + g.beta_s * (eps_s - eps_u))


def compose_joint(eps_u, eps_j, alpha: float):
    return eps_u + alpha * (eps_j - eps_u)


def compose_gcdm(eps_u, eps_c, eps_s, eps_j, g: GuidanceConfig):
    """Unconditional term plus ``alpha`` times a ``lam``-convex mix of the joint
    guidance term and the ``beta``-weighted independent guidance terms."""
    independent = g.beta_c * (eps_c - eps_u) + g.beta_s * (eps_s - eps_u)
    return eps_u + g.alpha * (g.lam * (eps_j - eps_u) + (1.0 - g.lam) * independent)


def scheduled_conditionals(eps_u, eps_c, eps_s, s: ConditionSchedule, t):
    """Pull single-condition predictions toward ``eps_u`` by ``w_c(t)``, ``w_s(t)``."""
    w_c = weight_content(s, t)
    w_s = weight_style(s, t)
    return eps_u + w_c * (eps_c - eps_u), eps_u + w_s * (eps_s - eps_u)


TERMS = ("eps_u", "eps_c", "eps_s", "eps_j", "composite")


@dataclass(frozen=True, eq=False)
class GuidedField:
    """Composite noise prediction for a fixed label pair.

    ``condition_schedule`` (optional) reweights only the single-condition
    predictions; the joint prediction is left unscheduled.
    """

    world: World
    schedule: NoiseSchedule
    guidance: GuidanceConfig
    content_label: int
    style_label: int
    condition_schedule: ConditionSchedule | None = None
    oracles: dict = field(init=False, repr=False)

    def __post_init__(self):
        i, j = self.content_label, self.style_label
        sels = {
            "eps_u": UNCONDITIONAL,
            "eps_c": content(i),
            "eps_s": style(j),
            "eps_j": joint(i, j),
        }
        object.__setattr__(
            self, "oracles", {k: EpsilonOracle(self.world, self.schedule, s) for k, s in sels.items()}
        )

    def _needed(self) -> set[str]:
        g = self.guidance
        need = {"eps_u"}
        if g.alpha != 0:
            if g.lam != 0:
                need.add("eps_j")
            if g.lam != 1:
                if g.beta_c != 0:
                    need.add("eps_c")
                if g.beta_s != 0:
                    need.add("eps_s")
        return need

    def terms(self, x, t: int, all_terms: bool = True) -> dict:
        """All predictions at ``(x, t)`` plus the composite.

        With ``all_terms=False`` predictions whose coefficient is exactly zero
        are replaced by ``eps_u``; the composite is bit-identical either way.
        """
        need = set(self.oracles) if all_terms else self._needed()
        out = {k: epsilon(self.oracles[k], x, t) for k in sorted(need)}
        eps_u = out["eps_u"]
        for k in self.oracles:
            out.setdefault(k, eps_u)
        eps_c, eps_s = out["eps_c"], out["eps_s"]
        if self.condition_schedule is not None:
            eps_c, eps_s = scheduled_conditionals(eps_u, eps_c, eps_s, self.condition_schedule, t)
        out["composite"] = compose_gcdm(eps_u, eps_c, eps_s, out["eps_j"], self.guidance)
        return out

    def __call__(self, x, t: int):
        return self.terms(x, t, all_terms=False)["composite"]


def unconditional_field(world: World, sched: NoiseSchedule) -> EpsilonOracle:
    return EpsilonOracle(world, sched, UNCONDITIONAL)


def finite_difference_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        grad.flat[k] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def gcdm_log_density_gradient_check(
    w: World,
    sched: NoiseSchedule,
    g: GuidanceConfig,
    t: int,
    i: int,
    j: int,
    probes: int = 100,
    rng: np.random.Generator | None = None,
    h: float = 1e-5,
) -> float:
    """Worst relative gap between the composite GCDM score and the numerical
    gradient of the tilted log-density, over random probes near the data at ``t``."""
    rng = np.random.default_rng(0) if rng is None else rng
    field_ = GuidedField(w, sched, g, i, j)
    log_p = tilted_density(w, sched, t, g, i, j)
    spread = diffuse(conditional_density(w, UNCONDITIONAL), sched, t)
    xs = spread.means[rng.integers(spread.n_components, size=probes)]
    xs = xs + 1.5 * rng.standard_normal(xs.shape)
    composite_score = -field_.terms(xs, t)["composite"] / sched.sigma[t]
    worst = 0.0
    for x, s in zip(xs, composite_score):
        worst = max(worst, relative_error(s, finite_difference_gradient(log_p, x, h)))
    return worst
