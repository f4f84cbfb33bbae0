"""Discrete forward-process noise schedules and condition weight schedules.

Timesteps are integer indices ``t = 0 .. T-1``. Index 0 is the first *noisy*
level, so ``alpha_bar[0] = 1 - beta[0] < 1``. Samplers use ``t = -1`` as the
clean data level (``alpha_bar = 1``); see :func:`alpha_bar_at`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from gcdm.errors import ConstraintError

NOISE_KINDS = ("linear", "cosine")
CONDITION_KINDS = ("sigmoid", "linear", "exclusive", "constant")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Forward-process constants for ``q(x_t | x_{t-1}) = N(sqrt(1-beta_t) x_{t-1}, beta_t I)``.

    Attributes:
        beta: variance increments, shape ``(T,)``.
        alpha_bar: cumulative products of ``1 - beta``.
        sigma: ``sqrt(1 - alpha_bar)``, the marginal noise scale.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ConstraintError("noise schedule needs at least 2 timesteps")
        if not np.all(np.isfinite(beta)) or np.any(beta <= 0) or np.any(beta >= 1):
            raise ConstraintError("every beta_t must lie in (0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        if np.any(np.diff(alpha_bar) >= 0) or alpha_bar[-1] <= 0:
            raise ConstraintError("alpha_bar must be strictly decreasing and positive")
        return cls(_frozen(beta), _frozen(alpha_bar), _frozen(np.sqrt(1.0 - alpha_bar)))

    @property
    def T(self) -> int:
        return int(self.beta.size)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio ``alpha_bar / (1 - alpha_bar)`` per timestep."""
        return self.alpha_bar / (1.0 - self.alpha_bar)


def build_noise_schedule(
    T: int = 1000,
    kind: str = "linear",
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
) -> NoiseSchedule:
    """Build a discrete noise schedule.

    ``linear`` spaces beta evenly between ``beta_min`` and ``beta_max``.
    ``cosine`` follows the squared-cosine ``alpha_bar`` curve (offset 0.008)
    and clips the implied betas to ``[beta_min, beta_max]``; pass a large
    ``beta_max`` (e.g. 0.999) to leave it essentially unclipped.
    """
    if isinstance(T, bool) or int(T) != T or T < 2:
        raise ConstraintError(f"T must be an integer >= 2, got {T!r}")
    T = int(T)
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConstraintError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1.0 + s) * np.pi / 2.0) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ConstraintError(f"unknown noise schedule kind {kind!r}; expected one of {NOISE_KINDS}")
    return NoiseSchedule.from_betas(beta)


def alpha_bar_at(sched: NoiseSchedule, t: int) -> float:
    """``alpha_bar`` at index ``t``, with ``t = -1`` meaning clean data (1.0)."""
    if t == -1:
        return 1.0
    if not 0 <= t < sched.T:
        raise ConstraintError(f"timestep {t} outside [0, {sched.T - 1}]")
    return float(sched.alpha_bar[t])


@dataclass(frozen=True)
class ConditionSchedule:
    """Timestep-dependent weights for the content and style conditions.

    Content weight rises with ``t`` (content dominates the noisy steps) and
    style weight mirrors it. ``floor``/``ceiling`` bound both weights; the
    unbounded sigmoid is ``floor=0, ceiling=1``.
    """

    kind: str = "sigmoid"
    a: float = 0.025
    b: float = 550.0
    floor: float = 0.0
    ceiling: float = 1.0
    T: int = 1000

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ConstraintError(
                f"unknown condition schedule kind {self.kind!r}; expected one of {CONDITION_KINDS}"
            )
        if not 0.0 <= self.floor < self.ceiling <= 1.0:
            raise ConstraintError(
                f"need 0 <= floor < ceiling <= 1, got floor={self.floor}, ceiling={self.ceiling}"
            )
        if self.T < 2:
            raise ConstraintError("condition schedule T must be >= 2")
        if self.kind == "sigmoid" and not np.isfinite(self.a):
            raise ConstraintError("sigmoid slope a must be finite")


def _ramp(s: ConditionSchedule, t, rising: bool):
    t = np.asarray(t, dtype=np.float64)
    span = s.ceiling - s.floor
    if s.kind == "sigmoid":
        # expit is overflow-free for any |a (t - b)|
        z = s.a * (t - s.b) if rising else s.a * (s.b - t)
        out = s.floor + span * expit(z)
    elif s.kind == "linear":
        frac = np.clip(t / (s.T - 1), 0.0, 1.0)
        out = s.floor + span * (frac if rising else 1.0 - frac)
    elif s.kind == "exclusive":
        on = t > s.b if rising else t <= s.b
        out = np.where(on, s.ceiling, s.floor)
    else:
        out = np.full_like(t, 0.5 * (s.floor + s.ceiling))
    return out if out.ndim else float(out)


def weight_content(s: ConditionSchedule, t):
    """Content weight ``w_c(t)``; scalar in, scalar out, arrays broadcast."""
    return _ramp(s, t, rising=True)


def weight_style(s: ConditionSchedule, t):
    """Style weight ``w_s(t)``, the mirror image of :func:`weight_content`."""
    return _ramp(s, t, rising=False)
