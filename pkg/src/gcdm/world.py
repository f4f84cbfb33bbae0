"""Analytic Gaussian-mixture worlds over ``(x, content label, style label)``.

A :class:`World` assigns a joint label weight ``pi[i, j]`` and a Gaussian
component ``N(mu_ij, Sigma_ij)`` to every (content, style) pair. Every
marginal and conditional density of ``x`` is then a Gaussian mixture, and so
is its diffused version at any noise level, which gives closed-form scores
for every term that guidance needs.

All mixture arithmetic is done in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from gcdm.errors import ConstraintError
from gcdm.schedule import NoiseSchedule, alpha_bar_at

WEIGHT_TOL = 1e-12
_LOG_2PI = math.log(2.0 * math.pi)


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Finite Gaussian mixture with full covariances.

    Covariances are validated SPD by Cholesky factorisation at construction;
    the factors, precisions and log normalisers are cached on the instance.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    precisions: np.ndarray = field(init=False, repr=False)
    log_norm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        K, d = mu.shape
        cov = np.asarray(self.covs, dtype=np.float64).reshape(K, d, d)
        if w.size != K:
            raise ConstraintError(f"{w.size} weights for {K} components")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ConstraintError("mixture weights must be finite and nonnegative")
        if abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
            raise ConstraintError(f"mixture weights sum to {math.fsum(w)!r}, not 1")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(cov)):
            raise ConstraintError("means and covariances must be finite")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ConstraintError("covariances must be symmetric")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConstraintError("every covariance must be positive definite") from exc
        Linv = np.linalg.inv(L)
        prec = np.swapaxes(Linv, 1, 2) @ Linv
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        with np.errstate(divide="ignore"):
            log_w = np.log(w)
        for name, value in (
            ("weights", w),
            ("means", mu),
            ("covs", cov),
            ("chol", L),
            ("precisions", prec),
            ("log_norm", log_w - 0.5 * (d * _LOG_2PI + logdet)),
        ):
            object.__setattr__(self, name, _readonly(value))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        """Total covariance by the law of total variance."""
        m = self.mean()
        centred = self.means - m
        return np.einsum("k,kde->de", self.weights, self.covs) + np.einsum(
            "k,kd,ke->de", self.weights, centred, centred
        )


def gaussian(mean, cov) -> GaussianMixture:
    """Single-component mixture."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.asarray(cov, dtype=np.float64).reshape(mean.size, mean.size)
    return GaussianMixture(np.ones(1), mean[None], cov[None])


def _as_points(g: GaussianMixture, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 0 or (x.ndim == 1 and x.size == g.dim)
    pts = x.reshape(-1, g.dim)
    return pts, single


def _component_terms(g: GaussianMixture, pts: np.ndarray):
    """Per-component log terms ``(K, n)`` and precision-weighted offsets ``(K, d, n)``.

    Works on the transposed ``(d, n)`` layout so each operation streams over
    contiguous rows; this is the sampler's hot path.
    """
    xt = np.ascontiguousarray(pts.T)
    K, n = g.n_components, xt.shape[1]
    logp = np.empty((K, n))
    pdiff = np.empty((K, g.dim, n))
    for k in range(K):
        diff = xt - g.means[k][:, None]
        pd = np.dot(g.precisions[k], diff, out=pdiff[k])
        np.multiply(diff, pd, out=diff)
        logp[k] = g.log_norm[k] - 0.5 * diff.sum(axis=0)
    return logp, pdiff


def log_density(g: GaussianMixture, x):
    """``log sum_k w_k N(x; mu_k, Sigma_k)`` for one point ``(d,)`` or a batch ``(n, d)``."""
    pts, single = _as_points(g, x)
    logp, _ = _component_terms(g, pts)
    out = logsumexp(logp, axis=0)
    return float(out[0]) if single else out


def score(g: GaussianMixture, x):
    """Exact gradient of :func:`log_density` with respect to ``x``.

    ``sum_k r_k(x) Sigma_k^{-1} (mu_k - x)`` with posterior responsibilities
    ``r_k``.
    """
    pts, single = _as_points(g, x)
    resp, pdiff = _component_terms(g, pts)
    # responsibilities, softmax over components in place
    resp -= resp.max(axis=0)
    np.exp(resp, out=resp)
    resp /= resp.sum(axis=0)
    out = -np.einsum("kn,kdn->dn", resp, pdiff).T
    return out[0] if single else out


def diffuse_to(g: GaussianMixture, alpha_bar: float) -> GaussianMixture:
    """Push ``g`` through ``q(x_t | x_0) = N(sqrt(alpha_bar) x_0, (1 - alpha_bar) I)``."""
    if not 0.0 < alpha_bar <= 1.0:
        raise ConstraintError(f"alpha_bar must be in (0, 1], got {alpha_bar}")
    if alpha_bar == 1.0:
        return g
    eye = np.eye(g.dim)
    return GaussianMixture(
        g.weights,
        math.sqrt(alpha_bar) * g.means,
        alpha_bar * g.covs + (1.0 - alpha_bar) * eye,
    )


def diffuse(g: GaussianMixture, sched: NoiseSchedule, t: int) -> GaussianMixture:
    """Mixture of ``x_t`` when ``x_0 ~ g``; ``t = -1`` returns ``g`` itself."""
    return diffuse_to(g, alpha_bar_at(sched, t))


def sample(g: GaussianMixture, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` points. The Gaussian draws come first, so a one-component
    mixture consumes exactly the stream a plain Gaussian sampler would."""
    if n < 1:
        raise ConstraintError("sample count must be >= 1")
    z = rng.standard_normal((n, g.dim))
    if g.n_components == 1:
        return g.means[0] + z @ g.chol[0].T
    k = rng.choice(g.n_components, size=n, p=g.weights)
    return g.means[k] + np.einsum("nde,ne->nd", g.chol[k], z)


# --------------------------------------------------------------------------
# Worlds


@dataclass(frozen=True)
class Selector:
    """Which density of ``x`` to take: unconditional, one label, or both."""

    content: int | None = None
    style: int | None = None

    @property
    def kind(self) -> str:
        if self.content is None and self.style is None:
            return "unconditional"
        if self.style is None:
            return "content"
        if self.content is None:
            return "style"
        return "joint"


UNCONDITIONAL = Selector()


def content(i: int) -> Selector:
    return Selector(content=i)


def style(j: int) -> Selector:
    return Selector(style=j)


def joint(i: int, j: int) -> Selector:
    return Selector(content=i, style=j)


@dataclass(frozen=True, eq=False)
class World:
    """Joint model of ``(x, z_c, z_s)`` with discrete labels.

    Attributes:
        weights: ``(C, S)`` label weights ``pi[i, j]`` summing to one.
        means: ``(C, S, d)`` component means.
        covs: ``(C, S, d, d)`` component covariances.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    content_labels: tuple[str, ...] = ()
    style_labels: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        pi = np.asarray(self.weights, dtype=np.float64)
        if pi.ndim != 2:
            raise ConstraintError("label weights must be a (content, style) matrix")
        C, S = pi.shape
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim != 3 or mu.shape[:2] != (C, S):
            raise ConstraintError(f"means must have shape ({C}, {S}, d), got {mu.shape}")
        d = mu.shape[2]
        cov = np.asarray(self.covs, dtype=np.float64)
        if cov.shape != (C, S, d, d):
            raise ConstraintError(f"covs must have shape ({C}, {S}, {d}, {d}), got {cov.shape}")
        if np.any(pi < 0) or abs(math.fsum(pi.ravel()) - 1.0) > WEIGHT_TOL:
            raise ConstraintError("label weights must be nonnegative and sum to 1")
        cl = tuple(self.content_labels) or tuple(f"c{i}" for i in range(C))
        sl = tuple(self.style_labels) or tuple(f"s{j}" for j in range(S))
        if len(cl) != C or len(sl) != S:
            raise ConstraintError("label name count does not match the weight matrix")
        if len(set(cl)) != C or len(set(sl)) != S:
            raise ConstraintError("label names must be unique")
        object.__setattr__(self, "weights", _readonly(pi))
        object.__setattr__(self, "means", _readonly(mu))
        object.__setattr__(self, "covs", _readonly(cov))
        object.__setattr__(self, "content_labels", cl)
        object.__setattr__(self, "style_labels", sl)
        # SPD check for every component
        GaussianMixture(np.full(C * S, 1.0 / (C * S)), mu.reshape(C * S, d), cov.reshape(C * S, d, d))

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def content_index(self, label) -> int:
        return _resolve(label, self.content_labels, "content")

    def style_index(self, label) -> int:
        return _resolve(label, self.style_labels, "style")

    def content_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def style_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=0)


def _resolve(label, names, what) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        idx = int(label)
    elif isinstance(label, str) and label in names:
        idx = names.index(label)
    elif isinstance(label, str) and label.lstrip("-").isdigit():
        idx = int(label)
    else:
        raise ConstraintError(f"unknown {what} label {label!r}; known: {', '.join(names)}")
    if not 0 <= idx < len(names):
        raise ConstraintError(f"{what} label index {idx} out of range [0, {len(names) - 1}]")
    return idx


def dependence_gap(w: World) -> float:
    """Max abs deviation of ``pi`` from the outer product of its marginals."""
    return float(np.max(np.abs(w.weights - np.outer(w.content_marginal(), w.style_marginal()))))


def is_independent(w: World, tol: float = WEIGHT_TOL) -> bool:
    """True iff the label weights factorise, i.e. content and style labels are independent."""
    return dependence_gap(w) <= tol


def _mixture_from(w: World, weights: np.ndarray, mask) -> GaussianMixture:
    total = weights.sum()
    if total <= 0:
        raise ConstraintError("conditioning on a label with zero probability")
    d = w.dim
    return GaussianMixture(
        (weights / total).ravel(), w.means[mask].reshape(-1, d), w.covs[mask].reshape(-1, d, d)
    )


def marginal_density(w: World) -> GaussianMixture:
    """``p(x)``: all ``C*S`` components weighted by ``pi`` (row-major order)."""
    C, S = w.shape
    return GaussianMixture(
        w.weights.ravel(), w.means.reshape(C * S, w.dim), w.covs.reshape(C * S, w.dim, w.dim)
    )


def conditional_density(w: World, which: Selector) -> GaussianMixture:
    """``p(x | selector)`` as a mixture.

    ``content(i)`` mixes over styles with weights ``pi[i, j] / sum_j pi[i, j]``,
    ``style(j)`` symmetrically, and ``joint(i, j)`` is the single component.
    """
    kind = which.kind
    if kind == "unconditional":
        return marginal_density(w)
    C, S = w.shape
    if which.content is not None and not 0 <= which.content < C:
        raise ConstraintError(f"content label {which.content} out of range [0, {C - 1}]")
    if which.style is not None and not 0 <= which.style < S:
        raise ConstraintError(f"style label {which.style} out of range [0, {S - 1}]")
    if kind == "joint":
        return gaussian(w.means[which.content, which.style], w.covs[which.content, which.style])
    if kind == "content":
        return _mixture_from(w, w.weights[which.content], which.content)
    return _mixture_from(w, w.weights[:, which.style], (slice(None), which.style))


def tilted_log_density(
    log_u: Callable, log_c: Callable, log_s: Callable, log_j: Callable, g
) -> Callable:
    """Unnormalised log of the nested geometric average behind a GCDM composition.

    ``(1 - alpha) log p_u + alpha [lam log p_j + (1 - lam)(beta_c log p_c + beta_s log p_s)]``
    """

    def log_p(x):
        inner = g.beta_c * log_c(x) + g.beta_s * log_s(x)
        return (1.0 - g.alpha) * log_u(x) + g.alpha * (
            g.lam * log_j(x) + (1.0 - g.lam) * inner
        )

    return log_p


def tilted_density(w: World, sched: NoiseSchedule, t: int, g, i: int, j: int) -> Callable:
    """Evaluable unnormalised log-density of the guided distribution of ``x_t``.

    Each factor is the diffused world density at ``t``; ``g`` is a
    :class:`gcdm.guidance.GuidanceConfig` (validated at its construction).
    """
    parts = [
        diffuse(conditional_density(w, sel), sched, t)
        for sel in (UNCONDITIONAL, content(i), style(j), joint(i, j))
    ]
    logs = [lambda x, m=m: log_density(m, x) for m in parts]
    return tilted_log_density(*logs, g)
