"""Distances and divergences between sample sets and analytic mixtures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gcdm.errors import ConstraintError
from gcdm.world import GaussianMixture, log_density

EIG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Terminal samples plus where they came from."""

    x: np.ndarray
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] < 1 or not np.all(np.isfinite(x)):
            raise ConstraintError("sample set must be non-empty and finite")
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _points(samples) -> np.ndarray:
    return samples.x if isinstance(samples, SampleSet) else SampleSet(samples).x


def sqrtm_psd(S) -> np.ndarray:
    """Symmetric square root via eigendecomposition, eigenvalues floored at 1e-12."""
    S = np.asarray(S, dtype=np.float64)
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return (vecs * np.sqrt(np.maximum(vals, EIG_FLOOR))) @ vecs.T


def _check_spd(S, name):
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    if S.shape[0] != S.shape[1] or not np.allclose(S, S.T, atol=1e-10):
        raise ConstraintError(f"{name} must be a symmetric square matrix")
    if np.linalg.eigvalsh(S).min() <= 0:
        raise ConstraintError(f"{name} must be positive definite")
    return S


def gaussian_w2(m1, S1, m2, S2) -> float:
    """2-Wasserstein distance between ``N(m1, S1)`` and ``N(m2, S2)``."""
    m1, m2 = np.atleast_1d(m1).astype(np.float64), np.atleast_1d(m2).astype(np.float64)
    S1, S2 = _check_spd(S1, "S1"), _check_spd(S2, "S2")
    root2 = sqrtm_psd(S2)
    cross = sqrtm_psd(root2 @ S1 @ root2)
    bures = np.trace(S1) + np.trace(S2) - 2.0 * np.trace(cross)
    return math.sqrt(max(float(np.sum((m1 - m2) ** 2) + bures), 0.0))


def mean_loglik(samples, g: GaussianMixture) -> float:
    """Average log-density of the samples under ``g``."""
    return float(np.mean(log_density(g, _points(samples))))


def loglik_stderr(samples, g: GaussianMixture) -> float:
    ll = log_density(g, _points(samples))
    return float(np.std(ll, ddof=1) / math.sqrt(ll.size)) if ll.size > 1 else math.inf


def moment_summary(samples) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance (two-pass)."""
    x = _points(samples)
    if x.shape[0] < 2:
        raise ConstraintError("moment summary needs at least 2 samples")
    mean = x.mean(axis=0)
    centred = x - mean
    return mean, centred.T @ centred / (x.shape[0] - 1)


def diversity(sample_sets) -> float:
    """Trace of the covariance of the pooled samples (e.g. one set per style label)."""
    pooled = np.concatenate([_points(s) for s in sample_sets])
    return float(np.trace(moment_summary(pooled)[1]))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _bin_mass(g: GaussianMixture, edges: list[np.ndarray]) -> np.ndarray:
    """Gauss-Legendre quadrature of ``g``'s density over every histogram cell."""
    axes_pts, axes_w = [], []
    for e in edges:
        half = 0.5 * np.diff(e)
        mid = 0.5 * (e[1:] + e[:-1])
        axes_pts.append(mid[:, None] + half[:, None] * _GL_NODES[None, :])
        axes_w.append(half[:, None] * _GL_WEIGHTS[None, :])
    if len(edges) == 1:
        dens = np.exp(log_density(g, axes_pts[0].reshape(-1, 1))).reshape(axes_pts[0].shape)
        return np.sum(dens * axes_w[0], axis=1)
    (px, py), (wx, wy) = axes_pts, axes_w
    bx, q = px.shape
    by = py.shape[0]
    X = np.broadcast_to(px[:, None, :, None], (bx, by, q, q))
    Y = np.broadcast_to(py[None, :, None, :], (bx, by, q, q))
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    dens = np.exp(log_density(g, pts)).reshape(bx, by, q, q)
    return np.einsum("ijab,ia,jb->ij", dens, wx, wy)


def histogram_kl(samples, g: GaussianMixture, bins: int = 50, range=None) -> float:
    """KL(empirical histogram || binned analytic mass) for ``d <= 2``.

    ``bins`` is per axis and ``range`` is a ``(lo, hi)`` pair per axis
    (default: sample extent). Samples outside the range are dropped and both
    histograms are renormalised over the covered cells; empty empirical cells
    contribute zero.
    """
    x = _points(samples)
    d = x.shape[1]
    if d > 2 or g.dim != d:
        raise ConstraintError(f"histogram KL supports d <= 2 with matching mixture, got d={d}")
    if range is None:
        range = [(float(x[:, k].min()), float(x[:, k].max())) for k in np.arange(d)]
    elif d == 1 and np.ndim(range) == 1:
        range = [tuple(range)]
    edges = [np.linspace(lo, hi, bins + 1) for lo, hi in range]
    counts, _ = np.histogramdd(x, bins=edges)
    if counts.sum() == 0:
        raise ConstraintError("no samples fall inside the histogram range")
    p = counts / counts.sum()
    q = _bin_mass(g, edges)
    q = q / q.sum()
    mask = p > 0
    with np.errstate(divide="ignore"):
        terms = p[mask] * (np.log(p[mask]) - np.log(q[mask]))
    return float(max(np.sum(terms), 0.0))
