"""Content/style adaptive group normalisation on small feature tensors.

Feature tensors are ``(C, H, W)`` numpy arrays. The combiner is

    out[c, y, x] = (1 + t1 * phi(z_c)[y, x])
                 * (1 + zeta(z_s)[c])
                 * (t2[c] * GN(h)[c, y, x] + t3[c])

i.e. a spatial content factor shared by all channels, a channel style factor
shared by all positions, and a timestep-adjusted group norm. ``phi`` and
``zeta`` are fixed affine maps supplied by the caller.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gcdm.errors import ConstraintError, ParseError
from gcdm.schedule import ConditionSchedule, weight_content, weight_style

GN_EPS = 1e-5
DEFAULT_GROUPS = 4
FORMAT = "gcdm-adagn"
VERSION = 1


def group_norm(h, groups: int = DEFAULT_GROUPS, eps: float = GN_EPS) -> np.ndarray:
    """Normalise each channel group of a ``(C, H, W)`` tensor to zero mean, unit variance."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3:
        raise ConstraintError(f"feature tensor must be (C, H, W), got shape {h.shape}")
    C = h.shape[0]
    if groups < 1 or C % groups:
        raise ConstraintError(f"{C} channels not divisible into {groups} groups")
    g = h.reshape(groups, -1)
    mean = g.mean(axis=1, keepdims=True)
    var = g.var(axis=1, keepdims=True)
    return ((g - mean) / np.sqrt(var + eps)).reshape(h.shape)


def resample_nearest(grid, H: int, W: int) -> np.ndarray:
    """Nearest-neighbour resampling of an ``(h, w)`` grid to ``(H, W)``.

    Output pixel ``(y, x)`` copies input ``(floor(y * h / H), floor(x * w / W))``,
    which covers both up- and downsampling.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return grid[np.ix_(rows, cols)]


@dataclass(frozen=True, eq=False)
class AdaGNParams:
    """Fixed conditioning maps and timestep terms for one layer.

    ``phi(z_c) = content_scale * resample(z_c) + content_bias`` and
    ``zeta(z_s) = style_weight @ z_s + style_bias``.
    """

    content_scale: float
    content_bias: float
    style_weight: np.ndarray  # (C, d_s)
    style_bias: np.ndarray  # (C,)
    t1: float
    t2: np.ndarray  # (C,)
    t3: np.ndarray  # (C,)

    def __post_init__(self):
        sw = np.atleast_2d(np.asarray(self.style_weight, dtype=np.float64))
        C = sw.shape[0]
        for name in ("style_bias", "t2", "t3"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if v.shape != (C,):
                raise ConstraintError(f"{name} must have length {C}, got shape {v.shape}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "style_weight", sw)
        for name in ("content_scale", "content_bias", "t1"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def channels(self) -> int:
        return self.style_weight.shape[0]

    @property
    def style_dim(self) -> int:
        return self.style_weight.shape[1]

    def phi(self, z_c, H: int, W: int) -> np.ndarray:
        z_c = np.asarray(z_c, dtype=np.float64)
        if z_c.ndim == 3:
            if z_c.shape[0] != 1:
                raise ConstraintError(f"content grid must have one channel, got {z_c.shape}")
            z_c = z_c[0]
        return self.content_scale * resample_nearest(z_c, H, W) + self.content_bias

    def zeta(self, z_s) -> np.ndarray:
        z_s = np.asarray(z_s, dtype=np.float64).reshape(-1)
        if z_s.size != self.style_dim:
            raise ConstraintError(f"style vector has {z_s.size} entries, expected {self.style_dim}")
        return self.style_weight @ z_s + self.style_bias


def _combine(h, phi, zeta, p: AdaGNParams, groups: int) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3 or h.shape[0] != p.channels:
        raise ConstraintError(f"feature tensor must be ({p.channels}, H, W), got {h.shape}")
    content_factor = 1.0 + p.t1 * phi  # (H, W), constant over channels
    style_factor = 1.0 + zeta  # (C,), constant over space
    base = p.t2[:, None, None] * group_norm(h, groups) + p.t3[:, None, None]
    return content_factor[None, :, :] * style_factor[:, None, None] * base


def adagn_combine(h, z_c, z_s, p: AdaGNParams, groups: int = DEFAULT_GROUPS) -> np.ndarray:
    """Apply the content, style and timestep factors around group norm."""
    _, H, W = np.shape(h)
    return _combine(h, p.phi(z_c, H, W), p.zeta(z_s), p, groups)


def adagn_weighted(h, z_c, z_s, p: AdaGNParams, w_c: float, w_s: float, groups: int = DEFAULT_GROUPS):
    """:func:`adagn_combine` with ``phi`` scaled by ``w_c`` and ``zeta`` by ``w_s``."""
    _, H, W = np.shape(h)
    return _combine(h, w_c * p.phi(z_c, H, W), w_s * p.zeta(z_s), p, groups)


def adagn_scheduled(
    h, z_c, z_s, p: AdaGNParams, s: ConditionSchedule, t, groups: int = DEFAULT_GROUPS
) -> np.ndarray:
    """:func:`adagn_weighted` with the weights ``w_c(t)``, ``w_s(t)`` of ``s``."""
    return adagn_weighted(h, z_c, z_s, p, weight_content(s, t), weight_style(s, t), groups)


def load_params(path) -> tuple[AdaGNParams, int]:
    """Read a JSON parameter fixture; returns the params and the group count.

    Keys: ``format`` (``"gcdm-adagn"``), ``version`` (1), ``groups``,
    ``content_scale``, ``content_bias``, ``style_weight`` (C x d_s nested list),
    ``style_bias``, ``t1``, ``t2``, ``t3``.
    """
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(str(exc), str(path)) from exc
    if data.get("format") != FORMAT or data.get("version") != VERSION:
        raise ParseError(f"expected format {FORMAT!r} version {VERSION}", str(path))
    try:
        params = AdaGNParams(
            data["content_scale"], data["content_bias"], data["style_weight"],
            data["style_bias"], data["t1"], data["t2"], data["t3"],
        )
    except KeyError as exc:
        raise ParseError(f"missing key {exc.args[0]!r}", str(path)) from exc
    return params, int(data.get("groups", DEFAULT_GROUPS))


def dump_params(p: AdaGNParams, groups: int = DEFAULT_GROUPS) -> str:
    return json.dumps(
        {
            "format": FORMAT,
            "version": VERSION,
            "groups": groups,
            "content_scale": p.content_scale,
            "content_bias": p.content_bias,
            "style_weight": p.style_weight.tolist(),
            "style_bias": p.style_bias.tolist(),
            "t1": p.t1,
            "t2": p.t2.tolist(),
            "t3": p.t3.tolist(),
        },
        indent=2,
    )
