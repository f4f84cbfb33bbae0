"""Experiment configuration files.

Grammar: INI-style ``key = value`` lines grouped in sections, ``#`` starts a
comment. Vectors are comma separated, matrices are rows separated by ``;``.
Unknown sections or keys are rejected. Example::

    [experiment]
    version = 1
    world = builtin:dependent     # or a path, relative to this file
    content = c0                  # label name or index
    style = s1
    n = 1000
    seed = 0

    [noise]
    kind = linear                 # linear | cosine
    T = 1000
    beta_min = 1e-4
    beta_max = 0.02

    [guidance]
    alpha = 1.5
    lambda = 0.9
    beta_s = 1.0                  # beta_c defaults to 1 - beta_s

    [condition_schedule]
    kind = sigmoid                # sigmoid | linear | exclusive | constant | none
    a = 0.025
    b = 550
    floor = 0
    ceiling = 1

    [sampler]
    kind = ddim                   # ddim | ddpm
    eta = 0
    num_steps = 100               # uniform stride over 0..T-1, or give `steps`
    start = pure_noise            # pure_noise | sdedit | inverted
    t0 = 600                      # sdedit only
    x0 = 0.0, 3.0                 # sdedit/inverted reference rows

    [sweep]                       # optional default grid for `gcdm sweep`
    lambda = 0, 0.5, 1
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gcdm import __version__
from gcdm.errors import ConstraintError, ParseError
from gcdm.guidance import GuidanceConfig
from gcdm.sampler import SamplerConfig, uniform_steps
from gcdm.schedule import ConditionSchedule, NoiseSchedule, build_noise_schedule
from gcdm.world import World
from gcdm.worldfile import (
    _line_of,
    dumps_world,
    load_world,
    parse_matrix,
    parse_vector,
    syntax_error,
)

CONFIG_VERSION = 1
SWEEP_KEYS = ("alpha", "lambda", "beta_s", "a", "b")

_SCHEMA = {
    "experiment": {"version", "world", "content", "style", "n", "seed"},
    "noise": {"kind", "t", "beta_min", "beta_max"},
    "guidance": {"alpha", "lambda", "beta_c", "beta_s"},
    "condition_schedule": {"kind", "a", "b", "floor", "ceiling"},
    "sampler": {"kind", "eta", "num_steps", "steps", "start", "t0", "x0"},
    "sweep": set(SWEEP_KEYS),
}


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Everything needed to reproduce one simulation."""

    world: World
    world_source: str
    content: int
    style: int
    n: int
    seed: int
    noise: dict
    guidance: GuidanceConfig
    condition_schedule: ConditionSchedule | None
    sampler: SamplerConfig
    x0: np.ndarray | None = None
    sweep: dict = field(default_factory=dict)

    def noise_schedule(self) -> NoiseSchedule:
        return build_noise_schedule(**self.noise)

    def canonical(self) -> dict:
        """Stable, JSON-ready description used for hashing."""
        cs = self.condition_schedule
        return {
            "tool": "gcdm",
            "config_version": CONFIG_VERSION,
            "world": dumps_world(self.world),
            "content": self.content,
            "style": self.style,
            "n": self.n,
            "seed": self.seed,
            "noise": dict(sorted(self.noise.items())),
            "guidance": {
                "alpha": self.guidance.alpha,
                "lambda": self.guidance.lam,
                "beta_c": self.guidance.beta_c,
                "beta_s": self.guidance.beta_s,
            },
            "condition_schedule": None if cs is None else {
                "kind": cs.kind, "a": cs.a, "b": cs.b, "floor": cs.floor,
                "ceiling": cs.ceiling, "T": cs.T,
            },
            "sampler": {
                "kind": self.sampler.kind,
                "eta": self.sampler.eta,
                "steps": list(self.sampler.steps),
                "start": self.sampler.start,
                "t0": self.sampler.t0,
            },
            "x0": None if self.x0 is None else self.x0.tolist(),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **values) -> "ExperimentConfig":
        """Copy with any of ``alpha``, ``lambda``, ``beta_s``, ``a``, ``b`` replaced.

        Overriding ``beta_s`` also sets ``beta_c = 1 - beta_s``.
        """
        g = self.guidance
        alpha = values.get("alpha", g.alpha)
        lam = values.get("lambda", g.lam)
        if "beta_s" in values:
            guidance = GuidanceConfig(alpha, lam, 1.0 - values["beta_s"], values["beta_s"])
        else:
            guidance = GuidanceConfig(alpha, lam, g.beta_c, g.beta_s)
        cs = self.condition_schedule
        if "a" in values or "b" in values:
            if cs is None:
                raise ConstraintError("cannot sweep a or b without a condition schedule")
            cs = replace(cs, a=values.get("a", cs.a), b=values.get("b", cs.b))
        return replace(self, guidance=guidance, condition_schedule=cs)


def _reader():
    cp = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#",)
    )
    cp.optionxform = str.lower
    return cp


def loads_config(text: str, source: str = "<string>", base_dir: Path | None = None) -> ExperimentConfig:
    """Parse and fully validate a config.

    Raises :class:`ParseError` for syntax, unknown keys and unconvertible
    values (with ``file:line [section] key``), and :class:`ConstraintError` for
    values that parse but violate a constraint.
    """
    base_dir = Path(".") if base_dir is None else base_dir
    cp = _reader()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise syntax_error(exc, source) from exc

    def where(section, key=None):
        line = _line_of(text, section, key)
        loc = f"{source}:{line}" if line else source
        return f"{loc} [{section}]" + (f" {key}" if key else "")

    for section in cp.sections():
        if section not in _SCHEMA:
            raise ParseError(f"unknown section [{section}]", where(section))
        for key in cp.options(section):
            if key not in _SCHEMA[section]:
                raise ParseError(f"unknown key {key!r}", where(section, key))

    def get(section, key, conv, default=None, required=False):
        if not cp.has_option(section, key):
            if required:
                raise ParseError(f"missing key {key!r}", where(section))
            return default
        raw = cp.get(section, key).strip()
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ParseError(f"cannot parse {raw!r}: {exc}", where(section, key)) from exc

    def integer(v):
        f = float(v)
        if not f.is_integer():
            raise ValueError("expected an integer")
        return int(f)

    if not cp.has_section("experiment"):
        raise ParseError("missing [experiment] section", source)
    version = get("experiment", "version", integer, required=True)
    if version != CONFIG_VERSION:
        raise ParseError(f"unsupported config version {version}", where("experiment", "version"))

    world_spec = get("experiment", "world", str, required=True)
    if not world_spec.startswith("builtin:") and not Path(world_spec).is_absolute():
        world_spec = str(base_dir / world_spec)
    world = load_world(world_spec)
    content = world.content_index(get("experiment", "content", str, "0"))
    style = world.style_index(get("experiment", "style", str, "0"))
    n = get("experiment", "n", integer, 1000)
    seed = get("experiment", "seed", integer, 0)
    if n < 1:
        raise ConstraintError(f"n must be >= 1, got {n}")
    if not 0 <= seed < 2**64:
        raise ConstraintError("seed must be a 64-bit unsigned integer")

    noise = {
        "kind": get("noise", "kind", str, "linear"),
        "T": get("noise", "t", integer, 1000),
        "beta_min": get("noise", "beta_min", float, 1e-4),
        "beta_max": get("noise", "beta_max", float, 0.02),
    }
    sched = build_noise_schedule(**noise)

    alpha = get("guidance", "alpha", float, 1.5)
    lam = get("guidance", "lambda", float, 0.9)
    beta_s = get("guidance", "beta_s", float, None)
    beta_c = get("guidance", "beta_c", float, None)
    if beta_s is None and beta_c is None:
        beta_s = 1.0
    if beta_c is None:
        beta_c = 1.0 - beta_s
    elif beta_s is None:
        beta_s = 1.0 - beta_c
    guidance = GuidanceConfig(alpha, lam, beta_c, beta_s)

    cs_kind = get("condition_schedule", "kind", str, "sigmoid")
    if cs_kind == "none":
        cond = None
    else:
        cond = ConditionSchedule(
            kind=cs_kind,
            a=get("condition_schedule", "a", float, 0.025),
            b=get("condition_schedule", "b", float, 550.0),
            floor=get("condition_schedule", "floor", float, 0.0),
            ceiling=get("condition_schedule", "ceiling", float, 1.0),
            T=sched.T,
        )

    if cp.has_option("sampler", "steps"):
        steps = tuple(int(v) for v in get("sampler", "steps", parse_vector))
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConstraintError(
                f"{where('sampler', 'steps')}: sampler steps must be strictly increasing"
            )
    else:
        num = get("sampler", "num_steps", integer, 100)
        steps = uniform_steps(sched.T, num)
    sampler = SamplerConfig(
        kind=get("sampler", "kind", str, "ddim"),
        eta=get("sampler", "eta", float, 0.0),
        steps=steps,
        start=get("sampler", "start", str, "pure_noise"),
        t0=get("sampler", "t0", integer, None),
    )
    sampler.check(sched)
    x0 = get("sampler", "x0", parse_matrix, None)
    if x0 is not None:
        if x0.shape[1] != world.dim or x0.shape[0] not in (1, n):
            raise ConstraintError(
                f"{where('sampler', 'x0')}: x0 must have {world.dim} columns and 1 or {n} rows"
            )
    if sampler.start != "pure_noise" and x0 is None:
        raise ConstraintError(f"{where('sampler')}: start={sampler.start} needs x0")

    sweep = {}
    if cp.has_section("sweep"):
        for key in cp.options("sweep"):
            sweep[key] = [float(v) for v in get("sweep", key, parse_vector)]

    return ExperimentConfig(
        world=world,
        world_source=world_spec,
        content=content,
        style=style,
        n=n,
        seed=seed,
        noise=noise,
        guidance=guidance,
        condition_schedule=cond,
        sampler=sampler,
        x0=x0,
        sweep=sweep,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc}", str(path)) from exc
    return loads_config(text, source=str(path), base_dir=path.parent)


def header_lines(cfg_hash: str, seed: int, extra: dict | None = None) -> list[str]:
    lines = [f"# gcdm {__version__}", f"# config_hash: {cfg_hash}", f"# seed: {seed}"]
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    return lines
