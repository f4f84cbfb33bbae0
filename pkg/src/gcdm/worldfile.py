"""Reading and writing world fixture files.

A world file is INI-style text::

    # comment
    [world]
    format = gcdm-world
    version = 1
    name = dependent
    dim = 2
    content_labels = c0, c1
    style_labels = s0, s1
    weights = 0.45, 0.05; 0.05, 0.45     # rows separated by ';'

    [component c0 s1]                    # one section per (content, style) pair
    mean = 0.0, 3.0
    cov = 0.4, 0.0; 0.0, 0.6

Vectors are comma separated; matrices are rows separated by ``;``. Every
(content, style) pair needs exactly one component section. Covariances are
checked symmetric positive definite (Cholesky) at load time.

``builtin:<name>`` loads one of the fixtures shipped in ``gcdm/fixtures``.
"""

from __future__ import annotations

import configparser
from importlib import resources
from pathlib import Path

import numpy as np

from gcdm.errors import ConstraintError, ParseError
from gcdm.world import World

FORMAT = "gcdm-world"
VERSION = 1
BUILTINS = ("independent", "dependent")


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return lineno
        elif current == section and key is not None:
            name = line.split("=", 1)[0].strip().lower()
            if name == key.lower():
                return lineno
    return None


def syntax_error(exc: configparser.Error, source: str) -> ParseError:
    """Turn a configparser failure into a :class:`ParseError` with a line number."""
    lineno = getattr(exc, "lineno", None)
    message = str(exc).splitlines()[0]
    if isinstance(exc, configparser.ParsingError) and exc.errors:
        lineno = exc.errors[0][0]
        message = "expected 'key = value' or a [section] header"
    return ParseError(message, f"{source}:{lineno}" if lineno else source)


def parse_vector(value: str) -> np.ndarray:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    return np.array([float(p) for p in parts], dtype=np.float64)


def parse_matrix(value: str) -> np.ndarray:
    rows = [parse_vector(r) for r in value.split(";") if r.strip()]
    if not rows or len({r.size for r in rows}) != 1:
        raise ValueError("matrix rows must be non-empty and equally long")
    return np.vstack(rows)


def format_vector(v) -> str:
    return ", ".join(repr(float(x)) for x in np.ravel(v))


def format_matrix(m) -> str:
    return "; ".join(format_vector(row) for row in np.atleast_2d(m))


def _reader() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#",)
    )
    cp.optionxform = str.lower
    return cp


def loads_world(text: str, source: str = "<string>") -> World:
    """Parse world text. Raises :class:`ParseError` with a ``source:line`` location."""
    cp = _reader()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise syntax_error(exc, source) from exc

    def where(section, key=None):
        line = _line_of(text, section, key)
        loc = f"{source}:{line}" if line else source
        return f"{loc} [{section}]" + (f" {key}" if key else "")

    def get(section, key, conv):
        if not cp.has_option(section, key):
            raise ParseError(f"missing key {key!r}", where(section))
        raw = cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            raise ParseError(f"cannot parse {raw!r}: {exc}", where(section, key)) from exc

    if not cp.has_section("world"):
        raise ParseError("missing [world] section", source)
    fmt = get("world", "format", str.strip)
    if fmt != FORMAT:
        raise ParseError(f"format must be {FORMAT!r}, got {fmt!r}", where("world", "format"))
    version = get("world", "version", int)
    if version != VERSION:
        raise ParseError(f"unsupported world file version {version}", where("world", "version"))
    dim = get("world", "dim", int)
    labels = lambda v: tuple(p.strip() for p in v.split(",") if p.strip())  # noqa: E731
    content_labels = get("world", "content_labels", labels)
    style_labels = get("world", "style_labels", labels)
    weights = get("world", "weights", parse_matrix)
    C, S = len(content_labels), len(style_labels)
    if weights.shape != (C, S):
        raise ParseError(
            f"weights matrix is {weights.shape}, expected ({C}, {S})", where("world", "weights")
        )
    means = np.empty((C, S, dim))
    covs = np.empty((C, S, dim, dim))
    seen = set()
    for section in cp.sections():
        if section == "world":
            continue
        parts = section.split()
        if len(parts) != 3 or parts[0] != "component":
            raise ParseError(f"unexpected section [{section}]", where(section))
        if parts[1] not in content_labels or parts[2] not in style_labels:
            raise ParseError(f"unknown label pair in [{section}]", where(section))
        i, j = content_labels.index(parts[1]), style_labels.index(parts[2])
        if (i, j) in seen:
            raise ParseError(f"duplicate component [{section}]", where(section))
        seen.add((i, j))
        mean = get(section, "mean", parse_vector)
        cov = get(section, "cov", parse_matrix)
        if mean.shape != (dim,):
            raise ParseError(f"mean has {mean.size} entries, expected {dim}", where(section, "mean"))
        if cov.shape != (dim, dim):
            raise ParseError(f"cov is {cov.shape}, expected ({dim}, {dim})", where(section, "cov"))
        means[i, j] = mean
        covs[i, j] = cov
    missing = [
        f"{content_labels[i]} {style_labels[j]}"
        for i in range(C)
        for j in range(S)
        if (i, j) not in seen
    ]
    if missing:
        raise ParseError(f"missing component sections: {', '.join(missing)}", source)
    name = cp.get("world", "name", fallback="").strip()
    try:
        return World(weights, means, covs, content_labels, style_labels, name)
    except ConstraintError as exc:
        raise ConstraintError(f"{source}: {exc}") from exc


def dumps_world(w: World) -> str:
    """Serialise ``w``; ``loads_world(dumps_world(w))`` reproduces it exactly."""
    lines = [
        "[world]",
        f"format = {FORMAT}",
        f"version = {VERSION}",
        f"name = {w.name}",
        f"dim = {w.dim}",
        f"content_labels = {', '.join(w.content_labels)}",
        f"style_labels = {', '.join(w.style_labels)}",
        f"weights = {format_matrix(w.weights)}",
    ]
    for i, cl in enumerate(w.content_labels):
        for j, sl in enumerate(w.style_labels):
            lines += [
                "",
                f"[component {cl} {sl}]",
                f"mean = {format_vector(w.means[i, j])}",
                f"cov = {format_matrix(w.covs[i, j])}",
            ]
    return "\n".join(lines) + "\n"


def load_world(path) -> World:
    """Load a world from a file path or ``builtin:<name>``."""
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        if name not in BUILTINS:
            raise ParseError(f"unknown builtin world {name!r}; choose from {BUILTINS}")
        text = resources.files("gcdm").joinpath("fixtures", f"{name}.world").read_text()
        return loads_world(text, source=path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read world file: {exc}", path) from exc
    return loads_world(text, source=path)


def save_world(w: World, path) -> None:
    Path(path).write_text(dumps_world(w))
