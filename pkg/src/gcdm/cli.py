"""Command line interface.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage error (bad flags)
    3  parse error in a config or fixture file
    4  constraint violation (invalid parameter values, empty sweep grid)
    5  invariant check failed (``validate``, ``validate-world``)
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from gcdm import __version__
from gcdm import experiment as exp
from gcdm.config import SWEEP_KEYS, load_config
from gcdm.errors import ConstraintError, InvariantError, ParseError
from gcdm.schedule import ConditionSchedule, build_noise_schedule
from gcdm.worldfile import load_world

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_PARSE, EXIT_CONSTRAINT, EXIT_INVARIANT = range(6)


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _report(checks) -> bool:
    ok = True
    for name, passed, detail in checks:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    return ok


def cmd_validate(args) -> int:
    cfg = _load(args)
    if not _report(exp.validate(cfg)):
        raise InvariantError("one or more invariant checks failed")
    print(f"config_hash: {cfg.config_hash()}")
    return EXIT_OK


def cmd_validate_world(args) -> int:
    world = load_world(args.world)
    sched = build_noise_schedule()
    if not _report(exp.check_world(world, sched)):
        raise InvariantError("world invariant checks failed")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = exp.simulate(cfg, jobs=args.jobs, record=args.trajectories)
    for path in exp.write_simulation(sim, args.out):
        print(path)
    return EXIT_OK


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or key not in SWEEP_KEYS:
            raise ConstraintError(f"bad grid spec {item!r}; use KEY=v1,v2 with KEY in {SWEEP_KEYS}")
        try:
            grid[key] = [float(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConstraintError(f"bad grid values in {item!r}") from exc
    return grid


def cmd_sweep(args) -> int:
    cfg = _load(args)
    grid = _parse_grid(args.grid) or cfg.sweep
    try:
        exp.grid_points(grid)
    except ValueError as exc:
        raise ConstraintError(str(exc)) from exc
    results = exp.sweep(cfg, grid, jobs=args.jobs)
    print(exp.write_sweep(cfg, results, args.out))
    return EXIT_OK


def cmd_schedule_plot(args) -> int:
    if args.config:
        cfg = _load(args)
        sched = cfg.noise_schedule()
        cs = cfg.condition_schedule or ConditionSchedule(kind="constant", floor=0.0, ceiling=1.0, T=sched.T)
    else:
        sched = build_noise_schedule(args.T, args.noise_kind, args.beta_min, args.beta_max)
        cs = ConditionSchedule(args.kind, args.a, args.b, args.floor, args.ceiling, sched.T)
    text = "\n".join(exp.schedule_table(cs, sched)) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcdm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gcdm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="runs"):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (results do not depend on it)")

    p = sub.add_parser("validate", help="check a config and run invariant suites")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("validate-world", help="check a world file and print its dependence indicator")
    p.add_argument("world", help="world file path or builtin:<name>")
    p.set_defaults(func=cmd_validate_world)

    p = sub.add_parser("simulate", help="sample one configuration")
    common(p)
    p.add_argument("--trajectories", action=argparse.BooleanOptionalAction, default=False,
                   help="also dump full trajectories")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="simulate a grid of guidance/schedule settings")
    common(p)
    p.add_argument("--grid", action="append", metavar="KEY=v1,v2",
                   help=f"grid axis, KEY in {', '.join(SWEEP_KEYS)}; repeatable")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("schedule-plot", help="tabulate w_c(t), w_s(t) and SNR(t)")
    p.add_argument("--config", default=None, help="take both schedules from a config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--kind", default="sigmoid")
    p.add_argument("--a", type=float, default=0.025)
    p.add_argument("--b", type=float, default=550.0)
    p.add_argument("--floor", type=float, default=0.0)
    p.add_argument("--ceiling", type=float, default=1.0)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--noise-kind", default="linear")
    p.add_argument("--beta-min", type=float, default=1e-4)
    p.add_argument("--beta-max", type=float, default=0.02)
    p.set_defaults(func=cmd_schedule_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConstraintError as exc:
        print(f"constraint violation: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except InvariantError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
