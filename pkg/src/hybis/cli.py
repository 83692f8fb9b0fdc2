"""Command-line entry points.

`hybis console` boots a simulated guest and drops into the debug-console
REPL, optionally exposing the JSON API (and the web console's static files)
over HTTP.  `hybis report` replays a scenario headlessly and renders the
event log, the compared-view CSV, and the figures.
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
from pathlib import Path

from .console import ConsoleCore, repl
from .errors import BadArguments, HybisError
from .guest import GuestConfig, GuestMachine
from .monitor import Monitor, PolicyMode, ReactionPolicy
from .profile import KernelProfile
from .report import run_report
from .service import ApiServer

MIB = 1024 * 1024


def _add_guest_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--memory", type=int, default=64, metavar="MIB",
                        help="guest memory size in MiB (default 64)")
    parser.add_argument("--seed", type=int, default=0, help="deterministic RNG seed")
    parser.add_argument("--profile", metavar="FILE", help="kernel layout profile (JSON)")
    parser.add_argument("--scenario", metavar="FILE",
                        help="boot/run timeline file (JSON list of [step, action])")
    parser.add_argument("--policy", choices=("auto", "defer"), default="auto",
                        help="reaction policy for hidden-process findings")
    parser.add_argument("--scratch", metavar="DIR",
                        help="scratch directory (defaults to $HYBIS_SCRATCH)")
    parser.add_argument("--keep-temp", action="store_true",
                        help="keep temporary standalone dumps for debugging")
    parser.add_argument("--watch", action="append", default=[], metavar="SPEC",
                        help="differential watch 'start:length:period' or 'pool:period'; repeatable")
    parser.add_argument("--boot-dump", metavar="PATH",
                        help="arm the automatic boot dump at startup")


def _build_guest(args) -> GuestMachine:
    profile = KernelProfile.load(args.profile) if args.profile else None
    boot_plan = None
    if args.scenario:
        doc = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        boot_plan = [(int(s), str(a)) for s, a in doc]
    kwargs = {"memory_size": args.memory * MIB, "seed": args.seed}
    if profile is not None:
        kwargs["profile"] = profile
    if boot_plan is not None:
        kwargs["boot_plan"] = boot_plan
    return GuestMachine.create(GuestConfig(**kwargs))


def _build_core(args) -> ConsoleCore:
    guest = _build_guest(args)
    mode = PolicyMode.AUTO_BLOCK if args.policy == "auto" else PolicyMode.DEFER_TO_EVALUATOR
    monitor = Monitor(guest, policy=ReactionPolicy(mode))
    core = ConsoleCore(
        guest,
        monitor=monitor,
        scratch_dir=args.scratch,
        keep_temp=args.keep_temp,
    )
    if args.boot_dump:
        core.setbootdump(args.boot_dump)
    for index, spec in enumerate(args.watch):
        rng, period = _parse_watch(spec, guest)
        monitor.watch_range_when_ready(rng, period, core.scratch / f"watch-{index}.dump")
    return core


def _parse_watch(spec: str, guest: GuestMachine) -> tuple[tuple[int, int], int]:
    parts = spec.split(":")
    try:
        if parts[0] == "pool":
            if len(parts) != 2:
                raise ValueError("expected pool:period")
            return guest.profile.pool_region, int(parts[1], 0)
        if len(parts) != 3:
            raise ValueError("expected start:length:period")
        return (int(parts[0], 0), int(parts[1], 0)), int(parts[2], 0)
    except ValueError as exc:
        raise BadArguments(f"bad --watch spec {spec!r}: {exc}") from exc


def _cmd_console(args) -> int:
    core = _build_core(args)
    server = None
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        static = Path(args.static_dir) if args.static_dir else None
        if static is None:
            candidate = Path.cwd() / "frontend" / "dist"
            static = candidate if candidate.is_dir() else None
        server = ApiServer(core, host=host or "127.0.0.1", port=int(port), static_dir=static)
        server.start()
        print(f"API listening on {server.url}", file=sys.stderr)
    if args.run_steps:
        core.monitor.run(args.run_steps)
    else:
        core.monitor.start_background()
    try:
        if args.no_repl:
            threading.Event().wait()
        else:
            repl(core)
    except KeyboardInterrupt:
        pass
    finally:
        core.monitor.stop_background()
        if server is not None:
            server.stop()
    return 0


def _cmd_report(args) -> int:
    core = _build_core(args)
    if not args.watch:
        # a report without acquisition would be blind; default to the pool
        core.monitor.watch_range_when_ready(
            core.guest.profile.pool_region, args.sample_every, core.scratch / "watch-pool.dump"
        )
    if not args.boot_dump:
        core.setbootdump(str(Path(args.out) / "boot.dump"))
    bundle = run_report(core.monitor, args.out, steps=args.steps, sample_every=args.sample_every)
    for path in bundle.files:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    console = sub.add_parser("console", help="interactive debug console (+ optional HTTP API)")
    _add_guest_args(console)
    console.add_argument("--listen", metavar="ADDR:PORT",
                         help="serve the JSON API (and web console) on this address")
    console.add_argument("--static-dir", metavar="DIR",
                         help="static files for the web console (default ./frontend/dist)")
    console.add_argument("--run-steps", type=int, default=0, metavar="N",
                         help="advance exactly N steps at startup instead of stepping continuously")
    console.add_argument("--no-repl", action="store_true",
                         help="serve only; do not read console commands from stdin")
    console.set_defaults(fn=_cmd_console)

    report = sub.add_parser("report", help="headless scenario replay with figures and CSV")
    _add_guest_args(report)
    report.add_argument("--out", required=True, metavar="DIR", help="output directory")
    report.add_argument("--steps", type=int, default=160, help="steps to run (default 160)")
    report.add_argument("--sample-every", type=int, default=4,
                        help="sampling stride for the tick timeline (default 4)")
    report.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("console", "report", "-h", "--help"):
        argv.insert(0, "console")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HybisError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
