"""Command line: ``run``, ``validate`` and ``cut``."""

from __future__ import annotations

import argparse
import logging
import sys

from .engine import ConfigurationError, EngineError, World, run
from .network import NetworkError, build_network, derive_sensor_graph, minimal_cut
from .outputs import emit_outputs
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _load(path: str):
    scenario = load_scenario(path)
    World(scenario).finish()  # catches run-time wiring problems early
    return scenario


def cmd_validate(args) -> int:
    try:
        sc = _load(args.scenario)
    except (ScenarioError, ConfigurationError) as exc:
        print(f"{args.scenario}: invalid", file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    print(
        f"{args.scenario}: ok ({len(sc.topology.units)} units, {len(sc.partition.inner())} clusters, "
        f"{sc.simulation.n_steps} steps of {sc.simulation.step_s:g} s)"
    )
    return EXIT_OK


def cmd_cut(args) -> int:
    import yaml

    try:
        with open(args.scenario) as fh:
            raw = yaml.safe_load(fh) or {}
        net = build_network(raw.get("network") or {})
        part = minimal_cut(derive_sensor_graph(net))
    except (OSError, yaml.YAMLError, NetworkError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    topo = part.topology
    for uid in topo.sort_units(topo.units):
        u = topo.units[uid]
        pieces = " ".join(f"{iv.road}[{iv.start:g},{iv.end:g})" for iv in u.intervals)
        print(f"{uid}: {pieces}  in={','.join(sorted(u.inputs))} out={','.join(sorted(u.outputs))}")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        sc = _load(args.scenario).with_overrides(seed=args.seed, duration_s=args.duration, workers=args.workers)
    except (ScenarioError, ConfigurationError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    try:
        out = run(sc)
        emit_outputs(out, args.out, sc.network.sensors, sc.topology.units)
    except EngineError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        for k, v in exc.dump.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    bad = sum(not r.balanced for r in out.ledger)
    print(
        f"{sc.simulation.n_steps} steps, {len(out.commands)} commands, "
        f"conservation ledger {'balanced' if not bad else f'off at {bad} steps'}; outputs in {args.out}"
    )
    return EXIT_OK if not bad else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybrid-traffic", description="Hybrid micro/macro road traffic simulation.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write the output series")
    r.add_argument("--scenario", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--duration", type=float, help="simulated seconds")
    r.add_argument("--workers", type=int, help="cluster worker threads")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("cut", help="print the minimal-cut units of a scenario's network")
    c.add_argument("scenario")
    c.set_defaults(func=cmd_cut)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
