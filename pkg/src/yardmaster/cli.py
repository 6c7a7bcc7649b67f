"""Command line entry points: serve the orchestrator, run the shipped
scenario headless, load/dump the document store, emit codec vectors."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import comms
from .config import SiteConfig
from .fixtures import default_fixture_dir, write_fixture_dir
from .orchestrator import ScenarioConfig, Session, run_scenario
from .store import ParamStore


def _load_site(path) -> SiteConfig:
    return SiteConfig.load(path) if path else SiteConfig()


def cmd_serve(args) -> int:
    from .http_api import serve

    cfg = _load_site(args.config)
    session = Session(cfg, fixture_dir=args.fixtures or default_fixture_dir())
    print(f"serving on http://{args.host}:{args.port} "
          f"(rate={args.rate}, fixtures={args.fixtures or default_fixture_dir()})")
    serve(session, host=args.host, port=args.port, rate=args.rate)
    return 0


def cmd_run_scenario(args) -> int:
    scenario = ScenarioConfig(
        cycles=args.cycles, seed=args.seed,
        site=_load_site(args.config),
        fixture_dir=Path(args.fixtures) if args.fixtures else None,
        max_sim_time=args.max_sim_time,
        estop_at=args.estop_at,
        events_path=Path(args.events) if args.events else None)
    report = run_scenario(scenario)
    print(f"cycles completed : {report.cycles_completed}")
    print(f"simulated time   : {report.sim_time:.1f} s")
    print(f"wall time        : {report.wall_time:.1f} s")
    print(f"task status      : {report.task_status}")
    print(f"excavated (net)  : {report.total_excavated:.6f} m^3")
    print(f"dumped at point5 : {report.dumped_at_point5:.6f} m^3")
    print(f"conservation     : {report.conservation_residual:.3e} m^3")
    print(f"event digest     : {report.event_digest}")
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=2,
                                                sort_keys=True))
        print(f"report written   : {args.report}")
    return 0


def cmd_store(args) -> int:
    store = ParamStore(Path(args.root))
    if args.store_cmd == "load":
        counts = store.load_fixture(Path(args.fixture))
        store.flush()
        print(f"loaded {counts['tasks']} tasks, {counts['parameters']} parameters "
              f"into {args.root}")
    elif args.store_cmd == "dump":
        store.load_fixture(Path(args.root))
        for rec in store.all_tasks():
            print(json.dumps(rec.to_json(), sort_keys=True))
        for rec in store.all_parameters():
            print(json.dumps(rec.to_json(), sort_keys=True))
    return 0


def cmd_comms(args) -> int:
    if args.comms_cmd == "vectors":
        if args.output:
            with open(args.output, "w") as f:
                n = comms.write_vectors(f)
            print(f"wrote {n} vectors to {args.output}")
        else:
            comms.write_vectors(sys.stdout)
    return 0


def cmd_fixtures(args) -> int:
    cfg = _load_site(args.config)
    write_fixture_dir(Path(args.output), cfg)
    print(f"scenario fixtures written to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="yardmaster",
                                description="construction-site simulator and "
                                            "task orchestrator")
    sub = p.add_subparsers(dest="cmd", required=True)

    serve = sub.add_parser("serve", help="run the HTTP control service")
    serve.add_argument("--config", help="site config JSON")
    serve.add_argument("--fixtures", help="fixture directory (tasks/parameters)")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8080)
    serve.add_argument("--rate", choices=("real", "max"), default="real")
    serve.set_defaults(fn=cmd_serve)

    run = sub.add_parser("run-scenario", help="run the load-haul-dump scenario")
    run.add_argument("--cycles", type=int, default=3)
    run.add_argument("--seed", type=int, default=42)
    run.add_argument("--config", help="site config JSON")
    run.add_argument("--fixtures", help="fixture directory")
    run.add_argument("--report", help="write the full report JSON here")
    run.add_argument("--events", help="write the step/transition log (JSON lines)")
    run.add_argument("--max-sim-time", type=float, default=1800.0)
    run.add_argument("--estop-at", type=float, default=None,
                     help="inject an emergency stop at this simulated second")
    run.set_defaults(fn=cmd_run_scenario)

    store = sub.add_parser("store", help="document store utilities")
    store.add_argument("--root", default="./store")
    store_sub = store.add_subparsers(dest="store_cmd", required=True)
    load = store_sub.add_parser("load", help="load a fixture directory")
    load.add_argument("fixture")
    store_sub.add_parser("dump", help="print every record as JSON lines")
    store.set_defaults(fn=cmd_store)

    cm = sub.add_parser("comms", help="codec utilities")
    cm_sub = cm.add_subparsers(dest="comms_cmd", required=True)
    vectors = cm_sub.add_parser("vectors", help="emit the conformance vectors")
    vectors.add_argument("-o", "--output")
    cm.set_defaults(fn=cmd_comms)

    fx = sub.add_parser("fixtures", help="regenerate scenario fixtures")
    fx.add_argument("--config", help="site config JSON")
    fx.add_argument("--output", default=str(default_fixture_dir()))
    fx.set_defaults(fn=cmd_fixtures)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
