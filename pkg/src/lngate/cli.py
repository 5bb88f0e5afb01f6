"""Command-line entry point.

    lngate run <name|file.scn> [--seed N] [--json PATH] [--dump-chain PATH]
                               [--fee-ppm N] [--btc-usd N]
    lngate list
    lngate bytes <name|file.scn>
    lngate demo gateway|iot [--host H] [--port P] ...

Exit codes: 0 all assertions passed, 1 an assertion failed, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional

from . import scenarios, tcp

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _write(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _load(name: str) -> scenarios.Scenario:
    try:
        return scenarios.load_scenario(name)
    except FileNotFoundError as exc:
        raise _Usage(f"{exc}; try 'lngate list'") from None
    except scenarios.ScenarioParseError as exc:
        raise _Usage(str(exc)) from None


class _Usage(Exception):
    pass


def cmd_run(args) -> int:
    sc = _load(args.scenario)
    report, chain = scenarios.run_with_chain(sc, seed=args.seed, fee_ppm=args.fee_ppm, btc_usd=args.btc_usd)
    if args.json:
        _write(args.json, scenarios.dumps_report(report))
    if args.dump_chain:
        chain.dump(args.dump_chain)
    out = sys.stderr if args.json == "-" else sys.stdout
    for a in report["assertions"]:
        status = "PASS" if a["passed"] else "FAIL"
        detail = "" if a["passed"] else f"  (actual {a['actual']!r}, expected {a['expected']!r})"
        print(f"{status}  {a['expect']}{detail}", file=out)
    for e in report["errors"]:
        print(f"note  line {e['line']}: {e['action']} -> {e['error']}: {e['message']}", file=out)
    verdict = "passed" if report["passed"] else "FAILED"
    print(f"{report['scenario']} (seed {report['seed']}): {verdict}", file=out)
    return EXIT_OK if report["passed"] else EXIT_FAILED


def cmd_list(args) -> int:
    for name in scenarios.scenario_names():
        print(f"{name:24s} {scenarios.load_scenario(name).description}")
    return EXIT_OK


def cmd_bytes(args) -> int:
    for label, n in scenarios.report_bytes(_load(args.scenario)).items():
        print(f"{label:20s} {n}")
    return EXIT_OK


def _demo_config(args) -> tcp.DemoConfig:
    test_size = os.environ.get(scenarios.TEST_PAILLIER_ENV) == "1"
    return tcp.DemoConfig(seed=args.seed, capacity=args.capacity, fee_ppm=args.fee_ppm,
                          paillier_bits=1024 if test_size else 2048, allow_test_size=test_size)


def cmd_demo(args) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    cfg = _demo_config(args)
    if args.role == "gateway":
        metrics = tcp.serve_gateway(cfg, args.host, args.port)
    else:
        metrics = tcp.run_iot(cfg, [args.amount] * args.payments, args.host, args.port)
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lngate", description="LNGate scenario runner")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and check its assertions")
    run.add_argument("scenario", help="shipped scenario name or path to a .scn file")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--json", metavar="PATH", help="write the JSON report ('-' for stdout)")
    run.add_argument("--dump-chain", metavar="PATH", help="write the final chain as JSON")
    run.add_argument("--fee-ppm", type=int, help="override the gateway service fee (parts per million)")
    run.add_argument("--btc-usd", type=int, help="override the BTC/USD rate used for usd amounts")
    run.set_defaults(func=cmd_run)

    lst = sub.add_parser("list", help="list shipped scenarios")
    lst.set_defaults(func=cmd_list)

    nbytes = sub.add_parser("bytes", help="IoT-link bytes per flow for a scenario")
    nbytes.add_argument("scenario")
    nbytes.set_defaults(func=cmd_bytes)

    demo = sub.add_parser("demo", help="run one side of the IoT link over TCP")
    demo.add_argument("role", choices=("gateway", "iot"))
    demo.add_argument("--host", default=tcp.DEFAULT_HOST)
    demo.add_argument("--port", type=int, default=tcp.DEFAULT_PORT)
    demo.add_argument("--seed", type=int, default=0, help="shared pairing seed; must match on both sides")
    demo.add_argument("--capacity", type=int, default=1_000_000, help="channel capacity in sat")
    demo.add_argument("--fee-ppm", type=int, default=10_000)
    demo.add_argument("--payments", type=int, default=1, help="number of payments (iot side)")
    demo.add_argument("--amount", type=int, default=10_000, help="sat per payment (iot side)")
    demo.set_defaults(func=cmd_demo)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for flag in ("seed", "fee_ppm", "btc_usd"):
        value = getattr(args, flag, None)
        if value is not None and value < 0:
            parser.error(f"--{flag.replace('_', '-')} must not be negative")
    if getattr(args, "btc_usd", None) == 0:
        parser.error("--btc-usd must be positive")
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"lngate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"lngate: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
