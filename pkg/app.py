#!/usr/bin/env python3
"""
RFID readout evidence simulator

Runs deterministic logistics scenarios (readers, tags, services, a simulated
evidence blockchain), checks client-side verification verdicts, prints the
anchoring gas model, and can serve a finished run's chain nodes over HTTP.
"""

import argparse
import json
import logging
import os
import sys
from http.server import ThreadingHTTPServer
from pathlib import Path
from typing import Any

from crypto import CryptoSuite, SuiteError, use_suite
from harness import (
    SCENARIO_DIR,
    ScenarioResult,
    Simulation,
    estimate_gas,
    load_gas_reference,
    load_scenario,
    parse_faults,
    report_confirm_time,
    run_scenario,
)
from rpc import DEFAULT_RPC_PORT, NodeRpcHandler
from world import ConfigurationError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfid-evidence", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--nodes", type=int, help="number of chain nodes")
        p.add_argument("--faults", help="fault assignment, e.g. node-1=silent,node-2=lying:fabricate")
        p.add_argument("--block-interval", type=int, help="ticks between blocks")
        p.add_argument("--close-threshold", type=int, help="largest gap still judged close in time")
        p.add_argument("--apart-threshold", type=int, help="smallest gap judged far apart in time")
        p.add_argument("--output", type=Path, help="write the transcript here instead of standard output")

    run = sub.add_parser("run", help="run one scenario file")
    run.add_argument("scenario", type=Path)
    scenario_flags(run)

    suite = sub.add_parser("suite", help="run every shipped scenario")
    suite.add_argument("--directory", type=Path, default=SCENARIO_DIR)
    suite.add_argument("--seeds", type=int, default=1, help="run each scenario with seeds 0..N-1")
    scenario_flags(suite)

    gas = sub.add_parser("gas", help="print annual anchoring cost estimates")
    gas.add_argument("--gas-price", type=float, action="append", help="Gwei; repeatable (default: every policy)")
    gas.add_argument("--writes-per-day", type=int)
    gas.add_argument("--eth-usd", type=float)

    confirm = sub.add_parser("confirm-time", help="print the mean time to confirm for a gas-price policy")
    confirm.add_argument("policy", choices=["fastest", "average", "cheap"])

    serve = sub.add_parser("serve", help="run a scenario, then serve its chain nodes over HTTP")
    serve.add_argument("scenario", type=Path)
    serve.add_argument("--port", type=int, default=int(os.getenv("RPC_LISTEN_PORT", str(DEFAULT_RPC_PORT))))
    scenario_flags(serve)
    return parser


def overrides_from(args: argparse.Namespace) -> tuple[dict[str, Any], dict[str, Any]]:
    """CLI flags win over the scenario's own config, which wins over the environment."""
    config: dict[str, Any] = {}
    for flag, key in (
        ("block_interval", "block_interval"),
        ("close_threshold", "close_threshold"),
        ("apart_threshold", "apart_threshold"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            config[key] = value
    chain: dict[str, Any] = {}
    if getattr(args, "nodes", None) is not None:
        chain["nodes"] = args.nodes
    if getattr(args, "faults", None):
        chain["faults"] = parse_faults(args.faults)
    return config, chain


def write_output(text: str, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        output.write_text(text)
        logger.info(f"Transcript written to {output}")


def summarize(result: ScenarioResult) -> str:
    status = "PASS" if result.passed else "FAIL"
    return f"{status} {result.name} seed={result.seed} checks={len(result.checks)} digest={result.transcript.digest().short()}"


def cmd_run(args: argparse.Namespace) -> int:
    config, chain = overrides_from(args)
    result = run_scenario(load_scenario(args.scenario), args.seed, config, chain)
    write_output(result.transcript.text(), args.output)
    logger.info(summarize(result))
    return 0 if result.passed else 1


def cmd_suite(args: argparse.Namespace) -> int:
    config, chain = overrides_from(args)
    paths = sorted(args.directory.glob("*.json"))
    if not paths:
        raise ConfigurationError(f"No scenarios in {args.directory}")
    scenarios = [load_scenario(path) for path in paths]
    seeds = [args.seed] if args.seed is not None else list(range(args.seeds))
    lines: list[str] = []
    failed = 0
    for scenario in scenarios:
        for seed in seeds:
            result = run_scenario(scenario, seed, config, chain)
            failed += not result.passed
            lines.append(summarize(result))
            for failure in result.failures:
                lines.append(f"  {failure.name}: expected {failure.expected!r}, got {failure.actual!r}")
    lines.append(f"{len(scenarios) * len(seeds) - failed} passed, {failed} failed")
    write_output("\n".join(lines) + "\n", args.output)
    return 0 if failed == 0 else 1


def cmd_gas(args: argparse.Namespace) -> int:
    reference = load_gas_reference()
    prices = args.gas_price or [policy["gas_price_gwei"] for policy in reference["policies"].values()]
    for price in prices:
        estimate = estimate_gas(price, args.writes_per_day, args.eth_usd)
        sys.stdout.write(json.dumps(estimate.to_record(), sort_keys=True) + "\n")
    return 0


def cmd_confirm_time(args: argparse.Namespace) -> int:
    low, high = report_confirm_time(args.policy)
    sys.stdout.write(json.dumps({"policy": args.policy, "seconds": [low, high]}) + "\n")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    config, chain = overrides_from(args)
    simulation = Simulation(load_scenario(args.scenario), args.seed, config, chain).build()
    result = simulation.run()
    logger.info(summarize(result))
    NodeRpcHandler.network = simulation.network
    NodeRpcHandler.contract = simulation.contract
    # ThreadingHTTPServer sets daemon_threads = True
    server = ThreadingHTTPServer(("0.0.0.0", args.port), NodeRpcHandler)
    logger.info(f"Serving {len(simulation.network.nodes)} chain nodes on port {args.port}")
    server.serve_forever()
    return 0


COMMANDS = {
    "run": cmd_run,
    "suite": cmd_suite,
    "gas": cmd_gas,
    "confirm-time": cmd_confirm_time,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.getenv("LOG_LEVEL", "INFO"),
        format="%(asctime)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        suite = CryptoSuite.from_env()
        use_suite(suite)
        logger.debug(f"Using {suite.hash_algorithm} with {suite.signature_scheme} signatures")
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        logger.info("Shutting down gracefully")
        return 0
    except (ConfigurationError, SuiteError) as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
