"""Command-line entry point: ``powertalk-sim <command> --scenario <file|name>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from powertalk.errors import PowerTalkError
from powertalk.sim.runner import COMMANDS, run
from powertalk.sim.scenario import SHIPPED, load_scenario


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="powertalk-sim",
        description="Simulate power-talk signaling over DC microgrids.",
    )
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument(
        "--scenario", required=True, help=f"scenario YAML file, or a shipped name ({', '.join(SHIPPED)})"
    )
    ap.add_argument("--seed", type=int, default=None, help="overrides the scenario seed (default: scenario's, else 0)")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    ap.add_argument("--trace", action="store_true", help="also write per-run / per-slot detail CSVs")
    ap.add_argument("--gamma", type=float, action="append", help="ber only: gamma in volts, repeatable")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _progress(row) -> None:
    print(
        f"Q={row.q:2d} gamma={row.gamma:g} V  delta={100 * row.delta_mean:.3f}% "
        f"(+/- {100 * row.delta_stderr:.3f}%)",
        file=sys.stderr,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print(json.dumps({"error": "invalid-argument", "message": "--seed must be in [0, 2**64)"}), file=sys.stderr)
        return 2
    try:
        scenario = load_scenario(args.scenario)
        arts = run(
            args.command,
            scenario,
            args.seed,
            args.out,
            trace=args.trace,
            gammas=args.gamma,
            progress=_progress if args.verbose else None,
        )
    except PowerTalkError as err:
        print(json.dumps({"error": err.kind, "message": str(err)}), file=sys.stderr)
        return 1
    except OSError as err:
        print(json.dumps({"error": "io", "message": str(err)}), file=sys.stderr)
        return 1
    for p in arts.files:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
