"""Command-line entry point: ``guardlab <command> CONFIG``.

Exit codes: 0 success, 2 configuration error, 3 draw budget exhausted,
4 guarantee audit failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, DrawBudgetExhausted, GuaranteeAuditError
from .config import dumps_config, load_config
from .experiments import COMMANDS, OUTPUT_ROOT_ENV, setup

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_AUDIT = 0, 2, 3, 4

HELP = {
    "validate-config": "parse and validate a config, print its normalized form",
    "enumerate": "exact gold table and partition function",
    "train": "train the configured methods and save models and curves",
    "sample": "draw guaranteed samples with the configured sampler",
    "report-theorem2": "exact KL decomposition for a, CAP and the configured proposal",
    "learning-curve": "exact KL/AR learning curves for the configured methods",
    "tradeoff": "(-log AR, KL(g||g')) points, including QRS/IMH sweeps",
    "heuristics": "exact KL of heuristic samplers vs trained proposals",
    "sweep-qrs-imh": "projected and exact KL along QRS beta and IMH step sweeps",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guardlab", description=__doc__,
                                epilog=f"Set ${OUTPUT_ROOT_ENV} to override experiment.output_dir.",
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("config", type=Path, help="experiment config file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            cfg = load_config(args.config)
        except OSError as e:
            raise ConfigError(f"cannot read {args.config}: {e.strerror}") from None
        base_dir = args.config.resolve().parent
        if args.command == "validate-config":
            s = setup(cfg, base_dir)
            sys.stdout.write(dumps_config(cfg))
            print(f"# ok: scenario {s.scenario.name}, Z = {s.fm.Z:.6g}, gold support {len(s.fm.gold)}")
            return EXIT_OK
        for path in COMMANDS[args.command](cfg, base_dir):
            print(path)
        return EXIT_OK
    except ConfigError as e:
        print(f"{args.config}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DrawBudgetExhausted as e:
        if e.report is not None:
            print(e.report.to_json(), file=sys.stderr)
        print(f"draw budget exhausted: {e}", file=sys.stderr)
        return EXIT_BUDGET
    except GuaranteeAuditError as e:
        print(f"guarantee audit failed: {e}", file=sys.stderr)
        return EXIT_AUDIT


if __name__ == "__main__":
    sys.exit(main())
