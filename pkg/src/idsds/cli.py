"""Command-line front end: ``idsds <command> --config cfg.json --set key.path=value``.

Exit codes: 0 success, 2 config or format error, 3 numeric fault,
4 some campaign cells failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import campaign
from .errors import ConfigError, FormatError, NumericFault

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_PARTIAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idsds", description="Deletion-based evaluation of attribution methods.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the synthetic dataset into runs/<name>/data",
        "train": "train every configured model from scratch",
        "finetune": "train and fine-tune every model with patch-deletion augmentation",
        "eval": "IDSDS of the method roster on every fine-tuned model",
        "compare": "IDSDS, SDS, IDS(fixed) and IDS(updated) side by side",
        "stability": "ranking stability across seeds, patch counts or baselines",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", "-c", help="JSON config file (defaults are used for missing keys)")
        p.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config path")
        p.add_argument("--resume", action="store_true", help="continue an interrupted run with the same name")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    rp = sub.add_parser("report", help="summarize a finished run directory")
    rp.add_argument("run", help="path to runs/<name>")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            sys.stdout.write(campaign.render_report(args.run))
            return EXIT_OK
        cfg = campaign.load_config(args.config, args.set)
        if args.print_config:
            sys.stdout.write(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
            return EXIT_OK
        campaign.worker_count()
        result = campaign.COMMANDS[args.command](cfg, resume=args.resume)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if result.failures:
        print(f"{len(result.failures)} cell(s) failed", file=sys.stderr)
        manifest = json.loads((result.path / "manifest.json").read_text())
        sys.stderr.write(campaign.status_table(manifest))
        return EXIT_PARTIAL
    print(f"{args.command} finished: {result.path}")
    if args.command == "compare":
        for name, table in result.outputs["tables"].items():
            sys.stdout.write(f"model {name}\n{table}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
