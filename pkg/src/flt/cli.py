"""Command line: ``flt run|compare|validate|version``.

Exit status is 0 on success, 2 for invalid configuration or arguments and
1 for failures during a run.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import ConfigError, load_config
from .experiment import OUTPUT_DIR_ENV, ReportError, StageError, compare_report, run_scenario

log = logging.getLogger("flt")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = run_scenario(cfg, out_dir=args.out, log=log.info)
    print(f"wrote {result.out_dir}")
    return 0


def _cmd_compare(args) -> int:
    report = compare_report(args.csv, json_path=args.json, svg_path=args.svg)
    print(report["table"])
    return 0


def _cmd_validate(args) -> int:
    load_config(args.config)
    print(f"{args.config}: ok")
    return 0


def _cmd_version(args) -> int:
    print(f"flt {__version__}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flt", description="Relatedness-aware federated learning experiments.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print errors and final paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("config")
    p.add_argument("--out", default=None,
                   help=f"output directory (overrides ${OUTPUT_DIR_ENV} and output.dir in the file)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="summarise one or more metrics.csv files")
    p.add_argument("csv", nargs="+")
    p.add_argument("--json", default=None, help="also write the table as JSON")
    p.add_argument("--svg", default=None, help="also write accuracy curves as SVG")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("validate", help="check a scenario file without running it")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=_cmd_version)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (StageError, ReportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
