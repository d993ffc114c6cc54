"""Command line front end.

Subcommands:
  run <config>     execute every check requested by the config
  audit <config>   run only the hypothesis audit
  presets          list operator families and their parameter constraints

Exit codes: 0 all verdicts acceptable, 1 failed check or stage error,
2 configuration/schema error.  KOLMOLAB_THREADS caps the BLAS thread
count when set.
"""

from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_env():
    n = os.environ.get("KOLMOLAB_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def main(argv=None):
    _apply_thread_env()
    parser = argparse.ArgumentParser(
        prog="kolmolab",
        description="Desk-scale checks for coupled Kolmogorov evolution "
                    "operators")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a run configuration")
    p_run.add_argument("config")
    p_run.add_argument("--output", default=None,
                       help="override the config's output directory")
    p_audit = sub.add_parser("audit", help="hypothesis audit only")
    p_audit.add_argument("config")
    p_audit.add_argument("--output", default=None)
    sub.add_parser("presets", help="list families and constraints")
    args = parser.parse_args(argv)

    from .runner import ConfigError, audit_only, list_presets, run

    if args.command == "presets":
        rows = list_presets()
        width = max(len(name) for name, _ in rows)
        for name, constraint in rows:
            print(f"{name:<{width}}  {constraint}")
        return 0

    try:
        if args.command == "run":
            code, report = run(args.config, outdir=args.output)
            for name, verdict in report["verdicts"].items():
                print(f"{name}: {verdict}")
            return code
        code, result = audit_only(args.config, outdir=args.output)
        for name, verdict in result["sections"].items():
            print(f"{name}: {'PASS' if verdict else 'FAIL'}")
        print(f"audit: {result['verdict']}")
        return code
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
