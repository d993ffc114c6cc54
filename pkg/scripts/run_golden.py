#!/usr/bin/env python3
"""Run the bundled full-suite configuration and print the verdicts.

Usage: python scripts/run_golden.py [outdir]
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from kolmolab.runner import run  # noqa: E402


def main():
    here = os.path.dirname(os.path.abspath(__file__))
    cfg = os.path.join(here, "..", "configs", "ex71ii_full.run")
    outdir = sys.argv[1] if len(sys.argv) > 1 else None
    code, report = run(cfg, outdir=outdir)
    for name, verdict in report["verdicts"].items():
        print(f"{name:>18}: {verdict}")
    print(f"{'config sha256':>18}: {report['config_sha256'][:16]}...")
    return code


if __name__ == "__main__":
    sys.exit(main())
