"""Command line entry point ``rtwave``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import ConfigError
from .config import SCENARIOS, load_config
from .runner import run

__all__ = ["main", "build_parser"]


def build_parser():
    p = argparse.ArgumentParser(
        prog="rtwave",
        description="Equilibria, linear stability and nonlinear simulation of two-layer "
                    "compressible viscous surface waves.")
    p.add_argument("scenario", choices=SCENARIOS)
    p.add_argument("--config", required=True, help="TOML or JSON experiment configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="random seed (overrides seed)")
    p.add_argument("--threads", type=int, help="worker threads for sweeps (overrides threads)")
    return p


def main(argv=None):
    """Parse arguments, run the scenario and return the exit status.

    Exit status is 0 on success, 2 for configuration errors and 1 when the
    scenario fails.
    """
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "threads": args.threads, "output_dir": args.out}
    try:
        cfg = load_config(args.config, args.scenario, overrides)
    except ConfigError as exc:
        print(f"rtwave: configuration error: {exc}", file=sys.stderr)
        return 2
    status = run(cfg)
    if status == 0:
        print(f"rtwave: {cfg.scenario} finished; outputs in {Path(cfg.output_dir).resolve()}")
    return status


if __name__ == "__main__":
    sys.exit(main())
