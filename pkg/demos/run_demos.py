"""Run every demo configuration through the command line entry point.

Usage::

    python demos/run_demos.py [scenario ...]

Outputs go to ``demos/output/<config name>``; rerunning replaces them.
"""
import sys
import time
from pathlib import Path

from rtwave.harness.cli import main

HERE = Path(__file__).resolve().parent
CONFIGS = {
    "equilibrium": "equilibrium.toml",
    "stability-map": "stability_map.toml",
    "neutral-sigma": "neutral_sigma.toml",
    "simulate": "simulate.toml",
    "decay-fit": "decay_fit.toml",
    "verify-inequalities": "verify_inequalities.toml",
    "sigma-limit": "sigma_limit.toml",
}


def run_demos(selected):
    failures = 0
    for scenario in selected:
        cfg = HERE / "configs" / CONFIGS[scenario]
        out = HERE / "output" / cfg.stem
        start = time.perf_counter()
        status = main([scenario, "--config", str(cfg), "--out", str(out)])
        print(f"  {scenario}: exit {status} in {time.perf_counter() - start:.1f} s")
        failures += status != 0
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(run_demos(sys.argv[1:] or list(CONFIGS)))
