"""Experiment orchestration, analysis and the command line interface."""
from .analysis import (ConvergenceReport, DecayFit, ExtensionReport, KernelReport, KornReport,
                       TableCell, decay_rate_factor, deviatoric_kernel_check,
                       extension_bound_check, fit_decay, is_nonincreasing,
                       korn_constant_estimate, lower_law_for_jump, sigma_limit_experiment,
                       stability_table, vandermonde_check)
from .config import SCENARIOS, ExperimentConfig, load_config, parse_config
from .runner import RunResult, execute, run

__all__ = [
    "ConvergenceReport", "DecayFit", "ExtensionReport", "KernelReport", "KornReport",
    "TableCell", "decay_rate_factor", "deviatoric_kernel_check", "extension_bound_check",
    "fit_decay", "is_nonincreasing", "korn_constant_estimate", "lower_law_for_jump",
    "sigma_limit_experiment", "stability_table", "vandermonde_check", "SCENARIOS",
    "ExperimentConfig", "load_config", "parse_config", "RunResult", "execute", "run",
]
