from .analyzer import ANALYSIS_METHODS, SieveAnalyzer
from .baselines import ContingencySlice, fisher_exact, fisher_from_table, hypergeometric_support
from .bayes import bayes_factor, mbs_bayes_factor, model_scan, ps_posterior
from .core import (
    counterfactual_summary,
    expected_counts,
    failure_probs,
    feasibility_check,
    insert_only_interpretations,
    log_likelihood,
    plugin_estimates,
    sieve_strength,
    simulate_subjects,
    vaccine_profile,
)
from .exceptions import (
    ConvergenceError,
    DegenerateDataError,
    InfeasibleModelError,
    ParseError,
    SieveError,
    UnsupportedVariantError,
    ValidationError,
)
from .fit import fit_mle, lrt, perm_lrt, permutation_null
from .io import read_failure_table, write_failure_table
from .methods import METHODS, build_methods
from . import models
from .models import *
from .simulation import (
    AsyncGridRunner,
    builtin_scenarios,
    roc_auc,
    roc_curve,
    run_grid,
    simulate_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "SieveAnalyzer",
    "ANALYSIS_METHODS",
    "AsyncGridRunner",
    "run_grid",
    "builtin_scenarios",
    "simulate_dataset",
    "roc_auc",
    "roc_curve",
    "METHODS",
    "build_methods",
    "fit_mle",
    "lrt",
    "perm_lrt",
    "permutation_null",
    "bayes_factor",
    "mbs_bayes_factor",
    "ps_posterior",
    "model_scan",
    "ContingencySlice",
    "fisher_exact",
    "fisher_from_table",
    "hypergeometric_support",
    "counterfactual_summary",
    "expected_counts",
    "failure_probs",
    "feasibility_check",
    "insert_only_interpretations",
    "log_likelihood",
    "plugin_estimates",
    "sieve_strength",
    "simulate_subjects",
    "vaccine_profile",
    "read_failure_table",
    "write_failure_table",
    "SieveError",
    "ValidationError",
    "ParseError",
    "UnsupportedVariantError",
    "DegenerateDataError",
    "InfeasibleModelError",
    "ConvergenceError",
] + models.__all__
