"""Metrics, baselines, experiment orchestration and the command-line interface."""

from shapleak.harness.experiment import (
    COLUMNS,
    ExperimentConfig,
    ExperimentConfigError,
    ResultRow,
    ResultTable,
    emit_csv,
    emit_plotdata,
    expand_settings,
    parse_sampling_error,
    read_csv,
    run_experiment,
    summarize,
)
from shapleak.harness.metrics import (
    l1_loss,
    macc_vector,
    per_feature_l1,
    rg_e,
    rg_n,
    rg_u,
    spearman,
)

__all__ = [
    "COLUMNS",
    "ExperimentConfig",
    "ExperimentConfigError",
    "ResultRow",
    "ResultTable",
    "emit_csv",
    "emit_plotdata",
    "expand_settings",
    "parse_sampling_error",
    "read_csv",
    "run_experiment",
    "summarize",
    "l1_loss",
    "macc_vector",
    "per_feature_l1",
    "rg_e",
    "rg_n",
    "rg_u",
    "spearman",
]
