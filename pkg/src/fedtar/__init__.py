"""Federated temporal adaptation with demographic adapters and residual aggregation."""

__version__ = "0.1.0"

from .adapters import ClientWeights, ModelSpec, NumericalError, TrainConfig, client_local_update, init_weights
from .demographics import GmmModel, PatientProfile, gmm_fit, gmm_soft_assign
from .federation import (DriftConfig, ExperimentConfig, ExperimentResult, default_config,
                         generate_synthetic_cohort, make_config, run_experiment)
from .stats import BootstrapReport, paired_bootstrap
from .temporal import TemporalPolicy, closed_form_betas, compute_alphas, residual_step

__all__ = [
    "BootstrapReport", "ClientWeights", "DriftConfig", "ExperimentConfig", "ExperimentResult",
    "GmmModel", "ModelSpec", "NumericalError", "PatientProfile", "TemporalPolicy", "TrainConfig",
    "client_local_update", "closed_form_betas", "compute_alphas", "default_config",
    "generate_synthetic_cohort", "gmm_fit", "gmm_soft_assign", "init_weights", "make_config",
    "paired_bootstrap", "residual_step", "run_experiment",
]
