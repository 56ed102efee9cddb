"""Regret, relative entropy and information bounds for continuously monitored quantum systems."""

from .bounds import BoundReport, check_bound_holevo, check_bound_qre, holevo_information, quantum_relative_entropy
from .estimators import (
    EstimateWithError,
    PriorEnsemble,
    bayes_regret,
    capacity_search,
    divergence_integrand,
    divergence_lnLambda,
    ensemble_statistics,
    mutual_information,
    pair_statistics,
    regret,
    regret_gaussian,
    regret_poissonian,
)
from .filter import filter_step, log_likelihood_ratio, log_likelihood_ratio_integral, run_filter, run_filter_bank
from .linalg import pauli
from .model import MeasurementKind, ModelPair, OperatorSchedule, QuantumModel, make_model, validate
from .trajectory import SimConfig, TrajectoryRecord, ensemble_iter, simulate_record

__version__ = "0.1.0"
