"""Quantum-information upper bounds on regret and mutual information.

When two models differ only in their initial states, the record-level
relative entropy cannot exceed the quantum relative entropy of the
initial states, and the mutual information of an initial-state ensemble
cannot exceed its Holevo information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from .estimators import EstimateWithError, PriorEnsemble, ensemble_statistics, mutual_information, \
    pair_statistics, regret
from .linalg import DEFAULT_TOLERANCES, LinalgError, Tolerances, eig_hermitian, herm_part, matrix_log_psd
from .model import ModelPair, validate_density
from .trajectory import SimConfig


class BoundError(ValueError):
    pass


def _check_density(rho, tol: Tolerances, name: str) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise BoundError(f"{name} must be a square matrix")
    bad = validate_density(rho, tol)
    if bad:
        raise BoundError(f"{name} is not a density matrix: " + "; ".join(v.message for v in bad))
    return herm_part(rho)


def support_mismatch(rho, sigma, tol: Tolerances = DEFAULT_TOLERANCES) -> float:
    """Weight of ``rho`` on the kernel of ``sigma``; positive means supp(rho) is not inside supp(sigma)."""
    spec = eig_hermitian(herm_part(np.asarray(sigma, dtype=complex)), tol)
    kernel = spec.eigenvectors[:, spec.eigenvalues <= tol.support]
    if kernel.shape[1] == 0:
        return 0.0
    return float(np.real(np.trace(kernel.conj().T @ np.asarray(rho, dtype=complex) @ kernel)))


def relative_entropy_with_flag(rho, sigma, tol: Tolerances = DEFAULT_TOLERANCES) -> tuple[float, bool]:
    """tr rho (ln rho - ln sigma) and whether the support clamp fired.

    With a support mismatch the value is finite but large: the kernel of
    ``sigma`` is assigned the eigenvalue ``tol.log_floor``.
    """
    rho = _check_density(rho, tol, "rho")
    sigma = _check_density(sigma, tol, "sigma")
    if rho.shape != sigma.shape:
        raise BoundError("rho and sigma must share a dimension")
    lam = np.clip(eig_hermitian(rho, tol).eigenvalues, 0.0, None)
    neg_entropy = float(np.sum(xlogy(lam, lam)))
    try:
        log_sigma, _ = matrix_log_psd(sigma, tol=tol)
    except LinalgError as exc:
        raise BoundError(str(exc)) from exc
    cross = float(np.real(np.trace(rho @ log_sigma)))
    clamped = support_mismatch(rho, sigma, tol) > tol.support
    return max(neg_entropy - cross, 0.0), clamped


def quantum_relative_entropy(rho, sigma, tol: Tolerances = DEFAULT_TOLERANCES) -> float:
    return relative_entropy_with_flag(rho, sigma, tol)[0]


def holevo_information(ensemble: Sequence[tuple[float, np.ndarray]], tol: Tolerances = DEFAULT_TOLERANCES) -> float:
    """chi = sum_i w_i D(rho_i || sum_j w_j rho_j)."""
    if not ensemble:
        raise BoundError("ensemble is empty")
    weights = np.array([w for w, _ in ensemble], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise BoundError("weights must be non-negative and sum to 1")
    states = [_check_density(r, tol, f"state {i}") for i, (_, r) in enumerate(ensemble)]
    avg = sum(w * r for w, r in zip(weights, states))
    return float(sum(w * relative_entropy_with_flag(r, avg, tol)[0] for w, r in zip(weights, states) if w > 0))


@dataclass
class BoundReport:
    bound_value: float
    estimate: EstimateWithError
    clamped: bool = False
    horizons: tuple[float, ...] = ()
    trend: list[EstimateWithError] = field(default_factory=list)
    label: str = ""

    @property
    def satisfied(self) -> bool:
        return self.estimate.mean <= self.bound_value + 3.0 * self.estimate.std_error \
            if np.isfinite(self.estimate.std_error) else self.estimate.mean <= self.bound_value

    @property
    def satisfied_all(self) -> bool:
        """The bound holds at every horizon, each at 3 standard errors."""
        return all(e.mean <= self.bound_value + 3.0 * (e.std_error if np.isfinite(e.std_error) else 0.0)
                   for e in self.trend or [self.estimate])

    def per_time(self) -> list[float]:
        """Estimate divided by horizon; expected to decay like 1/T."""
        return [e.mean / t for e, t in zip(self.trend, self.horizons)]

    def as_dict(self) -> dict:
        return {"bound": self.bound_value, "estimate": self.estimate.as_dict(), "satisfied": self.satisfied,
                "clamped": self.clamped, "horizons": list(self.horizons),
                "trend": [e.mean for e in self.trend], "trend_std_error": [e.std_error for e in self.trend]}


def check_bound_qre(pair: ModelPair, cfg: SimConfig, horizons: Sequence[float] | None = None,
                    tol: Tolerances = DEFAULT_TOLERANCES) -> BoundReport:
    """Regret of the nominal filter against D(rho0 || rho0') at nested horizons."""
    if not pair.true_model.same_dynamics(pair.nominal_model):
        raise BoundError("the models must differ only in their initial states")
    bound, clamped = relative_entropy_with_flag(pair.true_model.rho0, pair.nominal_model.rho0, tol)
    stats = pair_statistics(pair, cfg, horizons)
    name = "regret"
    trend = [stats.estimate(name, h, f"regret_T{t:g}") for h, t in enumerate(stats.horizons)]
    final = regret(pair, cfg, stats)
    return BoundReport(bound, final, clamped, stats.horizons, trend, "bound_qre")


def check_bound_holevo(ens: PriorEnsemble, cfg: SimConfig, horizons: Sequence[float] | None = None,
                       tol: Tolerances = DEFAULT_TOLERANCES) -> BoundReport:
    """Mutual information of the ensemble against the Holevo information of its initial states."""
    base = ens.models[0]
    if not all(base.same_dynamics(m) for m in ens.models[1:]):
        raise BoundError("ensemble models must differ only in their initial states")
    chi = holevo_information([(w, m.rho0) for w, m in zip(ens.weights, ens.models)], tol)
    table = ensemble_statistics(ens, cfg, horizons=horizons)
    trend = [mutual_information(ens, cfg, table, h) for h in range(len(table.horizons))]
    return BoundReport(chi, trend[-1], False, table.horizons, trend, "bound_holevo")
