"""Classical reference results used to check the quantum code.

Nothing here touches matrices or the filter kernels: the hidden-Markov
filter works on probability vectors, and the drift-sign formulas are
one-dimensional integrals evaluated by quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import xlogy

from .filter import FilterTrace
from .model import MeasurementKind


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class HmmModel:
    """Continuous-time Markov chain observed through its emission values.

    ``rates[i, j]`` is the jump rate from state i to state j (i != j); the
    diagonal is ignored and recomputed so rows sum to zero.
    """

    rates: np.ndarray
    emissions: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        n = len(self.emissions)
        if rates.shape != (n, n):
            raise OracleError("rates must be n x n")
        off = rates - np.diag(np.diag(rates))
        if np.any(off < 0):
            raise OracleError("transition rates must be non-negative")
        init = np.asarray(self.initial, dtype=float)
        if init.shape != (n,) or np.any(init < 0) or abs(init.sum() - 1.0) > 1e-12:
            raise OracleError("initial distribution must lie on the simplex")
        object.__setattr__(self, "rates", off - np.diag(off.sum(axis=1)))
        object.__setattr__(self, "emissions", np.asarray(self.emissions, dtype=float))
        object.__setattr__(self, "initial", init)

    @property
    def n_states(self) -> int:
        return len(self.emissions)


def wonham_filter(h: HmmModel, rec) -> FilterTrace:
    """Unnormalised Wonham / point-process filter on the record grid.

    Per step, the unnormalised weights ``u`` evolve as

    * drift records: ``u_j <- exp(h_j dy - h_j^2 dt / 2) ((1 - r_j dt) u_j + dt sum_k Q_kj u_k)``
    * count records: ``u_j <- exp((1 - h_j) dt) ((1 - r_j dt) u_j + dt sum_k Q_kj u_k)``,
      times ``h_j`` on a count,

    with ``r_j`` the exit rate of state j.  The log of the total weight is
    accumulated before renormalising.
    """
    kind = MeasurementKind(rec.kind)
    dy_all = np.asarray(rec.increments, dtype=float)
    dt = rec.dt
    hval = h.emissions
    if kind is MeasurementKind.POISSONIAN and np.any(hval < 0):
        raise OracleError("counting intensities must be non-negative")
    exit_rate = -np.diag(h.rates)
    inflow = h.rates - np.diag(np.diag(h.rates))
    n = len(dy_all)
    means, seconds, qlogq, ells = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    p = h.initial.copy()
    ell = 0.0
    h_logh = xlogy(hval, hval)
    for k, dy in enumerate(dy_all):
        means[k] = float(np.dot(p, hval))
        seconds[k] = float(np.dot(p, hval * hval))
        qlogq[k] = float(np.dot(p, h_logh))
        ells[k] = ell
        moved = dt * (inflow.T @ p)
        if kind is MeasurementKind.GAUSSIAN:
            u = np.exp(hval * dy - 0.5 * hval ** 2 * dt) * ((1.0 - exit_rate * dt) * p + moved)
        else:
            u = np.exp((1.0 - hval) * dt) * ((1.0 - exit_rate * dt) * p + moved)
            if dy > 0:
                u = u * hval
        total = float(u.sum())
        if not total > 0:
            raise OracleError(f"zero likelihood at step {k}")
        ell += math.log(total)
        p = u / total
    return FilterTrace(kind=kind, dt=dt, q_mean=means, q2_mean=seconds, log_trace=ells,
                       final_log_trace=ell,
                       q_log_q_mean=qlogq if kind is MeasurementKind.POISSONIAN else None,
                       label="oracle")


def closed_form_divergence(kind: str, params, T: float) -> float:
    """Relative entropy of constant-drift Gaussian or constant-rate Poisson records.

    ``kind`` is ``"gaussian_constant_drift"`` with ``params = (mu, mu_nominal)``
    or ``"poisson_constant_rate"`` with ``params = (lam, lam_nominal)``.
    """
    a, b = params
    if kind == "gaussian_constant_drift":
        return 0.5 * (a - b) ** 2 * T
    if kind == "poisson_constant_rate":
        if b <= 0:
            raise OracleError("nominal rate must be positive")
        return T * (xlogy(a, a) - xlogy(a, b) - a + b)
    raise OracleError(f"unknown closed form {kind!r}")


# Drift-sign discrimination: a two-level system with measured observable
# diag(+1, -1) and no dynamics.  An initial state with weight p on the +1
# level produces y_t ~ p N(t, t) + (1 - p) N(-t, t), and the posterior
# weight of +1 given y_t is p e^y / (p e^y + (1 - p) e^-y).

def _log_evidence(p: float, y):
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log(p) + y, np.log1p(-p) - y)


def _posterior_mean(p: float, y):
    if p <= 0.0:
        return -np.ones_like(y)
    if p >= 1.0:
        return np.ones_like(y)
    return np.tanh(y + 0.5 * (math.log(p) - math.log1p(-p)))


def _mixture_expectation(p: float, t: float, func) -> float:
    """E[func(y_t)] when the +1 level has initial weight p."""
    total = 0.0
    sd = math.sqrt(t)
    for weight, sign in ((p, 1.0), (1.0 - p, -1.0)):
        if weight == 0.0:
            continue
        val, _ = integrate.quad(lambda z: func(sign * t + sd * z) * math.exp(-0.5 * z * z),
                                -np.inf, np.inf, epsabs=1e-13, epsrel=1e-11, limit=200)
        total += weight * val / math.sqrt(2 * math.pi)
    return total


def qnd_divergence(p: float, p_nominal: float, T: float) -> float:
    """D(P || P') for the drift-sign channel at horizon T."""
    if T <= 0:
        return 0.0
    return _mixture_expectation(p, T, lambda y: float(_log_evidence(p, y) - _log_evidence(p_nominal, y)))


def qnd_regret(p: float, p_nominal: float, T: float) -> float:
    """Half the time-integrated squared gap between the two posterior means."""
    def integrand(t):
        if t == 0.0:
            return 0.5 * ((2 * p - 1) - (2 * p_nominal - 1)) ** 2
        return 0.5 * _mixture_expectation(
            p, t, lambda y: float(_posterior_mean(p, y) - _posterior_mean(p_nominal, y)) ** 2)
    val, _ = integrate.quad(integrand, 0.0, T, epsabs=1e-11, epsrel=1e-9, limit=200)
    return val


def qnd_mutual_information(ps, weights, T: float) -> float:
    ps = np.asarray(ps, dtype=float)
    weights = np.asarray(weights, dtype=float)
    pbar = float(np.dot(weights, ps))
    return float(sum(w * qnd_divergence(p, pbar, T) for p, w in zip(ps, weights) if w > 0))


def qnd_bayes_regret(ps, weights, T: float) -> float:
    ps = np.asarray(ps, dtype=float)
    weights = np.asarray(weights, dtype=float)
    pbar = float(np.dot(weights, ps))
    return float(sum(w * qnd_regret(p, pbar, T) for p, w in zip(ps, weights) if w > 0))
