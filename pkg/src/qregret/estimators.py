"""Monte Carlo estimates of filter regret, relative entropy and mutual information.

Every estimator for a scenario reads the same simulated records
(common random numbers): one pass generates records under the true
model, runs the true and nominal filters side by side, and accumulates
all per-record functionals at once.  Time integrals are left-Riemann
sums on the simulation grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

from .filter import FilterKernel, Hygiene, Observer, mixture_weights, sweep
from .model import MeasurementKind, ModelPair, QuantumModel
from .trajectory import SimConfig, chunks, map_chunks, simulate_batch


class EstimationError(RuntimeError):
    pass


@dataclass
class EstimateWithError:
    mean: float
    std_error: float
    n: int
    label: str = ""
    failures: int = 0
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_samples(cls, samples, label: str = "", failures: int = 0) -> "EstimateWithError":
        x = np.asarray(samples, dtype=float)
        x = x[np.isfinite(x)]
        n = len(x)
        if n == 0:
            return cls(math.nan, math.nan, 0, label, failures, x)
        se = float(np.std(x, ddof=1) / math.sqrt(n)) if n >= 2 else math.nan
        return cls(float(np.mean(x)), se, n, label, failures, x)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "n": self.n,
                "label": self.label, "failures": self.failures}


def combined_stderr(*estimates: EstimateWithError) -> float:
    """Standard errors added in quadrature."""
    return math.sqrt(sum(e.std_error ** 2 for e in estimates))


def agree(a: EstimateWithError, b: EstimateWithError, sigmas: float = 3.0) -> bool:
    return abs(a.mean - b.mean) <= sigmas * combined_stderr(a, b)


def counting_loss(q, estimate):
    """l(q, e) = q ln(q/e) - q + e, with 0 ln 0 = 0."""
    q = np.asarray(q, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return xlogy(q, q) - xlogy(q, estimate) - q + estimate


def _cmse(second, mean, estimate):
    """E[(q - e)^2 | Y] from the conditional moments."""
    return second - 2.0 * estimate * mean + estimate * estimate


def _cmle(q_log_q, mean, estimate):
    """E[l(q, e) | Y] from the conditional moments."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return q_log_q - xlogy(mean, estimate) - mean + estimate


def excess_loss(kind: MeasurementKind, moments: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    """Per-record (cmse - cmmse)/2 or (cmle - cmmle) at one time step.

    ``moments`` are the true filter's rows (<q>, <q^2>, <q ln q>).
    """
    mean, second, qlq = moments
    if kind is MeasurementKind.GAUSSIAN:
        return 0.5 * (_cmse(second, mean, estimate) - _cmse(second, mean, mean))
    return _cmle(qlq, mean, estimate) - _cmle(qlq, mean, mean)


# ---------------------------------------------------------------- pair pass

PAIR_FIELDS = ("regret", "regret_reduced", "integrand", "lnlambda", "lnlambda_integral")


class _PairObserver(Observer):
    def __init__(self, kind: MeasurementKind, dt: float, n: int, horizon_steps: list[int]):
        self.kind, self.dt = kind, dt
        self.horizon_steps = horizon_steps
        self.out = {f: np.zeros((n, len(horizon_steps))) for f in PAIR_FIELDS}
        self.acc = {f: np.zeros(n) for f in PAIR_FIELDS if f != "lnlambda"}
        self.count_failure = np.zeros(n, dtype=bool)
        self.filled: set[int] = set()

    def _snapshot(self, col: int, ells) -> None:
        self.filled.add(col)
        for f, v in self.acc.items():
            self.out[f][:, col] = v
        self.out["lnlambda"][:, col] = ells[0] - ells[1]

    def step(self, k, dy, moments, ells):
        if k in self.horizon_steps:
            self._snapshot(self.horizon_steps.index(k), ells)
        dt = self.dt
        m, mp = moments[0][0], moments[1][0]
        self.acc["regret"] += excess_loss(self.kind, moments[0], mp) * dt
        if self.kind is MeasurementKind.GAUSSIAN:
            gap = m - mp
            self.acc["integrand"] += 0.5 * gap * gap * dt
            self.acc["regret_reduced"] += 0.5 * gap * gap * dt
            self.acc["lnlambda_integral"] += gap * dy - 0.5 * (m * m - mp * mp) * dt
        else:
            loss = counting_loss(m, mp)
            self.acc["integrand"] += loss * dt
            self.acc["regret_reduced"] += (xlogy(m, m) - xlogy(m, mp) - m + mp) * dt
            jump = dy > 0
            bad = jump & ((m <= 0) | (mp <= 0))
            self.count_failure |= bad
            use = jump & ~bad
            log_ratio = np.zeros_like(m)
            log_ratio[use] = np.log(m[use] / mp[use])
            self.acc["lnlambda_integral"] += log_ratio * dy - (m - mp) * dt

    def finish(self, ells, failed):
        for col in range(len(self.horizon_steps)):
            if col not in self.filled:
                self._snapshot(col, ells)


def _pair_chunk(pair: ModelPair, cfg: SimConfig, indices: Sequence[int], horizon_steps: list[int]):
    obs = _PairObserver(pair.kind, cfg.dt, len(indices), horizon_steps)
    hyg = Hygiene()
    _, failed = simulate_batch(pair.true_model, cfg, indices, 0, filters=[pair.nominal_model],
                               observer=obs, hygiene=hyg, keep_increments=False)
    return obs.out, failed | obs.count_failure, hyg


@dataclass
class PairStatistics:
    """Per-record functionals of one simulated ensemble, at nested horizons."""

    kind: MeasurementKind
    horizons: tuple[float, ...]
    values: dict  # field -> (n_traj, n_horizons)
    failed: np.ndarray
    hygiene: Hygiene

    @property
    def failures(self) -> int:
        return int(np.count_nonzero(self.failed))

    def estimate(self, name: str, horizon: int = -1, label: str | None = None) -> EstimateWithError:
        x = self.values[name][~self.failed, horizon]
        return EstimateWithError.from_samples(x, label or name, self.failures)


def pair_statistics(pair: ModelPair, cfg: SimConfig, horizons: Sequence[float] | None = None) -> PairStatistics:
    steps = cfg.horizon_steps(horizons)
    jobs = [(pair, cfg, list(c), steps) for c in chunks(cfg.n_traj, cfg.chunk_size)]
    parts = map_chunks(_pair_chunk, jobs, cfg.workers)
    values = {f: np.concatenate([p[0][f] for p in parts]) for f in PAIR_FIELDS}
    failed = np.concatenate([p[1] for p in parts])
    hyg = Hygiene()
    for p in parts:
        hyg = hyg.merge(p[2])
    return PairStatistics(pair.kind, tuple(s * cfg.dt for s in steps), values, failed, hyg)


def _stats(pair, cfg, stats):
    return stats if stats is not None else pair_statistics(pair, cfg)


def regret_gaussian(pair: ModelPair, cfg: SimConfig, stats: PairStatistics | None = None) -> EstimateWithError:
    """Half the time-integrated excess mean-square error of the nominal filter."""
    if pair.kind is not MeasurementKind.GAUSSIAN:
        raise EstimationError("regret_gaussian needs homodyne models")
    return _stats(pair, cfg, stats).estimate("regret", label="regret_gaussian")


def regret_poissonian(pair: ModelPair, cfg: SimConfig, stats: PairStatistics | None = None,
                      form: str = "raw") -> EstimateWithError:
    """Time-integrated excess mean loss of the nominal counting filter.

    ``form="raw"`` evaluates cmle - cmmle including the <q ln q> terms;
    ``form="reduced"`` uses the conditional form <q> ln(<q>/<q'>) - <q> + <q'>.
    """
    if pair.kind is not MeasurementKind.POISSONIAN:
        raise EstimationError("regret_poissonian needs counting models")
    if form not in ("raw", "reduced"):
        raise EstimationError(f"form must be 'raw' or 'reduced', not {form!r}")
    name = "regret" if form == "raw" else "regret_reduced"
    return _stats(pair, cfg, stats).estimate(name, label=f"regret_poissonian_{form}")


def divergence_lnLambda(pair: ModelPair, cfg: SimConfig, stats: PairStatistics | None = None) -> EstimateWithError:
    """Mean log-likelihood ratio ell_T - ell'_T over true-model records."""
    return _stats(pair, cfg, stats).estimate("lnlambda", label="divergence_lnlambda")


def divergence_integrand(pair: ModelPair, cfg: SimConfig, stats: PairStatistics | None = None) -> EstimateWithError:
    return _stats(pair, cfg, stats).estimate("integrand", label="divergence_integrand")


def regret(pair: ModelPair, cfg: SimConfig, stats: PairStatistics | None = None) -> EstimateWithError:
    if pair.kind is MeasurementKind.GAUSSIAN:
        return regret_gaussian(pair, cfg, stats)
    return regret_poissonian(pair, cfg, stats)


@dataclass
class LemmaCheck:
    """Worst-record gap between ell_T - ell'_T and the stochastic integral, per step size."""

    dts: tuple[float, ...]
    worst_gaps: tuple[float, ...]
    failures: int
    excluded: int = 0
    hygiene: Hygiene = field(default_factory=Hygiene)

    @property
    def slope(self) -> float:
        """Least-squares slope of log(gap) against log(dt)."""
        return float(np.polyfit(np.log(self.dts), np.log(self.worst_gaps), 1)[0])

    @property
    def shrink(self) -> float:
        """Coarsest-grid gap over finest-grid gap (``dts`` runs from coarse to fine)."""
        return self.worst_gaps[0] / self.worst_gaps[-1]


def lemma_check(pair: ModelPair, cfg: SimConfig, n_records: int = 100,
                refinements: Sequence[int] = (1, 4, 16)) -> LemmaCheck:
    """Compare the two routes to ln Lambda on ``n_records`` records at dt/r for each r.

    Records are simulated once on the finest grid and summed into coarser
    increments, so every grid sees the same paths.  A counting record with
    two counts inside one coarse step has no coarse-grid counterpart and is
    left out (reported as ``excluded``).
    """
    refinements = sorted(int(r) for r in refinements)
    finest = refinements[-1]
    if refinements[0] < 1 or any(finest % r for r in refinements):
        raise EstimationError("refinements must be positive integers dividing the largest one")
    fine_cfg = cfg.with_(dt=cfg.dt / finest, n_traj=n_records)
    hyg = Hygiene()
    fine_inc, failed = simulate_batch(pair.true_model, fine_cfg, list(range(n_records)), hygiene=hyg)
    coarse = {}
    keep = ~failed
    for r in refinements:
        n_steps = cfg.with_(dt=cfg.dt / r).n_steps
        coarse[r] = fine_inc.reshape(n_records, n_steps, finest // r).sum(axis=2)
        if pair.kind is MeasurementKind.POISSONIAN:
            keep &= coarse[r].max(axis=1) <= 1.0
    excluded = int(np.count_nonzero(~keep & ~failed))
    dts, gaps, failures = [], [], int(failed.sum())
    for r in refinements:
        sub = cfg.with_(dt=cfg.dt / r, n_traj=n_records)
        inc = coarse[r][keep]
        obs = _PairObserver(pair.kind, sub.dt, len(inc), [sub.n_steps])
        kernels = [FilterKernel(m, sub.dt, sub.n_steps) for m in (pair.true_model, pair.nominal_model)]
        _, fail = sweep(kernels, len(inc), increments=inc, observer=obs, hygiene=hyg)
        fail = fail | obs.count_failure
        failures += int(fail.sum())
        gap = np.abs(obs.out["lnlambda"][~fail, 0] - obs.out["lnlambda_integral"][~fail, 0])
        dts.append(sub.dt)
        gaps.append(float(gap.max()) if gap.size else math.nan)
    return LemmaCheck(tuple(dts), tuple(gaps), failures, excluded, hyg)


# ------------------------------------------------------------ ensemble pass

@dataclass(frozen=True)
class PriorEnsemble:
    thetas: tuple[str, ...]
    models: tuple[QuantumModel, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.models) == 0 or len(self.thetas) != len(self.models) or w.shape != (len(self.models),):
            raise EstimationError("ensemble needs one label and weight per model")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise EstimationError("prior weights must be non-negative and sum to 1")
        if len({(m.kind, m.dim) for m in self.models}) != 1:
            raise EstimationError("ensemble models must share kind and dimension")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "thetas", tuple(self.thetas))

    @property
    def kind(self) -> MeasurementKind:
        return self.models[0].kind

    @property
    def size(self) -> int:
        return len(self.models)

    def with_weights(self, weights) -> "PriorEnsemble":
        return PriorEnsemble(self.thetas, self.models, weights)


class _EnsembleObserver(Observer):
    """Records generated by model ``i`` and filtered by the whole bank."""

    def __init__(self, kind, dt, n, i, log_prior, horizon_steps):
        self.kind, self.dt, self.i = kind, dt, i
        self.log_prior = log_prior
        self.horizon_steps = horizon_steps
        k = len(log_prior)
        self.table = np.zeros((n, len(horizon_steps), k))
        self.regret = np.zeros((n, len(horizon_steps)))
        self.acc = np.zeros(n)
        self.underflow = np.zeros(n, dtype=bool)
        self.filled: set[int] = set()

    def _order(self, seq):
        # the generator is kernel 0; put it back at position i
        seq = list(seq)
        gen = seq.pop(0)
        seq.insert(self.i, gen)
        return seq

    def _snapshot(self, col, ells):
        self.filled.add(col)
        self.table[:, col, :] = np.stack(self._order(ells), axis=1)
        self.regret[:, col] = self.acc

    def step(self, k, dy, moments, ells):
        if k in self.horizon_steps:
            self._snapshot(self.horizon_steps.index(k), ells)
        ordered_ells = np.stack(self._order(ells))
        means = np.stack([m[0] for m in self._order(moments)])
        w, lse = mixture_weights(self.log_prior, ordered_ells)
        self.underflow |= ~np.isfinite(lse)
        q_hat = np.sum(w * means, axis=0)
        self.acc += excess_loss(self.kind, moments[0], q_hat) * self.dt

    def finish(self, ells, failed):
        for col in range(len(self.horizon_steps)):
            if col not in self.filled:
                self._snapshot(col, ells)


def _ensemble_chunk(ens: PriorEnsemble, cfg: SimConfig, i: int, indices, log_prior, horizon_steps):
    others = [m for j, m in enumerate(ens.models) if j != i]
    obs = _EnsembleObserver(ens.kind, cfg.dt, len(indices), i, log_prior, horizon_steps)
    hyg = Hygiene()
    _, failed = simulate_batch(ens.models[i], cfg, indices, stream=i + 1, filters=others,
                               observer=obs, hygiene=hyg, keep_increments=False)
    return obs.table, obs.regret, failed | obs.underflow, hyg


@dataclass
class ReweightTable:
    """Log-traces of every model on records generated by every model.

    ``log_traces[i, r, h, j]`` is ell_j at horizon h on record r drawn from
    model i; ``regret[i, r, h]`` is the regret of the Bayes filter built
    with ``filter_weights`` on that record.
    """

    log_traces: np.ndarray
    regret: np.ndarray
    failed: np.ndarray  # (n_theta, n_traj)
    filter_weights: np.ndarray
    horizons: tuple[float, ...]
    hygiene: Hygiene

    @property
    def failures(self) -> int:
        return int(np.count_nonzero(self.failed))

    def divergences(self, prior, horizon: int = -1) -> list[EstimateWithError]:
        """Per-theta estimates of D(P_i || sum_j prior_j P_j)."""
        with np.errstate(divide="ignore"):
            log_prior = np.log(np.asarray(prior, dtype=float))
        out = []
        for i in range(self.log_traces.shape[0]):
            ok = ~self.failed[i]
            ell = self.log_traces[i, ok, horizon, :]
            mix = logsumexp(log_prior[None, :] + ell, axis=1)
            out.append(EstimateWithError.from_samples(ell[:, i] - mix, f"D_{i}",
                                                      int(np.count_nonzero(~ok))))
        return out

    def regrets(self, horizon: int = -1) -> list[EstimateWithError]:
        return [EstimateWithError.from_samples(self.regret[i, ~self.failed[i], horizon], f"regret_{i}",
                                               int(np.count_nonzero(self.failed[i])))
                for i in range(self.regret.shape[0])]


def weighted_sum(parts: Sequence[EstimateWithError], weights, label: str) -> EstimateWithError:
    """Sum_i w_i * part_i with independent per-part errors."""
    weights = np.asarray(weights, dtype=float)
    mean = float(sum(w * p.mean for w, p in zip(weights, parts) if w > 0))
    se = math.sqrt(sum((w * p.std_error) ** 2 for w, p in zip(weights, parts) if w > 0))
    return EstimateWithError(mean, se, sum(p.n for p in parts), label, sum(p.failures for p in parts))


def ensemble_statistics(ens: PriorEnsemble, cfg: SimConfig, filter_weights=None,
                        horizons: Sequence[float] | None = None) -> ReweightTable:
    """Simulate n_traj records under each model and run the full bank on each."""
    fw = ens.weights if filter_weights is None else np.asarray(filter_weights, dtype=float)
    with np.errstate(divide="ignore"):
        log_prior = np.log(fw)
    steps = cfg.horizon_steps(horizons)
    jobs = [(ens, cfg, i, list(c), log_prior, steps)
            for i in range(ens.size) for c in chunks(cfg.n_traj, cfg.chunk_size)]
    parts = map_chunks(_ensemble_chunk, jobs, cfg.workers)
    per_theta = len(chunks(cfg.n_traj, cfg.chunk_size))
    tables, regrets, fails = [], [], []
    hyg = Hygiene()
    for i in range(ens.size):
        mine = parts[i * per_theta:(i + 1) * per_theta]
        tables.append(np.concatenate([p[0] for p in mine]))
        regrets.append(np.concatenate([p[1] for p in mine]))
        fails.append(np.concatenate([p[2] for p in mine]))
        for p in mine:
            hyg = hyg.merge(p[3])
    return ReweightTable(np.stack(tables), np.stack(regrets), np.stack(fails), fw,
                         tuple(s * cfg.dt for s in steps), hyg)


def mutual_information(ens: PriorEnsemble, cfg: SimConfig, table: ReweightTable | None = None,
                       horizon: int = -1) -> EstimateWithError:
    """I(theta; Y) = sum_i pi_i E_i[ell_i - ln sum_j pi_j e^{ell_j}]."""
    table = table if table is not None else ensemble_statistics(ens, cfg)
    return weighted_sum(table.divergences(ens.weights, horizon), ens.weights, "mutual_information")


def bayes_regret(ens: PriorEnsemble, cfg: SimConfig, table: ReweightTable | None = None,
                 horizon: int = -1) -> EstimateWithError:
    """Prior-averaged regret of the Bayes filter that knows only the prior."""
    table = table if table is not None else ensemble_statistics(ens, cfg)
    if not np.array_equal(table.filter_weights, ens.weights):
        raise EstimationError("table was built with a different Bayes filter prior")
    return weighted_sum(table.regrets(horizon), ens.weights, "bayes_regret")


def prior_grid(n_theta: int, points: int = 101) -> np.ndarray:
    """Grid on the probability simplex; a line of ``points`` priors for two models."""
    if n_theta == 1:
        return np.ones((1, 1))
    if n_theta == 2:
        g = np.linspace(0.0, 1.0, points)
        return np.stack([g, 1.0 - g], axis=1)
    res = 1
    while math.comb(res + n_theta - 1, n_theta - 1) < points:
        res += 1
    out = []

    def rec(prefix, left, slots):
        if slots == 1:
            out.append(prefix + [left])
            return
        for k in range(left + 1):
            rec(prefix + [k], left - k, slots - 1)

    rec([], res, n_theta)
    return np.array(out, dtype=float) / res


@dataclass
class CapacityResult:
    c: EstimateWithError
    pi_star: np.ndarray
    iterations: int
    converged: bool
    minimax: EstimateWithError | None = None  # sup over the prior grid of the pi*-Bayes regret
    grid_argmax: np.ndarray | None = None
    table: ReweightTable | None = field(default=None, repr=False)
    check_table: ReweightTable | None = field(default=None, repr=False)  # the pi*-Bayes pass


def blahut_arimoto(table: ReweightTable, tol: float = 1e-6, max_iter: int = 10_000,
                   horizon: int = -1) -> tuple[np.ndarray, int, bool]:
    """Maximise the sample mutual information over priors on the fixed table."""
    k = table.log_traces.shape[0]
    pi = np.full(k, 1.0 / k)
    for it in range(1, max_iter + 1):
        d = np.array([e.mean for e in table.divergences(pi, horizon)])
        new = pi * np.exp(d - d.max())
        new /= new.sum()
        change = np.max(np.abs(new - pi) / np.maximum(pi, 1e-300))
        pi = new
        if change <= tol:
            return pi, it, True
    return pi, max_iter, False


def capacity_search(ens: PriorEnsemble, cfg: SimConfig, grid: int = 101, tol: float = 1e-6,
                    max_iter: int = 10_000, check_minimax: bool = True,
                    check_cfg: SimConfig | None = None) -> CapacityResult:
    """Capacity of the ensemble channel and its least-favourable prior.

    The prior weights of ``ens`` are ignored.  With ``check_minimax`` the
    records are regenerated under ``check_cfg`` (default ``cfg``) and
    filtered by the Bayes bank with prior pi*, and the worst prior-averaged
    regret over the grid is reported alongside C.  The reweight table only
    needs ell at the horizon while the regret is a time integral, so the
    two passes may use different step sizes.
    """
    if ens.size > 8:
        raise EstimationError("capacity search supports at most 8 models")
    uniform = np.full(ens.size, 1.0 / ens.size)
    table = ensemble_statistics(ens.with_weights(uniform), cfg)
    pi, iters, converged = blahut_arimoto(table, tol, max_iter)
    parts = table.divergences(pi)
    c = weighted_sum(parts, pi, "capacity")
    result = CapacityResult(c, pi, iters, converged, table=table)
    if check_minimax:
        second = ensemble_statistics(ens.with_weights(pi / pi.sum()), check_cfg or cfg, filter_weights=pi)
        regrets = second.regrets()
        best, best_prior = None, None
        for prior in prior_grid(ens.size, grid):
            est = weighted_sum(regrets, prior, "minimax_regret")
            if best is None or est.mean > best.mean:
                best, best_prior = est, prior
        result.minimax = best
        result.grid_argmax = best_prior
        result.check_table = second
    return result
