"""Belavkin filters for homodyne and photon-counting records.

The unnormalised posterior ``f_t`` is carried as the pair
``(rho_t, ell_t)`` with ``rho_t = f_t / tr f_t`` and ``ell_t = ln tr f_t``.
One step of the linear filter is applied in Kraus form, so positivity
is preserved up to rounding:

The environment part is the channel

    Phi(f) = K f K^+ + dt sum_k c_k f c_k^+,   K = exp(-iH dt) (I - dt sum_k c_k^+ c_k)^(1/2),

which preserves the trace exactly, so an unmeasured model keeps ell = 0.

homodyne::

    f' = E G Phi(f) G^+ E^+,   E = exp(a dy / 2),  G = exp(-dt (a^+ a + a^2) / 8)

counting::

    f~ = e^dt G Phi(f) G^+,   G = exp(-dt a^+ a / 2)
    f' = a f~ a^+ on a count, f~ otherwise.

Both agree with an Euler step of the linear filtering equation to first
order, and both are exact for commuting (classical) models without
transitions.  All maps are linear in ``f``, so they are precomputed as
superoperators acting on row-major ``vec(rho)`` and a batch of
trajectories advances with a handful of matrix products per step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import expm
from scipy.special import logsumexp, ndtri

from .linalg import eig_hermitian, operator_norm
from .model import MeasurementKind, QuantumModel, observable_from_coupling

LOG_TRACE_LIMIT = 700.0
_TAYLOR_CUTOFF = 1e-18
_MAX_TAYLOR = 80


class FilterError(RuntimeError):
    pass


def _rowmul(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``x @ m`` computed the same way for every row count.

    A single row would go through a matrix-vector kernel that rounds
    differently, which would make a record depend on its batch.
    """
    if x.shape[0] == 1:
        return (np.concatenate([x, x]) @ m)[:1]
    return x @ m


def _kron_sandwich(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Superoperator of X -> left X right^dagger on row-major vec(X)."""
    return np.kron(left, right.conj())


@dataclass
class Hygiene:
    """Worst-case numerical health of the normalised states over a run."""

    max_trace_error: float = 0.0
    max_hermiticity_error: float = 0.0
    min_eigenvalue: float = math.inf
    projections: int = 0
    log_trace_flags: int = 0
    steps: int = 0

    def merge(self, other: "Hygiene") -> "Hygiene":
        return Hygiene(
            max(self.max_trace_error, other.max_trace_error),
            max(self.max_hermiticity_error, other.max_hermiticity_error),
            min(self.min_eigenvalue, other.min_eigenvalue),
            self.projections + other.projections,
            self.log_trace_flags + other.log_trace_flags,
            self.steps + other.steps,
        )

    def ok(self, trace_tol: float = 1e-10, herm_tol: float = 1e-10, eig_tol: float = -1e-8) -> bool:
        return (self.max_trace_error <= trace_tol and self.max_hermiticity_error <= herm_tol
                and self.min_eigenvalue >= eig_tol)

    def as_dict(self) -> dict:
        return {
            "max_trace_error": self.max_trace_error,
            "max_hermiticity_error": self.max_hermiticity_error,
            "min_eigenvalue": self.min_eigenvalue if math.isfinite(self.min_eigenvalue) else None,
            "projections": self.projections,
            "log_trace_flags": self.log_trace_flags,
            "steps": self.steps,
        }


@dataclass
class _Segment:
    moments: np.ndarray  # (D, 3): vec(q^T), vec(q2^T), vec((q ln q)^T)
    base: np.ndarray  # superoperator of the drift/dissipation part
    a: np.ndarray
    a_norm: float
    # homodyne: W_p = B_p @ base with sum_p s^p B_p the superoperator of exp(s a) X exp(s a)^+
    powers: list = field(default_factory=list)
    w_terms: list = field(default_factory=list)
    nilpotent_at: int | None = None
    w_cache: dict = field(default_factory=dict)
    jump: np.ndarray | None = None  # counting: row-form superoperator of a f~ a^+
    base_rows: np.ndarray | None = None

    def w_stack(self, order: int) -> np.ndarray:
        """Rows indexed by (i, p): entry [(i, p), j] is W_p[j, i], for p = 0..order."""
        stack = self.w_cache.get(order)
        if stack is None:
            while len(self.w_terms) <= order:
                self._extend()
            stack = np.stack([w.T for w in self.w_terms[: order + 1]], axis=1).reshape(-1, self.base.shape[0])
            self.w_cache[order] = stack
        return stack

    def _extend(self) -> None:
        p = len(self.w_terms)
        while len(self.powers) <= p:
            k = len(self.powers)
            self.powers.append(self.powers[-1] @ self.a / k)
        b = sum(_kron_sandwich(self.powers[k], self.powers[p - k]) for k in range(p + 1))
        self.w_terms.append(b @ self.base)


def _q_log_q(q: np.ndarray) -> np.ndarray:
    spec = eig_hermitian(q)
    lam = np.clip(spec.eigenvalues, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(lam > 0.0, lam * np.log(np.where(lam > 0.0, lam, 1.0)), 0.0)
    return spec.apply(lambda _: vals)


class FilterKernel:
    """Precomputed one-step maps of a model's filter on a fixed time grid.

    States are batches of row-major ``vec(rho)`` of shape ``(n, d*d)``.
    """

    def __init__(self, model: QuantumModel, dt: float, n_steps: int):
        if dt <= 0.0:
            raise FilterError("dt must be positive")
        self.model = model
        self.kind = model.kind
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        d = model.dim
        self.d = d
        self.D = d * d
        self._perm = np.arange(self.D).reshape(d, d).T.ravel()
        self._diag = np.arange(d) * (d + 1)
        times = np.arange(self.n_steps) * self.dt
        starts = np.asarray(model.breakpoints())
        self.segment_of_step = np.searchsorted(starts, times + 1e-12 * self.dt, side="right") - 1
        self.segments = [self._build(t) for t in starts]
        self.max_rate_dt = max(operator_norm(s.moments[:, 0].reshape(d, d)) for s in self.segments) * self.dt

    def _build(self, t: float) -> _Segment:
        m, dt, d = self.model, self.dt, self.d
        a = np.array(m.a.at(t))
        h = np.array(m.hamiltonian.at(t))
        cs = [np.array(c.at(t)) for c in m.dissipators]
        q = observable_from_coupling(a, m.kind)
        q2 = q @ q
        eye = np.eye(d, dtype=complex)
        decay = sum((c.conj().T @ c for c in cs), np.zeros((d, d), dtype=complex))
        # environment channel K X K^+ + dt sum c X c^+ with K^+K + dt sum c^+c = I exactly
        lam, vec = np.linalg.eigh(eye - dt * 0.5 * (decay + decay.conj().T))
        if lam.min() < -1e-12:
            raise FilterError(f"dt={dt:g} is too coarse for the dissipators; need dt * ||sum c^+c|| <= 1")
        k_env = expm(-1j * h * dt) @ (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.conj().T
        env = _kron_sandwich(k_env, k_env) + dt * sum((_kron_sandwich(c, c) for c in cs),
                                                      np.zeros((self.D, self.D), dtype=complex))
        if m.kind is MeasurementKind.GAUSSIAN:
            g = expm(-0.125 * dt * (a.conj().T @ a + a @ a))
            qlnq = np.zeros_like(q)
        else:
            g = expm(-0.5 * dt * (a.conj().T @ a))
            qlnq = _q_log_q(q)
        base = _kron_sandwich(g, g) @ env
        moments = np.stack([q.T.ravel(), q2.T.ravel(), qlnq.T.ravel()], axis=1)
        seg = _Segment(moments=moments, base=base, a=a, a_norm=operator_norm(a))
        if m.kind is MeasurementKind.GAUSSIAN:
            seg.powers = [eye]
            # a d x d nilpotent matrix satisfies a^d = 0
            for k in range(1, d + 1):
                seg.powers.append(seg.powers[-1] @ a / k)
                if not np.any(seg.powers[-1]):
                    seg.nilpotent_at = k
                    break
        else:
            seg.base = math.exp(dt) * base
            seg.base_rows = seg.base.T.copy()
            seg.jump = (_kron_sandwich(a, a) @ seg.base).T.copy()
        return seg

    def initial_state(self, n: int) -> np.ndarray:
        return np.tile(np.asarray(self.model.rho0).ravel(), (n, 1))

    def moments(self, step: int, v: np.ndarray) -> np.ndarray:
        """Conditional <q>, <q^2>, <q ln q> as real rows of shape (3, n)."""
        seg = self.segments[self.segment_of_step[step]]
        return _rowmul(v, seg.moments).real.T

    def draw(self, step: int, mean: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Record increments generated from this filter's own prediction."""
        dt = self.dt
        if self.kind is MeasurementKind.GAUSSIAN:
            return mean * dt + math.sqrt(dt) * ndtri(u)
        return (u < mean * dt).astype(float)

    def _taylor_order(self, seg: _Segment, s_max: float) -> int:
        x = 2.0 * seg.a_norm * s_max
        term, p = 1.0, 0
        while True:
            if seg.nilpotent_at is not None and p >= 2 * seg.nilpotent_at - 2:
                return p
            nxt = term * x / (p + 1)
            if nxt <= _TAYLOR_CUTOFF and p + 1 > x:
                return p
            term, p = nxt, p + 1
            if p > _MAX_TAYLOR:
                raise FilterError("record increment too large for the series step; reduce dt")

    def step(self, step: int, v: np.ndarray, ell: np.ndarray, dy: np.ndarray,
             hygiene: Hygiene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance a batch by one step; returns (v, ell, failed)."""
        seg = self.segments[self.segment_of_step[step]]
        n = v.shape[0]
        if self.kind is MeasurementKind.GAUSSIAN:
            s = 0.5 * dy
            order = self._taylor_order(seg, float(np.max(np.abs(s))) if n else 0.0)
            # f = sum_p s^p W_p v, as one product over the (i, p) index
            s_pow = s[:, None] ** np.arange(order + 1)
            f = _rowmul((v[:, :, None] * s_pow[:, None, :]).reshape(n, -1), seg.w_stack(order))
        else:
            f = _rowmul(v, seg.base_rows)
            jumps = np.flatnonzero(dy > 0.0)
            if jumps.size:
                f[jumps] = _rowmul(v[jumps], seg.jump)
        tr = f[:, self._diag].sum(axis=1).real
        failed = ~(np.isfinite(tr) & (tr > 0.0))
        safe_tr = np.where(failed, 1.0, tr)
        with np.errstate(divide="ignore", invalid="ignore"):
            new_ell = ell + np.log(np.where(failed, np.nan, tr))
        rho = f / safe_tr[:, None]
        if failed.any():
            rho[failed] = v[failed]
        rho = self._hygiene(rho, hygiene)
        hygiene.log_trace_flags += int(np.count_nonzero(np.abs(new_ell[~failed]) > LOG_TRACE_LIMIT))
        return rho, new_ell, failed

    def _hygiene(self, rho: np.ndarray, hygiene: Hygiene) -> np.ndarray:
        d = self.d
        adj = rho[:, self._perm].conj()
        if rho.shape[0]:
            hygiene.max_hermiticity_error = max(hygiene.max_hermiticity_error,
                                                float(np.max(np.abs(rho - adj))))
        rho = 0.5 * (rho + adj)
        if d == 1:
            lam_min = rho[:, 0].real
        elif d == 2:
            r00, r11, r01 = rho[:, 0].real, rho[:, 3].real, rho[:, 1]
            lam_min = 0.5 * (r00 + r11) - np.sqrt(0.25 * (r00 - r11) ** 2 + np.abs(r01) ** 2)
        else:
            lam_min = np.linalg.eigvalsh(rho.reshape(-1, d, d))[:, 0]
        if rho.shape[0]:
            hygiene.min_eigenvalue = min(hygiene.min_eigenvalue, float(np.min(lam_min)))
        bad = np.flatnonzero(lam_min < 0.0)
        if bad.size:
            lam, vec = np.linalg.eigh(rho[bad].reshape(-1, d, d))
            lam = np.clip(lam, 0.0, None)
            lam /= lam.sum(axis=1, keepdims=True)
            fixed = np.einsum("nik,nk,njk->nij", vec, lam, vec.conj())
            rho[bad] = fixed.reshape(-1, self.D)
            rho[bad] = 0.5 * (rho[bad] + rho[bad][:, self._perm].conj())
            hygiene.projections += int(bad.size)
        tr = rho[:, self._diag].sum(axis=1).real
        rho /= tr[:, None]
        if rho.shape[0]:
            hygiene.max_trace_error = max(hygiene.max_trace_error,
                                          float(np.max(np.abs(rho[:, self._diag].sum(axis=1) - 1.0))))
        hygiene.steps += 1
        return rho


class Observer:
    """Receives per-step filter statistics from :func:`sweep`."""

    def step(self, k: int, dy: np.ndarray, moments: list[np.ndarray], ells: list[np.ndarray]) -> None:
        pass

    def finish(self, ells: list[np.ndarray], failed: np.ndarray) -> None:
        pass


def sweep(kernels: Sequence[FilterKernel], n: int, *, increments: np.ndarray | None = None,
          uniforms: np.ndarray | None = None, generator: int = 0, observer: Observer | None = None,
          hygiene: Hygiene | None = None, keep_increments: bool = False) -> tuple[np.ndarray | None, np.ndarray]:
    """Run several filters side by side over ``n`` records.

    With ``increments`` the records are given; otherwise ``kernels[generator]``
    generates them from the ``uniforms`` stream (one column per step), which
    makes that kernel's trace the matched filter of the generated record.
    Returns the increments (if kept or given) and the per-record failure mask.
    """
    observer = observer or Observer()
    hygiene = hygiene if hygiene is not None else Hygiene()
    n_steps = kernels[0].n_steps
    states = [k.initial_state(n) for k in kernels]
    ells = [np.zeros(n) for _ in kernels]
    failed = np.zeros(n, dtype=bool)
    out = increments if increments is not None else (np.empty((n, n_steps)) if keep_increments else None)
    for k in range(n_steps):
        moments = [kern.moments(k, v) for kern, v in zip(kernels, states)]
        if increments is not None:
            dy = increments[:, k]
        else:
            dy = kernels[generator].draw(k, moments[generator][0], uniforms[:, k])
            if out is not None:
                out[:, k] = dy
        observer.step(k, dy, moments, ells)
        for j, kern in enumerate(kernels):
            states[j], ells[j], fail = kern.step(k, states[j], ells[j], dy, hygiene)
            failed |= fail
    observer.finish(ells, failed)
    return out, failed


@dataclass
class FilterTrace:
    """Per-step conditional moments at the left grid points t_0..t_{N-1}.

    ``log_trace[k]`` is ell at t_k (so ``log_trace[0] == 0``) and
    ``final_log_trace`` is ell_T.
    """

    kind: MeasurementKind
    dt: float
    q_mean: np.ndarray
    q2_mean: np.ndarray
    log_trace: np.ndarray
    final_log_trace: float
    q_log_q_mean: np.ndarray | None = None
    failed: bool = False
    label: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.q_mean)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt

    @property
    def positive(self) -> np.ndarray:
        return self.q_mean > 0.0


class _TraceRecorder(Observer):
    def __init__(self, n_kernels: int, n: int, n_steps: int):
        self.data = np.empty((n_kernels, 4, n, n_steps))
        self.final = None
        self.failed = None

    def step(self, k, dy, moments, ells):
        for j, (mom, ell) in enumerate(zip(moments, ells)):
            self.data[j, :3, :, k] = mom
            self.data[j, 3, :, k] = ell

    def finish(self, ells, failed):
        self.final = np.stack(ells)
        self.failed = failed

    def traces(self, kernels: Sequence[FilterKernel], row: int) -> list[FilterTrace]:
        out = []
        for j, kern in enumerate(kernels):
            d = self.data[j]
            out.append(FilterTrace(
                kind=kern.kind, dt=kern.dt, q_mean=d[0, row].copy(), q2_mean=d[1, row].copy(),
                log_trace=d[3, row].copy(), final_log_trace=float(self.final[j, row]),
                q_log_q_mean=d[2, row].copy() if kern.kind is MeasurementKind.POISSONIAN else None,
                failed=bool(self.failed[row]), label=kern.model.label,
            ))
        return out


def _check_record(model: QuantumModel, rec) -> None:
    if MeasurementKind(rec.kind) is not model.kind:
        raise FilterError(f"record kind {rec.kind} does not match model kind {model.kind.value}")


def run_filters(models: Sequence[QuantumModel], rec, hygiene: Hygiene | None = None) -> list[FilterTrace]:
    """Run every model's filter on one record."""
    for m in models:
        _check_record(m, rec)
    kernels = [FilterKernel(m, rec.dt, rec.n_steps) for m in models]
    recorder = _TraceRecorder(len(kernels), 1, rec.n_steps)
    sweep(kernels, 1, increments=np.asarray(rec.increments, dtype=float)[None, :],
          observer=recorder, hygiene=hygiene)
    return recorder.traces(kernels, 0)


def run_filter(m: QuantumModel, rec, hygiene: Hygiene | None = None) -> FilterTrace:
    return run_filters([m], rec, hygiene)[0]


def filter_step(m: QuantumModel, rho: np.ndarray, log_trace: float, dy: float, dt: float,
                t: float = 0.0, hygiene: Hygiene | None = None) -> tuple[np.ndarray, float]:
    """One filter step from time ``t`` for a single state; returns (rho, ell).

    Raises
    ------
    FilterError
        On a count the state cannot produce (zero intensity) or a
        non-finite trace.
    """
    kern = FilterKernel(m, dt, int(round(t / dt)) + 1)
    k = kern.n_steps - 1
    v = np.asarray(rho, dtype=complex).ravel()[None, :]
    v2, ell, failed = kern.step(k, v, np.array([log_trace], dtype=float), np.array([dy], dtype=float),
                                hygiene if hygiene is not None else Hygiene())
    if failed[0]:
        raise FilterError("degenerate step: the filter assigns zero likelihood to this increment")
    return v2[0].reshape(m.dim, m.dim), float(ell[0])


def _same_grid(a: FilterTrace, b: FilterTrace) -> None:
    if a.n_steps != b.n_steps or a.dt != b.dt:
        raise FilterError("traces have different horizons or steps")


def log_likelihood_ratio(tr_true: FilterTrace, tr_nom: FilterTrace) -> float:
    """ln Lambda = ell_T - ell'_T."""
    _same_grid(tr_true, tr_nom)
    return tr_true.final_log_trace - tr_nom.final_log_trace


def log_likelihood_ratio_integral(tr_true: FilterTrace, tr_nom: FilterTrace, rec) -> float:
    """ln Lambda as the stochastic integral of the conditional means.

    Raises
    ------
    FilterError
        For a count where the nominal (or true) intensity is not positive.
    """
    _same_grid(tr_true, tr_nom)
    dy = np.asarray(rec.increments, dtype=float)
    m, mp, dt = tr_true.q_mean, tr_nom.q_mean, tr_true.dt
    if tr_true.kind is MeasurementKind.GAUSSIAN:
        return float(np.sum((m - mp) * dy) - 0.5 * np.sum((m * m - mp * mp) * dt))
    jumps = dy > 0.0
    if np.any((m[jumps] <= 0.0) | (mp[jumps] <= 0.0)):
        raise FilterError("count at zero conditional intensity; likelihood ratio is undefined")
    return float(np.sum(np.log(m[jumps] / mp[jumps]) * dy[jumps]) - np.sum((m - mp) * dt))


@dataclass
class BankTrace:
    """Bayes mixture over a bank of filters on one record."""

    weights: np.ndarray  # (N, K) posterior weights at t_k
    q_hat: np.ndarray  # (N,) Bayes estimate
    mix_log_trace: np.ndarray  # (N,) ln sum_j pi_j exp(ell_j) at t_k
    final_mix_log_trace: float
    traces: list[FilterTrace]


def mixture_weights(log_prior: np.ndarray, ells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior weights and mixture log-trace; ``ells`` has the bank on axis 0."""
    logits = log_prior.reshape((-1,) + (1,) * (ells.ndim - 1)) + ells
    lse = logsumexp(logits, axis=0)
    return np.exp(logits - lse), lse


def run_filter_bank(models: Sequence[QuantumModel], prior, rec) -> BankTrace:
    if not models:
        raise FilterError("filter bank is empty")
    prior = np.asarray(prior, dtype=float)
    if prior.shape != (len(models),) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
        raise FilterError("prior must be a probability vector over the bank")
    if len({(m.kind, m.dim) for m in models}) != 1:
        raise FilterError("bank models must share kind and dimension")
    traces = run_filters(models, rec)
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)
    ells = np.stack([t.log_trace for t in traces])
    w, lse = mixture_weights(log_prior, ells)
    if not np.all(np.isfinite(lse)):
        raise FilterError("all bank weights underflowed")
    means = np.stack([t.q_mean for t in traces])
    final = logsumexp(log_prior + np.array([t.final_log_trace for t in traces]))
    return BankTrace(w.T, np.sum(w * means, axis=0), lse, float(final), traces)


TRACE_COLUMNS = ("label", "t", "q_mean", "q2_mean", "log_trace")


def write_trace_csv(path, traces: Sequence[FilterTrace]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for tr in traces:
            for t, m, m2, ell in zip(tr.times, tr.q_mean, tr.q2_mean, tr.log_trace):
                w.writerow([tr.label, f"{t:.17g}", f"{m:.17g}", f"{m2:.17g}", f"{ell:.17g}"])
