"""Observation records simulated under a model's own measure.

Records are generated by the normalised filter of the generating model:
homodyne increments ``dy = <q> dt + sqrt(dt) xi`` and counting
increments that are 1 with probability ``<q> dt``.  Randomness comes
from a Philox counter generator keyed by ``(base_seed, stream, index)``;
the k-th 64-bit output drives step k, so any trajectory can be
regenerated alone, in any order, on any worker.
"""

from __future__ import annotations

import csv
import gzip
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .filter import FilterError, FilterKernel, Hygiene, Observer, sweep
from .model import MeasurementKind, QuantumModel, validate

POISSON_RATE_GUARD = 0.05
_UNIT = 2.0 ** -53


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float
    T: float
    n_traj: int
    base_seed: int = 0
    chunk_size: int = 2048
    workers: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise SimulationError("dt must be positive")
        if not self.T >= self.dt * (1 - 1e-12):
            raise SimulationError("T must be at least dt")
        if self.n_traj < 1:
            raise SimulationError("n_traj must be at least 1")
        if not 0 <= self.base_seed < 2 ** 64:
            raise SimulationError("base_seed must fit in 64 bits")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def horizon_steps(self, horizons: Sequence[float] | None) -> list[int]:
        if not horizons:
            return [self.n_steps]
        steps = sorted({int(round(h / self.dt)) for h in horizons})
        if steps[0] < 1 or steps[-1] > self.n_steps:
            raise SimulationError(f"horizons must lie in [dt, T]; got {list(horizons)}")
        return steps

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class TrajectoryRecord:
    kind: MeasurementKind
    dt: float
    increments: np.ndarray
    seed: int
    index: int
    stream: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.increments)

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt

    @property
    def y(self) -> np.ndarray:
        """Integrated record y_{t_k+1} (counts for photon counting)."""
        return np.cumsum(self.increments)


def uniforms(base_seed: int, stream: int, indices: Sequence[int], n_steps: int) -> np.ndarray:
    """Open-interval uniforms, one row per trajectory and one column per step."""
    out = np.empty((len(indices), n_steps))
    # one generator whose state is reset per row; same stream as Philox(key=...)
    gen = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
    zeros = np.zeros(4, dtype=np.uint64)
    for row, idx in enumerate(indices):
        key = np.array([base_seed, (int(stream) << 32) | int(idx)], dtype=np.uint64)
        gen.state = {"bit_generator": "Philox", "state": {"counter": zeros, "key": key},
                     "buffer": zeros, "buffer_pos": 4, "has_uint32": 0, "uinteger": 0}
        raw = gen.random_raw(n_steps)
        out[row] = ((raw >> np.uint64(11)).astype(float) + 0.5) * _UNIT
    return out


def check_model(m: QuantumModel, cfg: SimConfig, kernel: FilterKernel | None = None) -> None:
    report = validate(m)
    if not report.ok:
        raise SimulationError("invalid model: " + "; ".join(v.message for v in report.violations))
    if m.kind is MeasurementKind.POISSONIAN:
        kernel = kernel or FilterKernel(m, cfg.dt, cfg.n_steps)
        if kernel.max_rate_dt > POISSON_RATE_GUARD:
            raise SimulationError(
                f"counting rate times dt is {kernel.max_rate_dt:.3g} > {POISSON_RATE_GUARD}; reduce dt")


def simulate_batch(m: QuantumModel, cfg: SimConfig, indices: Sequence[int], stream: int = 0,
                   filters: Sequence[QuantumModel] = (), observer: Observer | None = None,
                   hygiene: Hygiene | None = None, keep_increments: bool = True):
    """Generate records for ``indices`` and run extra filters on them in lockstep.

    The generating model's filter is kernel 0 as seen by ``observer``;
    ``filters`` follow in order.  Returns (increments, failed).
    """
    kernels = [FilterKernel(m, cfg.dt, cfg.n_steps)]
    check_model(m, cfg, kernels[0])
    for f in filters:
        if f.kind is not m.kind or f.dim != m.dim:
            raise SimulationError("filters must share the generator's kind and dimension")
        kernels.append(FilterKernel(f, cfg.dt, cfg.n_steps))
    u = uniforms(cfg.base_seed, stream, indices, cfg.n_steps)
    try:
        return sweep(kernels, len(indices), uniforms=u, generator=0, observer=observer,
                     hygiene=hygiene, keep_increments=keep_increments)
    except FilterError as exc:
        raise SimulationError(str(exc)) from exc


def simulate_record(m: QuantumModel, cfg: SimConfig, index: int, stream: int = 0) -> TrajectoryRecord:
    inc, failed = simulate_batch(m, cfg, [index], stream)
    if failed[0]:
        raise SimulationError(f"filter trace underflow while generating record {index}")
    return TrajectoryRecord(m.kind, cfg.dt, inc[0], cfg.base_seed, index, stream)


def chunks(n: int, size: int) -> list[range]:
    return [range(lo, min(lo + size, n)) for lo in range(0, n, size)]


def ensemble_iter(m: QuantumModel, cfg: SimConfig, stream: int = 0,
                  indices: Sequence[int] | None = None) -> Iterator[TrajectoryRecord]:
    """Yield records in index order, simulated chunk by chunk."""
    indices = list(range(cfg.n_traj)) if indices is None else list(indices)
    for lo in range(0, len(indices), cfg.chunk_size):
        part = indices[lo: lo + cfg.chunk_size]
        inc, _ = simulate_batch(m, cfg, part, stream)
        for row, idx in enumerate(part):
            yield TrajectoryRecord(m.kind, cfg.dt, inc[row], cfg.base_seed, idx, stream)


def map_chunks(func: Callable, jobs: Sequence, workers: int = 1) -> list:
    """Apply ``func`` to each job; results come back in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [func(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, *job) for job in jobs]
        return [f.result() for f in futures]


RECORD_COLUMNS = ("traj_index", "step", "t", "dy")


def write_records_csv(path, records: Sequence[TrajectoryRecord]) -> None:
    """Write records as (traj_index, step, t, dy) rows; gzip when path ends in .gz."""
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wt", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for rec in records:
            for k, (t, dy) in enumerate(zip(rec.times, rec.increments)):
                w.writerow([rec.index, k, f"{t:.17g}", f"{dy:.17g}"])


def read_records_csv(path, kind: MeasurementKind, dt: float, seed: int = 0) -> list[TrajectoryRecord]:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    rows: dict[int, list[float]] = {}
    with opener(path, "rt", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["traj_index"]), []).append(float(row["dy"]))
    return [TrajectoryRecord(MeasurementKind(kind), dt, np.array(v), seed, i) for i, v in sorted(rows.items())]
