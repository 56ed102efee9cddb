"""Quantum measurement models: initial state, coupling operator, dynamics.

Basis convention: computational index 0 is the ground state, so the
lowering operator is ``|0><1|`` and ``sigma_z = diag(1, -1)`` takes the
value +1 on the ground state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .linalg import (
    DEFAULT_TOLERANCES,
    LinalgError,
    Tolerances,
    as_matrix,
    eig_hermitian,
    herm_part,
    hermiticity_error,
)


class ModelError(ValueError):
    pass


class MeasurementKind(str, Enum):
    GAUSSIAN = "gaussian"
    POISSONIAN = "poissonian"


def _frozen(m: np.ndarray) -> np.ndarray:
    m = np.array(m, dtype=complex)
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class OperatorSchedule:
    """Piecewise-constant operator: ``matrices[i]`` holds from ``starts[i]`` on."""

    starts: tuple[float, ...]
    matrices: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.starts) != len(self.matrices) or not self.starts:
            raise ModelError("schedule needs one start time per matrix and at least one segment")
        if self.starts[0] != 0.0:
            raise ModelError("first schedule segment must start at t = 0")
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise ModelError("schedule start times must be strictly increasing")
        mats = tuple(_frozen(as_matrix(m)) for m in self.matrices)
        if len({m.shape for m in mats}) != 1:
            raise ModelError("schedule matrices must share one dimension")
        object.__setattr__(self, "starts", tuple(float(s) for s in self.starts))
        object.__setattr__(self, "matrices", mats)

    @classmethod
    def constant(cls, matrix) -> "OperatorSchedule":
        return cls((0.0,), (matrix,))

    @classmethod
    def coerce(cls, value) -> "OperatorSchedule":
        if isinstance(value, OperatorSchedule):
            return value
        return cls.constant(value)

    @property
    def dim(self) -> int:
        return self.matrices[0].shape[0]

    def segment(self, t: float) -> int:
        if t < 0.0:
            raise ModelError(f"time {t} precedes the schedule")
        return int(np.searchsorted(self.starts, t, side="right")) - 1

    def at(self, t: float) -> np.ndarray:
        return self.matrices[self.segment(t)]

    def map(self, func) -> "OperatorSchedule":
        return OperatorSchedule(self.starts, tuple(func(m) for m in self.matrices))

    def same_as(self, other: "OperatorSchedule") -> bool:
        """Bitwise equality of start times and matrices."""
        return self.starts == other.starts and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.matrices, other.matrices)
        ) and len(self.matrices) == len(other.matrices)


@dataclass(frozen=True, eq=False)
class QuantumModel:
    """Measurement model {rho0, a_t, L_t} for one measurement kind.

    ``dissipators`` are environmental channels in addition to the
    measurement backaction channel, which is implied by ``a`` and
    ``kind`` (``a/2`` for homodyne, ``a`` for counting).
    """

    rho0: np.ndarray
    a: OperatorSchedule
    kind: MeasurementKind = MeasurementKind.GAUSSIAN
    hamiltonian: OperatorSchedule | None = None
    dissipators: tuple[OperatorSchedule, ...] = ()
    label: str = ""

    def __post_init__(self):
        rho0 = _frozen(as_matrix(self.rho0))
        d = rho0.shape[0]
        a = OperatorSchedule.coerce(self.a)
        ham = OperatorSchedule.coerce(self.hamiltonian) if self.hamiltonian is not None else \
            OperatorSchedule.constant(np.zeros((d, d)))
        diss = tuple(OperatorSchedule.coerce(c) for c in self.dissipators)
        for name, sched in [("a", a), ("hamiltonian", ham)] + [(f"dissipator[{i}]", c) for i, c in enumerate(diss)]:
            if sched.dim != d:
                raise ModelError(f"{name} has dimension {sched.dim}, rho0 has {d}")
        object.__setattr__(self, "rho0", rho0)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "hamiltonian", ham)
        object.__setattr__(self, "dissipators", diss)
        object.__setattr__(self, "kind", MeasurementKind(self.kind))

    @property
    def dim(self) -> int:
        return self.rho0.shape[0]

    def backaction(self) -> OperatorSchedule:
        if self.kind is MeasurementKind.GAUSSIAN:
            return self.a.map(lambda m: 0.5 * m)
        return self.a

    def breakpoints(self) -> tuple[float, ...]:
        """Union of all schedule start times."""
        times = set(self.a.starts) | set(self.hamiltonian.starts)
        for c in self.dissipators:
            times |= set(c.starts)
        return tuple(sorted(times))

    def with_rho0(self, rho0, label: str | None = None) -> "QuantumModel":
        return QuantumModel(rho0, self.a, self.kind, self.hamiltonian, self.dissipators,
                            self.label if label is None else label)

    def same_dynamics(self, other: "QuantumModel") -> bool:
        """True when only the initial states may differ (bitwise comparison)."""
        return (
            self.kind is other.kind
            and self.dim == other.dim
            and self.a.same_as(other.a)
            and self.hamiltonian.same_as(other.hamiltonian)
            and len(self.dissipators) == len(other.dissipators)
            and all(c.same_as(o) for c, o in zip(self.dissipators, other.dissipators))
        )


@dataclass(frozen=True)
class ModelPair:
    true_model: QuantumModel
    nominal_model: QuantumModel

    def __post_init__(self):
        if self.true_model.dim != self.nominal_model.dim:
            raise ModelError("true and nominal models must share the Hilbert dimension")
        if self.true_model.kind is not self.nominal_model.kind:
            raise ModelError("true and nominal models must share the measurement kind")

    @property
    def kind(self) -> MeasurementKind:
        return self.true_model.kind


def observable_from_coupling(a: np.ndarray, kind: MeasurementKind) -> np.ndarray:
    if kind is MeasurementKind.GAUSSIAN:
        return herm_part(a)
    return herm_part(a.conj().T @ a)


def measured_observable(m: QuantumModel, t: float) -> np.ndarray:
    """q_t = (a + a^dagger)/2 for homodyne, a^dagger a for counting."""
    return observable_from_coupling(m.a.at(t), m.kind)


def dissipator(c: np.ndarray, x: np.ndarray) -> np.ndarray:
    """D[c]X = c X c^dagger - {c^dagger c, X}/2."""
    cd = c.conj().T
    cdc = cd @ c
    return c @ x @ cd - 0.5 * (cdc @ x + x @ cdc)


def apply_lindblad(m: QuantumModel, t: float, x) -> np.ndarray:
    x = as_matrix(x, m.dim)
    h = m.hamiltonian.at(t)
    out = -1j * (h @ x - x @ h)
    out += dissipator(m.backaction().at(t), x)
    for c in m.dissipators:
        out += dissipator(c.at(t), x)
    return out


@dataclass(frozen=True)
class Violation:
    check: str
    value: float
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def names(self) -> list[str]:
        return [v.check for v in self.violations]


def validate_density(rho, tol: Tolerances = DEFAULT_TOLERANCES, prefix: str = "") -> list[Violation]:
    out = []
    rho = np.asarray(rho, dtype=complex)
    herm = hermiticity_error(rho)
    if herm > tol.psd:
        out.append(Violation(prefix + "hermiticity", herm, "density operator is not Hermitian"))
    tr_err = abs(np.trace(rho).real - 1.0)
    if tr_err > tol.unit_trace:
        out.append(Violation(prefix + "trace", tr_err, f"trace deviates from 1 by {tr_err:.3g}"))
    try:
        lam_min = eig_hermitian(herm_part(rho), tol).eigenvalues[0]
    except LinalgError as exc:
        out.append(Violation(prefix + "positivity", float("nan"), str(exc)))
    else:
        if lam_min < -tol.psd:
            out.append(Violation(prefix + "positivity", float(lam_min),
                                 f"minimum eigenvalue {lam_min:.3g} is negative"))
    return out


def validate(m: QuantumModel, tol: Tolerances = DEFAULT_TOLERANCES) -> ValidationReport:
    """Check the model invariants and report every violation with its size."""
    report = ValidationReport(validate_density(m.rho0, tol, prefix=""))
    if m.hamiltonian is not None:
        for t, h in zip(m.hamiltonian.starts, m.hamiltonian.matrices):
            err = hermiticity_error(h)
            if err > tol.hermitian:
                report.violations.append(Violation("hamiltonian_hermiticity", err,
                                                   f"Hamiltonian segment at t={t} is not Hermitian"))
    return report


def make_model(rho0, a, kind="gaussian", hamiltonian=None, dissipators: Sequence = (),
               label: str = "") -> QuantumModel:
    return QuantumModel(np.asarray(rho0, dtype=complex), OperatorSchedule.coerce(a),
                        MeasurementKind(kind), hamiltonian, tuple(dissipators), label)
