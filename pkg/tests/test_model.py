import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qregret.model import (
    MeasurementKind,
    ModelError,
    ModelPair,
    OperatorSchedule,
    apply_lindblad,
    make_model,
    measured_observable,
    validate,
)

from conftest import EXCITED, GROUND, SM, SX, SZ, random_density, random_hermitian


def test_measured_observable_examples():
    assert np.array_equal(measured_observable(make_model(GROUND, SZ), 0.0), SZ)
    lam = 2.5
    m = make_model([[1.0]], [[np.sqrt(lam)]], "poissonian")
    assert np.allclose(measured_observable(m, 0.0), [[lam]])
    assert np.array_equal(measured_observable(make_model(GROUND, 2 * SM), 0.0), SX)


def test_observable_before_schedule_start_raises():
    with pytest.raises(ModelError):
        measured_observable(make_model(GROUND, SZ), -0.1)


def test_backaction_channels():
    g = make_model(GROUND, SM, "gaussian")
    p = make_model(GROUND, SM, "poissonian")
    assert np.array_equal(g.backaction().at(0.0), 0.5 * SM)
    assert np.array_equal(p.backaction().at(0.0), SM)


def test_lindblad_zero_model_is_zero(rng):
    m = make_model(GROUND, np.zeros((2, 2)))
    assert np.array_equal(apply_lindblad(m, 0.0, random_density(rng, 2)), np.zeros((2, 2)))


def test_lindblad_decay_on_diagonal_state():
    gamma, p = 0.7, 0.3
    m = make_model(GROUND, np.zeros((2, 2)), dissipators=[np.sqrt(gamma) * SM])
    out = apply_lindblad(m, 0.0, np.diag([p, 1 - p]))
    assert np.allclose(out, np.diag([gamma * (1 - p), -gamma * (1 - p)]), atol=1e-15)


seeds = st.integers(min_value=0, max_value=2**32 - 1)


def random_model(rng, d, kind):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    c = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return make_model(random_density(rng, d), a, kind, hamiltonian=random_hermitian(rng, d), dissipators=[c])


@given(seeds, st.integers(min_value=1, max_value=5), st.sampled_from(["gaussian", "poissonian"]))
def test_lindblad_linear_hermitian_traceless(seed, d, kind):
    rng = np.random.default_rng(seed)
    m = random_model(rng, d, kind)
    x = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    y = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    alpha, beta = 0.3 - 1.2j, 2.0
    lin = apply_lindblad(m, 0.0, alpha * x + beta * y) - alpha * apply_lindblad(m, 0.0, x) \
        - beta * apply_lindblad(m, 0.0, y)
    scale = max(1.0, np.abs(apply_lindblad(m, 0.0, x)).max())
    assert np.abs(lin).max() <= 1e-12 * scale
    h = random_hermitian(rng, d)
    out = apply_lindblad(m, 0.0, h)
    assert np.abs(out - out.conj().T).max() <= 1e-12 * max(1.0, np.abs(out).max())
    assert abs(np.trace(apply_lindblad(m, 0.0, x))) <= 1e-12 * scale


def test_lindblad_trace_free_on_many_inputs(rng):
    m = random_model(rng, 3, "gaussian")
    for _ in range(1000):
        x = random_density(rng, 3)
        assert abs(np.trace(apply_lindblad(m, 0.0, x))) <= 1e-12


def test_validate_examples():
    assert validate(make_model(GROUND, SZ)).ok
    rep = validate(make_model(np.diag([0.51, 0.5]), SZ))
    assert rep.names() == ["trace"]
    assert rep.violations[0].value == pytest.approx(0.01)
    rep = validate(make_model(np.diag([1.05, -0.05]), SZ))
    assert "positivity" in rep.names()


def test_validate_reports_non_hermitian_parts():
    rep = validate(make_model(np.array([[0.5, 0.1], [0.0, 0.5]]), SZ, hamiltonian=np.array([[0, 1], [0, 0]])))
    assert set(rep.names()) == {"hermiticity", "hamiltonian_hermiticity"}


def test_schedule_segments_and_errors():
    s = OperatorSchedule((0.0, 1.0), (SX, SZ))
    assert np.array_equal(s.at(0.5), SX) and np.array_equal(s.at(1.0), SZ)
    assert s.same_as(OperatorSchedule((0.0, 1.0), (SX, SZ)))
    assert not s.same_as(OperatorSchedule((0.0, 1.0), (SX, SX)))
    with pytest.raises(ModelError):
        OperatorSchedule((0.5,), (SX,))
    with pytest.raises(ModelError):
        OperatorSchedule((0.0, 0.0), (SX, SZ))
    with pytest.raises(ModelError):
        OperatorSchedule((0.0, 1.0), (SX, np.eye(3)))
    with pytest.raises(ValueError):
        s.matrices[0][0, 0] = 5.0


def test_model_dimension_checks():
    with pytest.raises(ModelError):
        make_model(GROUND, np.eye(3))
    with pytest.raises(ModelError):
        ModelPair(make_model(GROUND, SZ), make_model(np.eye(3) / 3, np.eye(3)))
    with pytest.raises(ModelError):
        ModelPair(make_model(GROUND, SZ), make_model(GROUND, SZ, "poissonian"))


def test_same_dynamics_is_structural():
    m = make_model(GROUND, SZ, hamiltonian=SX)
    assert m.same_dynamics(m.with_rho0(EXCITED))
    assert not m.same_dynamics(make_model(GROUND, SZ, hamiltonian=1.0000001 * SX))
    assert not m.same_dynamics(make_model(GROUND, SZ, hamiltonian=SX, dissipators=[SM]))
    assert m.kind is MeasurementKind.GAUSSIAN
    assert m.breakpoints() == (0.0,)
