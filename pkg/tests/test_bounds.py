import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qregret.bounds import (BoundError, BoundReport, check_bound_holevo, check_bound_qre, holevo_information,
                            quantum_relative_entropy, relative_entropy_with_flag, support_mismatch)
from qregret.estimators import EstimateWithError, PriorEnsemble
from qregret.model import ModelPair, make_model
from qregret.trajectory import SimConfig

from conftest import EXCITED, GROUND, SM, SX, SZ, random_density

PLUS = np.full((2, 2), 0.5, dtype=complex)
HALF = np.eye(2) / 2


def test_relative_entropy_examples():
    assert quantum_relative_entropy(PLUS, PLUS) == pytest.approx(0.0, abs=1e-12)
    for p in (0.5, 0.8, 0.1):
        assert quantum_relative_entropy(GROUND, np.diag([p, 1 - p])) == pytest.approx(-math.log(p), abs=1e-12)
    assert quantum_relative_entropy(GROUND, HALF) == pytest.approx(0.6931471805599453, abs=1e-12)


def test_disjoint_supports_are_clamped_not_raised():
    value, clamped = relative_entropy_with_flag(GROUND, EXCITED)
    assert clamped and value > 100.0 and math.isfinite(value)
    assert support_mismatch(GROUND, EXCITED) == pytest.approx(1.0)
    assert not relative_entropy_with_flag(EXCITED, HALF)[1]
    # the reverse direction is finite: supp(I/2) contains everything
    assert support_mismatch(HALF, GROUND) == pytest.approx(0.5)
    assert support_mismatch(GROUND, HALF) == 0.0


def test_relative_entropy_of_commuting_states_is_classical():
    p, q = np.array([0.2, 0.5, 0.3]), np.array([0.4, 0.4, 0.2])
    expected = float(np.sum(p * np.log(p / q)))
    u = np.linalg.qr(np.arange(9).reshape(3, 3) + 1j * np.eye(3))[0]
    rho, sigma = u @ np.diag(p) @ u.conj().T, u @ np.diag(q) @ u.conj().T
    assert quantum_relative_entropy(rho, sigma) == pytest.approx(expected, abs=1e-10)


@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 4))
def test_relative_entropy_is_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    rho, sigma = random_density(rng, d), random_density(rng, d)
    assert quantum_relative_entropy(rho, sigma) >= 0.0
    assert quantum_relative_entropy(rho, rho) <= 1e-10


def test_invalid_inputs_raise():
    with pytest.raises(BoundError):
        quantum_relative_entropy(np.diag([0.7, 0.7]), HALF)
    with pytest.raises(BoundError):
        quantum_relative_entropy(GROUND, np.eye(3) / 3)
    with pytest.raises(BoundError):
        quantum_relative_entropy(np.ones(2), HALF)
    with pytest.raises(BoundError):
        holevo_information([])
    with pytest.raises(BoundError):
        holevo_information([(0.6, GROUND), (0.6, EXCITED)])


def test_holevo_examples():
    assert holevo_information([(0.5, PLUS), (0.5, PLUS)]) == pytest.approx(0.0, abs=1e-12)
    assert holevo_information([(0.5, GROUND), (0.5, EXCITED)]) == pytest.approx(math.log(2), abs=1e-12)
    # mean state [[3/4, 1/4], [1/4, 1/4]] has eigenvalues cos^2(pi/8) and sin^2(pi/8)
    c = math.cos(math.pi / 8) ** 2
    binary_entropy = -c * math.log(c) - (1 - c) * math.log(1 - c)
    chi = holevo_information([(0.5, GROUND), (0.5, PLUS)])
    assert chi == pytest.approx(binary_entropy, abs=1e-12)
    assert chi == pytest.approx(0.4164955306996875, abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_holevo_is_bounded_by_prior_entropy(seed, k):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(k))
    w[-1] = 1.0 - w[:-1].sum()
    chi = holevo_information([(wi, random_density(rng, 3)) for wi in w])
    shannon = -float(np.sum(w * np.log(np.where(w > 0, w, 1.0))))
    assert -1e-12 <= chi <= shannon + 1e-10


def test_report_satisfied_follows_fields():
    est = EstimateWithError(0.7, 0.01, 100)
    assert BoundReport(0.69, est).satisfied
    assert not BoundReport(0.65, est).satisfied
    exact = EstimateWithError(0.0, 0.0, 100)
    assert BoundReport(0.0, exact).satisfied
    d = BoundReport(0.69, est, horizons=(1.0,), trend=[est]).as_dict()
    assert d["satisfied"] and d["bound"] == 0.69 and d["trend"] == [0.7]


def test_matched_initials_give_zero_bound_and_estimate():
    m = make_model(np.diag([0.3, 0.7]), np.sqrt(2) * SM, hamiltonian=0.5 * SX)
    rep = check_bound_qre(ModelPair(m, m), SimConfig(1e-2, 1.0, 30, base_seed=1))
    assert rep.bound_value == pytest.approx(0.0, abs=1e-12) and rep.estimate.mean == 0.0 and rep.satisfied


def test_qnd_bound_at_nested_horizons():
    pair = ModelPair(make_model(GROUND, SZ), make_model(HALF, SZ))
    rep = check_bound_qre(pair, SimConfig(1e-2, 5.0, 1500, base_seed=2), [1.0, 2.0, 5.0])
    assert rep.bound_value == pytest.approx(math.log(2), abs=1e-12) and not rep.clamped
    assert rep.satisfied_all and rep.horizons == (1.0, 2.0, 5.0)
    means = [e.mean for e in rep.trend]
    assert means[0] < means[1] < means[2] < math.log(2)
    per_time = rep.per_time()
    assert per_time[0] > per_time[1] > per_time[2]


def test_decay_mixed_initials_bound():
    a = np.sqrt(2) * SM
    sigma = np.array([[0.7, 0.1 + 0.2j], [0.1 - 0.2j, 0.3]])
    pair = ModelPair(make_model(np.diag([0.1, 0.9]), a, hamiltonian=0.5 * SX),
                     make_model(sigma, a, hamiltonian=0.5 * SX))
    rep = check_bound_qre(pair, SimConfig(1e-2, 2.0, 800, base_seed=3))
    assert rep.satisfied and rep.estimate.mean > 0


def test_structural_mismatch_raises(decay_pair):
    with pytest.raises(BoundError, match="initial states"):
        check_bound_qre(ModelPair(*decay_pair), SimConfig(1e-2, 0.1, 4))
    ens = PriorEnsemble(("a", "b"), (make_model(GROUND, SZ), make_model(GROUND, SX)), np.array([0.5, 0.5]))
    with pytest.raises(BoundError, match="initial states"):
        check_bound_holevo(ens, SimConfig(1e-2, 0.1, 4))


def test_holevo_check_for_identical_and_nonorthogonal_states():
    same = PriorEnsemble(("a", "b"), (make_model(PLUS, SZ), make_model(PLUS, SZ)), np.array([0.5, 0.5]))
    rep = check_bound_holevo(same, SimConfig(1e-2, 1.0, 30, base_seed=4))
    assert rep.bound_value == pytest.approx(0.0, abs=1e-12) and abs(rep.estimate.mean) <= 1e-12 and rep.satisfied
    pair = PriorEnsemble(("0", "+"), (make_model(GROUND, SZ), make_model(PLUS, SZ)), np.array([0.5, 0.5]))
    rep = check_bound_holevo(pair, SimConfig(1e-2, 2.0, 800, base_seed=5), [1.0, 2.0])
    assert rep.bound_value == pytest.approx(0.4164955306996875, abs=1e-12)
    assert rep.satisfied_all and 0 < rep.trend[0].mean < rep.trend[1].mean
