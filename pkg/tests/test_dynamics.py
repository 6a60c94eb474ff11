from __future__ import annotations

import numpy as np
import pytest

from postadiabatic.dynamics import (acceleration, angular_momentum, consistent_acceleration, effective_energy,
                                    exact_initial_state, integrate_effective, integrate_exact,
                                    lagrangian_velocity_gradient, momentum, odd_k_constraint, parse_order,
                                    slow_manifold_acceleration, spin_tensor, zitterbewegung_residual)
from postadiabatic.errors import ConstraintError, UnsupportedConfigurationError, ValidationError
from postadiabatic.operators import HamiltonianField
from postadiabatic.scenario import load_scenario
from postadiabatic.tensors import ModelField, Potential

GAUGE = lambda q: 0.7 * q[0] * q[1] + 0.3 * np.sin(q[0])  # noqa: E731
Q0 = np.array([1.0, 0.0])
V0 = np.array([0.0, 2 ** -0.25])


@pytest.fixture(scope="module")
def short_o3(standard_model):
    s = np.linspace(0, 1, 51)
    return integrate_effective(standard_model, 3, {"q": Q0, "v": V0}, (0, 1), s_eval=s, rtol=1e-10, atol=1e-12)


# ------------------------------------------------------------------ orders
@pytest.mark.parametrize("text,value", [("O3", 3), ("o0", 0), ("2", 2), (4, 4)])
def test_parse_order(text, value):
    assert parse_order(text) == value


@pytest.mark.parametrize("bad", ["O5", "X", -1])
def test_parse_order_rejects(bad):
    with pytest.raises(ValidationError):
        parse_order(bad)


# ------------------------------------------------------------------ exact runs
def test_exact_decoupled_oscillator():
    f = HamiltonianField(np.diag([-0.5, 0.5]), np.zeros((1, 2, 2)))
    k, m, eps = 2.0, 0.5, 0.1
    s = np.linspace(0, 3, 31)
    psi0 = np.array([1.0, 0.0])
    tr = integrate_exact(f, Potential.harmonic(1, k), m, eps, psi0, [0.4], [0.0], (0, 3), s_eval=s)
    np.testing.assert_allclose(tr.q[:, 0], 0.4 * np.cos(np.sqrt(k / m) * s), atol=1e-10)
    np.testing.assert_allclose(tr.psi[:, 0], np.exp(0.5j * s / eps), atol=1e-9)
    np.testing.assert_allclose(tr.psi[:, 1], 0.0, atol=1e-15)


def test_exact_free_motion_constant_hamiltonian():
    f = HamiltonianField(np.diag([0.0, 1.0]), np.zeros((2, 2, 2)))
    s = np.linspace(0, 2, 11)
    tr = integrate_exact(f, Potential(2), 1.0, 0.1, [0.6, 0.8], [0.0, 1.0], [0.5, -0.2], (0, 2), s_eval=s)
    np.testing.assert_allclose(tr.q, np.array([0.0, 1.0]) + s[:, None] * [0.5, -0.2], atol=1e-12)


def test_exact_rejects_unnormalized_state(complex_field):
    with pytest.raises(ValidationError):
        integrate_exact(complex_field, Potential(2), 1.0, 0.1, [1.0, 1.0], Q0, V0, (0, 1))


def test_exact_conserves_norm_and_energy(standard_model):
    mf = standard_model
    psi0 = exact_initial_state(mf, Q0, V0)
    tr = integrate_exact(mf.field, mf.potential, mf.kinetic_mass, mf.epsilon, psi0, Q0, V0, (0, 5),
                         s_eval=np.linspace(0, 5, 101))
    E = tr.diagnostics["energy"]
    assert np.abs(tr.diagnostics["norm"] - 1).max() < 1e-9
    assert np.abs(E - E[0]).max() / abs(E[0]) < 1e-8
    assert np.all(np.diff(tr.s) > 0)


# ------------------------------------------------------------------ effective runs
def test_o3_real_field_equals_o2(real_field):
    mf = ModelField(real_field, 0, 0.1, potential=Potential.harmonic(2, 1.0))
    ini = {"q": [1.0, 0.2], "v": [0.0, 0.9]}
    s = np.linspace(0, 3, 31)
    o2 = integrate_effective(mf, 2, ini, (0, 3), s_eval=s, rtol=1e-11, atol=1e-12)
    o3 = integrate_effective(mf, "O3", ini, (0, 3), s_eval=s, rtol=1e-11, atol=1e-12)
    np.testing.assert_allclose(o3.q, o2.q, atol=1e-12)
    assert "reduces to O2" in o3.meta["note"]


def test_o0_follows_born_oppenheimer_force(real_field):
    mf = ModelField(real_field, 1, 0.1)
    q, v = np.array([0.6, 0.8]), np.array([0.3, 0.1])
    np.testing.assert_allclose(acceleration(mf, q, v, 0), -q / np.hypot(*q) / mf.kinetic_mass, atol=1e-12)


def test_effective_run_diagnostics_shapes(short_o3):
    assert np.all(np.diff(short_o3.s) > 0)
    assert short_o3.diagnostics["energy"].shape == short_o3.s.shape
    assert short_o3.a.shape == short_o3.q.shape


def test_o3_energy_conserved(short_o3):
    E = short_o3.diagnostics["energy"]
    assert np.abs(E - E[0]).max() / abs(E[0]) < 1e-7


def test_o4_energy_conserved(o4_model):
    tr = integrate_effective(o4_model, "O4", {"q": [0.5], "v": [0.0]}, (0, 2), s_eval=np.linspace(0, 2, 21),
                             rtol=1e-10, atol=1e-12)
    E = tr.diagnostics["energy"]
    assert np.abs(E - E[0]).max() / abs(E[0]) < 1e-7


def test_o4_requires_one_coordinate(real_field):
    with pytest.raises(UnsupportedConfigurationError):
        integrate_effective(ModelField(real_field, 0, 0.1), 4, {"q": Q0, "v": V0}, (0, 1))


def test_initial_data_shape_checked(standard_model):
    with pytest.raises(ValidationError):
        integrate_effective(standard_model, 2, {"q": [1.0], "v": [0.0]}, (0, 1))


# ------------------------------------------------------------------ odd K
@pytest.fixture(scope="module")
def odd_model():
    return load_scenario("odd_constraint_k3").model_field()


def test_odd_k_inconsistent_initial_data(odd_model):
    q, v = np.array([1.0, 0.2, 0.3]), np.array([0.0, 0.8, 0.1])
    a, _ = slow_manifold_acceleration(odd_model, q, v)
    a = consistent_acceleration(odd_model, q, v, a)
    assert abs(odd_k_constraint(odd_model, q, v, a)[0]) < 1e-10
    with pytest.raises(ConstraintError) as exc:
        integrate_effective(odd_model, 3, {"q": q, "v": v, "a": a + 0.1}, (0, 1))
    assert exc.value.details["residual"] > 1e-8
    assert "residual" in str(exc.value)


def test_one_coordinate_constraint_is_equation_of_motion():
    f = HamiltonianField(np.diag([1.0, -1.0]).astype(complex), [[[0, 1j], [-1j, 0]]])
    mf = ModelField(f, 0, 0.1, potential=Potential.harmonic(1, 1.0))
    q, v = np.array([0.3]), np.array([0.2])
    a = acceleration(mf, q, v, 2)
    res, _ = odd_k_constraint(mf, q, v, a)
    # with z = 0 the residual is the order-3 equation itself, which the order-2 acceleration
    # satisfies up to the third-order terms
    dd = mf.derivatives(q, order=3)
    assert dd.model.z[0, 0] == 0.0
    assert abs(res) < 1e-2 * mf.kinetic_mass


@pytest.mark.slow
def test_odd_k_constraint_preserved(odd_model):
    tr = integrate_effective(odd_model, 3, {"q": [1.0, 0.2, 0.3], "v": [0.0, 0.8, 0.1]}, (0, 2),
                             s_eval=np.linspace(0, 2, 41), rtol=1e-9, atol=1e-11)
    assert np.abs(tr.diagnostics["constraint_residual"]).max() < 1e-7
    assert tr.meta["mode"] == "odd-K constrained"


# ------------------------------------------------------------------ momentum and energy
def test_momentum_at_rest_is_connection(standard_model):
    dd = standard_model.derivatives([0.7, 0.4], order=3)
    p = momentum(dd, standard_model, np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(p, standard_model.epsilon * dd.model.A, atol=1e-15)


def test_momentum_real_field(real_field):
    mf = ModelField(real_field, 0, 0.1, kinetic_mass=0.01)
    dd = mf.derivatives([0.7, 0.4], order=3)
    v = np.array([0.3, -0.5])
    expected = (0.01 * np.eye(2) + 0.01 * dd.model.G) @ v
    np.testing.assert_allclose(momentum(dd, mf, v, [0.2, 0.1]), expected, atol=1e-15)


def test_anomalous_momentum_matches_difference(standard_model, short_o3):
    """p - dL/dv = -d/ds dL/dacc, with dL/dacc = -eps^3 z v differenced along the run."""
    mf = standard_model
    tr = short_o3
    h = tr.s[1] - tr.s[0]
    for c in (10, 25, 40):
        idx = c + np.arange(-2, 3)
        dLda = np.array([-mf.epsilon ** 3 * mf.derivatives(tr.q[i], order=3).model.z @ tr.v[i] for i in idx])
        ddt = (dLda[0] - 8 * dLda[1] + 8 * dLda[3] - dLda[4]) / (12 * h)
        dd = mf.derivatives(tr.q[c], order=3)
        anomalous = momentum(dd, mf, tr.v[c], tr.a[c]) - lagrangian_velocity_gradient(dd, mf, tr.v[c], tr.a[c])
        np.testing.assert_allclose(anomalous, -ddt, atol=1e-8)


def test_energy_static_state(standard_model):
    dd = standard_model.derivatives([0.7, 0.4], order=3)
    E = effective_energy(dd, standard_model, np.zeros(2), np.zeros(2))
    assert E == pytest.approx(dd.model.V + dd.model.E_n, abs=1e-15)


def test_energy_independent_of_gauge(complex_field):
    a = ModelField(complex_field, 1, 0.1)
    b = ModelField(complex_field, 1, 0.1, gauge=GAUGE)
    q, v, acc = [0.8, -0.3], [0.4, 0.6], [-0.2, 0.5]
    ea = effective_energy(a.derivatives(q, order=3), a, v, acc)
    eb = effective_energy(b.derivatives(q, order=3), b, v, acc)
    assert ea == pytest.approx(eb, abs=1e-12)


# ------------------------------------------------------------------ angular momentum and spin
def test_spin_tensor_two_coordinates(standard_model):
    z = standard_model.derivatives([0.8, 0.2], order=3).model.z
    v = np.array([0.3, -0.7])
    S = spin_tensor(z, v, 0.1)
    assert S[0, 1] == pytest.approx(1e-3 * z[1, 0] * (v @ v), abs=1e-18)
    np.testing.assert_allclose(S, -S.T, atol=0)
    np.testing.assert_array_equal(spin_tensor(z, np.zeros(2), 0.1), 0.0)


def test_angular_momentum_parts(standard_model):
    dd = standard_model.derivatives([0.8, 0.2], order=3)
    L, S, M = angular_momentum(dd, standard_model, [0.8, 0.2], [0.3, 0.1], [0.0, 0.2])
    np.testing.assert_allclose(M, L + S, atol=0)
    np.testing.assert_allclose(L, -L.T, atol=0)


def test_angular_momentum_needs_two_coordinates(o4_model):
    with pytest.raises(UnsupportedConfigurationError):
        angular_momentum(o4_model.derivatives([0.1], order=3), o4_model, [0.1], [0.1], [0.0])


def test_total_angular_momentum_conserved(standard_model, short_o3):
    M = [angular_momentum(standard_model.derivatives(short_o3.q[i], order=3), standard_model, short_o3.q[i],
                          short_o3.v[i], short_o3.a[i])[2][0, 1] for i in range(len(short_o3))]
    assert np.ptp(M) < 1e-8


# ------------------------------------------------------------------ zitterbewegung
def test_zitterbewegung_real_field(real_field):
    mf = ModelField(real_field, 0, 0.1, potential=Potential.harmonic(2, 1.0))
    tr = integrate_effective(mf, 3, {"q": [1.0, 0.2], "v": [0.0, 0.9]}, (0, 1), s_eval=np.linspace(0, 1, 21))
    assert np.abs(zitterbewegung_residual(mf, tr)).max() < 1e-10


def test_zitterbewegung_identity_along_run(standard_model, short_o3):
    assert np.abs(zitterbewegung_residual(standard_model, short_o3)).max() < 1e-6


def test_zitterbewegung_gauge_invariant(complex_field, short_o3):
    a = ModelField(complex_field, 1, 0.1)
    b = ModelField(complex_field, 1, 0.1, gauge=GAUGE)
    ra = zitterbewegung_residual(a, short_o3)
    rb = zitterbewegung_residual(b, short_o3)
    np.testing.assert_allclose(ra, rb, atol=1e-9)


def test_zitterbewegung_marks_zero_speed(standard_model, short_o3):
    from dataclasses import replace

    tr = replace(short_o3, v=short_o3.v.copy())
    tr.v[10] = 0.0
    r = zitterbewegung_residual(standard_model, tr)
    assert np.isnan(r[10]).all()
