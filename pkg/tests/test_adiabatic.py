from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from postadiabatic.adiabatic import (UNDEFINED_ANGLE, FrameSeries, SlowPath, action_angle_map, action_angle_rhs,
                                     c1_diagonal, c1_offdiagonal, c2_offdiagonal, cm_recursion, evolve_along_path,
                                     frame_series, n_vectors, normalization_identities, path_force,
                                     reconstruct_wavefunction)
from postadiabatic.errors import DegeneracyError, NumericalError, ValidationError
from postadiabatic.numerics import loglog_slope
from postadiabatic.operators import HamiltonianField, PAULI_X, PAULI_Z, eigh_batch


@pytest.fixture(scope="module")
def circle_grid():
    return np.linspace(0.0, 1.5, 601)


@pytest.fixture(scope="module")
def circle(circle_grid):
    return SlowPath.circle(circle_grid)


@pytest.fixture(scope="module")
def circle_coeffs(real_field, circle):
    return cm_recursion(frame_series(real_field, circle), 0, 3)


# ------------------------------------------------------------------------ SlowPath
def test_path_grid_validation():
    with pytest.raises(ValidationError):
        SlowPath.static([0.0], [0.0, 0.2, 0.3])
    with pytest.raises(ValidationError):
        SlowPath.static([0.0], [0.0, 0.1])
    with pytest.raises(ValidationError):
        SlowPath.static([0.0], [0.0, 0.1, 0.2], epsilon=1.5)


def test_path_derivatives_consistent_with_grid(circle):
    assert circle.consistency_error() < circle.ds ** 2


def test_spline_path_reproduces_samples():
    s = np.linspace(0, 1, 51)
    q = np.column_stack([np.sin(s), s ** 2])
    p = SlowPath.from_samples(s, q)
    np.testing.assert_allclose(p.samples(0), q, atol=1e-14)
    np.testing.assert_allclose(p.derivative(0.5, 1), [np.cos(0.5), 1.0], atol=1e-7)


# ------------------------------------------------------------------------ first order
def test_c1_offdiagonal_static_path(real_field):
    p = SlowPath.static([0.3, 0.7], np.linspace(0, 1, 11))
    np.testing.assert_array_equal(c1_offdiagonal(real_field, p, 0, 0.5), [0])


def test_c1_offdiagonal_circle(real_field, circle):
    for s in np.linspace(0, 1.5, 13):
        assert abs(c1_offdiagonal(real_field, circle, 0, s)[0]) == pytest.approx(0.25, abs=1e-8)


def test_c1_offdiagonal_halves_when_gaps_double(rng):
    A = rng.normal(size=(3, 3))
    B = rng.normal(size=(2, 3, 3))
    f1 = HamiltonianField(A + A.T, B + B.transpose(0, 2, 1))
    f2 = HamiltonianField(2 * (A + A.T), 2 * (B + B.transpose(0, 2, 1)))
    p = SlowPath.circle(np.linspace(0, 1, 11), radius=0.3)
    for n in range(3):
        c1, c2 = c1_offdiagonal(f1, p, n, 0.4), c1_offdiagonal(f2, p, n, 0.4)
        np.testing.assert_allclose(np.abs(c2), 0.5 * np.abs(c1), rtol=1e-10)


def test_c1_diagonal_circle_value(real_field, circle, circle_grid):
    c = c1_diagonal(frame_series(real_field, circle), 0)
    i = int(np.argmin(np.abs(circle_grid - 1.0)))
    assert c[i] == pytest.approx(0.125j, abs=1e-8)
    assert np.abs(c.real).max() == 0.0


def test_c1_diagonal_static_path(real_field):
    p = SlowPath.static([0.3, 0.7], np.linspace(0, 1, 21))
    np.testing.assert_allclose(c1_diagonal(frame_series(real_field, p), 0), 0, atol=1e-15)


def test_c1_diagonal_grid_refinement(complex_field):
    """Richardson comparison: the trapezoid error falls by four when the step halves."""
    coeffs = [[0.3, 1.0], [0.8, 0.2], [0.3, -0.5]]
    vals = []
    for N in (51, 101, 201):
        p = SlowPath.polynomial(coeffs, np.linspace(0, 1, N))
        vals.append(c1_diagonal(frame_series(complex_field, p), 0)[-1])
    ratio = abs(vals[0] - vals[1]) / abs(vals[1] - vals[2])
    assert 3.5 < ratio < 4.5


def test_c1_purely_imaginary_on_generic_path(complex_field):
    p = SlowPath.polynomial([[0.3, 1.0], [0.8, 0.2], [0.3, -0.5]], np.linspace(0, 1, 101))
    cf = cm_recursion(frame_series(complex_field, p), 1, 1)
    assert np.abs(cf.tables[1][:, 1].real).max() < 1e-14


# ------------------------------------------------------------------------ second and higher order
def test_c2_static_path(real_field):
    p = SlowPath.static([0.3, 0.7], np.linspace(0, 1, 21))
    np.testing.assert_allclose(c2_offdiagonal(frame_series(real_field, p), 0), 0, atol=1e-15)


def test_normalization_identities_circle(circle_coeffs):
    ids = normalization_identities(circle_coeffs)
    assert ids["first"] < 1e-9
    assert ids["second"] < 1e-9


def test_normalization_identities_generic_path_converge(complex_field):
    """Off the circle the second identity holds up to the O(ds^2) grid error."""
    coeffs = [[0.3, 1.0], [0.8, 0.2], [0.3, -0.5]]
    errs = []
    for N in (101, 201, 401):
        p = SlowPath.polynomial(coeffs, np.linspace(0, 1, N))
        ids = normalization_identities(cm_recursion(frame_series(complex_field, p), 0, 2))
        assert ids["first"] < 1e-15
        errs.append(ids["second"])
    assert errs[-1] < 1e-8
    assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5


def test_recursion_base_matches_dedicated_operations(real_field, circle, circle_coeffs):
    fr = circle_coeffs.frames
    np.testing.assert_array_equal(cm_recursion(fr, 0, 1).tables[1][:, 0], c1_diagonal(fr, 0))
    np.testing.assert_array_equal(cm_recursion(fr, 0, 2).tables[2][:, 1], c2_offdiagonal(fr, 0)[:, 0])
    for i in (0, 100, 300):
        assert abs(circle_coeffs.tables[1][i, 1]) == pytest.approx(
            abs(c1_offdiagonal(real_field, circle, 0, circle.s[i])[0]), abs=1e-12)


def test_recursion_static_path_all_orders_zero(complex_field):
    p = SlowPath.static([0.3, 0.7], np.linspace(0, 1, 41))
    cf = cm_recursion(frame_series(complex_field, p), 0, 4)
    for j in range(1, 5):
        assert np.abs(cf.tables[j]).max() < 1e-12


def test_recursion_grid_too_coarse(real_field):
    p = SlowPath.circle(np.linspace(0, 1, 12))
    with pytest.raises(NumericalError) as exc:
        cm_recursion(frame_series(real_field, p), 0, 3)
    assert exc.value.details["required"] == 20


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_norm_condition_scaling(complex_field, m):
    p = SlowPath.polynomial([[0.3, 1.0], [0.8, 0.2], [0.3, -0.5]], np.linspace(0, 1, 401))
    cf = cm_recursion(frame_series(complex_field, p), 0, 4)
    eps = np.array([0.025, 0.05, 0.1])
    res = [np.abs(cf.norm_residual(e, m)).max() for e in eps]
    slope, _ = loglog_slope(eps, res)
    assert abs(slope - (m + 1)) < 0.5


@pytest.mark.parametrize("m", [1, 2, 3])
def test_norm_condition_bound_on_circle(circle_coeffs, m):
    """On the circle of a real field the odd cross terms cancel, so even m gains one order."""
    eps = np.array([0.025, 0.05, 0.1])
    res = [np.abs(circle_coeffs.norm_residual(e, m)).max() for e in eps]
    slope, _ = loglog_slope(eps, res)
    assert slope > m + 0.5


def test_degenerate_path_rejected(real_field):
    p = SlowPath.polynomial([[-0.5, 0.0], [1.0, 0.0]], np.linspace(0, 1, 11))
    with pytest.raises(DegeneracyError):
        frame_series(real_field, p)


# ------------------------------------------------------------------------ N vectors
def test_n_vectors_one_coordinate_model(k1_field):
    N = n_vectors(k1_field, [0.0], 0)
    plus = eigh_batch(k1_field, np.zeros((1, 1)))[1][0][:, 1]
    assert abs(np.vdot(plus, N[0])) == pytest.approx(0.25, abs=1e-15)
    assert np.linalg.norm(N[0]) == pytest.approx(0.25, abs=1e-15)


def test_n_vectors_orthogonal_to_level(complex_field, rng):
    for _ in range(10):
        q = rng.normal(size=2)
        V = eigh_batch(complex_field, q[None])[1][0]
        for n in range(2):
            N = n_vectors(complex_field, q, n)
            assert np.abs(N @ V[:, n].conj()).max() < 1e-15


def test_n_vectors_constant_field():
    f = HamiltonianField(np.diag([0.0, 1.0, 2.0]), np.zeros((2, 3, 3)))
    np.testing.assert_array_equal(n_vectors(f, [0.1, 0.2], 1), np.zeros((2, 3)))


def test_first_order_state_from_n_vectors(complex_field):
    """|n_1 perp> = -i qdot_a N_a matches the first-order off-diagonal coefficients."""
    p = SlowPath.polynomial([[0.3, 1.0], [0.8, 0.2], [0.3, -0.5]], np.linspace(0, 1, 11))
    for s in (0.2, 0.7):
        q, v = p.derivative(s, 0), p.derivative(s, 1)
        V = eigh_batch(complex_field, q[None])[1][0]
        for n in range(2):
            n1 = -1j * v @ n_vectors(complex_field, q, n)
            k = 1 - n
            assert np.vdot(V[:, k], n1) == pytest.approx(c1_offdiagonal(complex_field, p, n, s)[0], abs=1e-10)


# ------------------------------------------------------------------------ reconstruction
def test_reconstruct_static_hamiltonian():
    f = HamiltonianField(np.diag([-1.0, 2.0]), np.array([PAULI_X]))
    s = np.linspace(0, 1, 21)
    p = SlowPath.static([0.0], s)
    cf = cm_recursion(frame_series(f, p), 0, 2)
    eps = 0.1
    for i in (0, 10, 20):
        psi = reconstruct_wavefunction(cf, eps, 2, i)
        np.testing.assert_allclose(psi, np.exp(1j * s[i] / eps) * np.array([1, 0]), atol=1e-12)


def test_reconstruct_order_zero_is_adiabatic_state(circle_coeffs):
    for i in (0, 250, 600):
        psi = reconstruct_wavefunction(circle_coeffs, 0.1, 0, i)
        n = circle_coeffs.frames.vectors[i][:, 0]
        assert abs(np.vdot(n, psi)) == pytest.approx(1, abs=1e-14)


def test_reconstruct_order_limit(circle_coeffs):
    with pytest.raises(ValidationError):
        reconstruct_wavefunction(circle_coeffs, 0.1, 4, 0)


@pytest.mark.parametrize("m", [0, 1, 2, 3])
def test_reconstruction_error_scaling(real_field, circle, circle_coeffs, m):
    """Exact evolution from the series state stays within O(eps^(m+1)) of the series."""
    errs = []
    idx = np.arange(0, 601, 100)
    epsilons = [0.025, 0.05, 0.1]
    for eps in epsilons:
        psi0 = reconstruct_wavefunction(circle_coeffs, eps, m, 0)
        psi0 = psi0 / np.linalg.norm(psi0)
        ex = evolve_along_path(real_field, circle, psi0, eps, circle.s[idx])
        ser = np.array([reconstruct_wavefunction(circle_coeffs, eps, m, i) for i in idx])
        ser = ser / np.linalg.norm(ser, axis=1)[:, None]
        errs.append(np.abs(ex - ser).max())
    slope, _ = loglog_slope(epsilons, errs)
    assert abs(slope - (m + 1)) < 0.5


def test_gauge_covariance_of_series(complex_field):
    """Re-phasing every |k> along the path changes the state by a constant phase only."""
    s = np.linspace(0, 1, 401)
    p = SlowPath.polynomial([[0.3, 1.0], [0.8, 0.2], [0.3, -0.5]], s)
    fr = frame_series(complex_field, p)
    rates = np.array([0.8, -1.7])
    alpha = np.outer(s, rates) + np.array([0.3, 1.1])
    ph = np.exp(1j * alpha)
    V = fr.vectors * ph[:, None, :]
    W = np.conj(ph)[:, :, None] * fr.W * ph[:, None, :] + 1j * np.einsum("k,kl->kl", rates, np.eye(2))[None]
    fr2 = FrameSeries(fr.s, fr.energies, V, W, fr.velocities, "raw")
    for n in range(2):
        a, b = cm_recursion(fr, n, 3), cm_recursion(fr2, n, 3)
        for i in (0, 200, 400):
            psi, psi2 = reconstruct_wavefunction(a, 0.1, 3, i), reconstruct_wavefunction(b, 0.1, 3, i)
            fid = abs(np.vdot(psi, psi2)) / (np.linalg.norm(psi) * np.linalg.norm(psi2))
            assert abs(fid - 1) < 1e-9
            assert np.vdot(psi, psi2) / abs(np.vdot(psi, psi2)) == pytest.approx(np.exp(1j * alpha[0, n]), abs=1e-6)


# ------------------------------------------------------------------------ exact evolution helpers
def test_evolve_along_static_path_is_stationary():
    f = HamiltonianField(np.diag([-1.0, 2.0]), np.array([PAULI_X]))
    p = SlowPath.static([0.0], np.linspace(0, 1, 11))
    psi = evolve_along_path(f, p, [1, 0], 0.1, [0.0, 0.5, 1.0])
    np.testing.assert_allclose(psi[:, 0], np.exp(1j * np.array([0.0, 5.0, 10.0])), atol=1e-10)


def test_path_force_is_hellmann_feynman_for_eigenstates(complex_field):
    p = SlowPath.static([0.4, -0.3], np.linspace(0, 1, 11))
    V = eigh_batch(complex_field, np.array([[0.4, -0.3]]))[1][0]
    F = path_force(complex_field, p, [0.0], V[:, 0])[0]
    rho = np.hypot(0.4, 0.3)
    E = np.sqrt(1 + rho ** 2)
    np.testing.assert_allclose(F, -np.array([0.4, -0.3]) / E, atol=1e-14)


# ------------------------------------------------------------------------ action-angle map
def test_action_angle_basis_vector():
    I, phi = action_angle_map([1, 0, 0], np.eye(3))
    np.testing.assert_allclose(I, [1, 0, 0])
    assert phi[0] == 0
    assert np.isnan(phi[1]) and np.isnan(UNDEFINED_ANGLE)


def test_action_angle_superposition():
    I, phi = action_angle_map(np.array([1, 1j, 0]) / np.sqrt(2), np.eye(3))
    np.testing.assert_allclose(I, [0.5, 0.5, 0], atol=1e-15)
    np.testing.assert_allclose(phi[:2], [0, np.pi / 2], atol=1e-15)


def test_action_angle_requires_normalized_state():
    with pytest.raises(ValidationError):
        action_angle_map([1, 1, 0], np.eye(3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_actions_sum_to_one(seed):
    r = np.random.default_rng(seed)
    psi = r.normal(size=4) + 1j * r.normal(size=4)
    psi /= np.linalg.norm(psi)
    basis = np.linalg.qr(r.normal(size=(4, 4)) + 1j * r.normal(size=(4, 4)))[0]
    I, _ = action_angle_map(psi, basis)
    assert abs(I.sum() - 1) < 1e-12


def test_hamilton_equations_reproduce_schroedinger(rng):
    A = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    kappa = 0.5 * (A + A.conj().T)
    g0 = rng.normal(size=3) + 1j * rng.normal(size=3)
    g0 /= np.linalg.norm(g0)
    I0, phi0 = np.abs(g0) ** 2, np.angle(g0)

    def rhs(t, y):
        dI, dphi = action_angle_rhs(y[:3], y[3:], kappa)
        return np.concatenate([dI, dphi])

    ts = np.linspace(0, 2, 21)
    sol = solve_ivp(rhs, (0, 2), np.concatenate([I0, phi0]), method="DOP853", rtol=1e-12, atol=1e-14, t_eval=ts)
    exact = np.array([np.abs(expm(-1j * kappa * t) @ g0) ** 2 for t in ts])
    assert np.abs(sol.y[:3].T - exact).max() < 1e-8


def test_circle_frames_real_for_real_field(real_field, circle_coeffs):
    assert np.abs(circle_coeffs.frames.vectors.imag).max() == 0.0
    _ = PAULI_Z
