"""Exact mean-field dynamics and effective post-adiabatic dynamics.

All integrations run in slow time ``s = eps t``. With ``m`` the slow-time
kinetic mass (``m = eps^2 M`` for a bare mass ``M``) the exact equations are

    i eps psi' = H(q) psi,     m q'' = -dV - <psi|dH|psi>,

and the effective equations are the Euler-Lagrange equations of the
truncated Lagrangian described in :mod:`postadiabatic.tensors`.

Third order is stiff: the acceleration-dependent term introduces a spurious
mode with frequency of order ``m / (eps^3 |z|)``. Orders 3 and 4 therefore
start on the slow manifold (see :func:`slow_manifold_acceleration`) and use an
implicit Radau integrator by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .adiabatic import superadiabatic_state
from .errors import (ConstraintError, IntegrationError, NumericalError, SingularMetricError,
                     UnsupportedConfigurationError, ValidationError)
from .numerics import RICHARDSON_OFFSETS, RICHARDSON_WEIGHTS, grid_derivative
from .operators import HamiltonianField
from .tensors import (DerivativeData, ModelField, Potential, force_order1, force_order2_el,
                      force_order3_rest)

ORDERS = ("O0", "O1", "O2", "O3", "O4")
DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-10
EFFECTIVE_START = 0.5  # slow time at which effective runs are matched to exact runs
# Relative step for differentiating the odd-K constraint along the flow. The
# constraint contains finite-difference tensor derivatives; a larger step keeps
# their round-off out of the jerk (4th-order stencil, truncation ~ step^4).
CONSTRAINT_STEP = 1e-2


def parse_order(order) -> int:
    """Accept ``"O3"``, ``"3"`` or ``3``."""
    if isinstance(order, str):
        o = order.strip().upper().lstrip("O")
        if not o.isdigit():
            raise ValidationError(f"unknown truncation order {order!r}")
        order = int(o)
    order = int(order)
    if not 0 <= order <= 4:
        raise ValidationError(f"truncation order must be O0..O4, got {order}")
    return order


@dataclass
class Trajectory:
    """Sampled solution plus per-sample diagnostics."""

    s: np.ndarray
    q: np.ndarray
    v: np.ndarray
    a: Optional[np.ndarray] = None
    jerk: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    time_kind: str = "slow"

    def __len__(self) -> int:
        return self.s.size


# --------------------------------------------------------------------------- exact
def exact_energy(field_: HamiltonianField, potential: Potential, kinetic_mass: float, q, v, psi) -> np.ndarray:
    """Total mean energy ``m/2 |q'|^2 + V + <psi|H|psi>`` for stacked samples."""
    q = np.atleast_2d(q)
    v = np.atleast_2d(v)
    psi = np.atleast_2d(psi)
    Hs = field_.evaluate_batch(q)
    quantum = np.einsum("pi,pij,pj->p", psi.conj(), Hs, psi).real
    return 0.5 * kinetic_mass * np.sum(v * v, axis=1) + potential.value(q) + quantum


def integrate_exact(field_: HamiltonianField, potential: Potential, kinetic_mass: float, epsilon: float,
                    psi0, q0, v0, s_span, s_eval=None, rtol: float = 1e-12, atol: float = 1e-13,
                    dense: bool = False) -> Trajectory:
    """Coupled Schrödinger-Newton integration in slow time.

    Monitors the state norm and the total mean energy; both land in
    ``diagnostics`` (``norm``, ``energy``).
    """
    psi0 = np.asarray(psi0, complex)
    q0 = np.asarray(q0, float)
    v0 = np.asarray(v0, float)
    K = field_.K
    if abs(np.linalg.norm(psi0) - 1) > 1e-9:
        raise ValidationError("initial quantum state must be normalized")
    if q0.shape != (K,) or v0.shape != (K,):
        raise ValidationError(f"initial coordinates must have length K={K}")
    dH = field_.derivatives_batch(q0[None])[0] if field_.is_pencil else None

    def rhs(s, y):
        q = y[:K].real
        v = y[K:2 * K].real
        psi = y[2 * K:]
        H = field_.evaluate_batch(q[None])[0]
        dh = dH if dH is not None else field_.derivatives_batch(q[None])[0]
        force = np.einsum("i,aij,j->a", psi.conj(), dh, psi).real + potential.gradient(q[None])[0]
        return np.concatenate([v, -force / kinetic_mass, -1j / epsilon * (H @ psi)])

    y0 = np.concatenate([q0, v0, psi0]).astype(complex)
    sol = solve_ivp(rhs, tuple(s_span), y0, method="DOP853", rtol=rtol, atol=atol, t_eval=s_eval,
                    dense_output=dense)
    if not sol.success:
        raise IntegrationError(f"exact integration failed: {sol.message}",
                               partial=(sol.t, sol.y))
    q = sol.y[:K].real.T
    v = sol.y[K:2 * K].real.T
    psi = sol.y[2 * K:].T
    tr = Trajectory(s=sol.t, q=q, v=v, psi=psi, meta={"kind": "exact", "epsilon": epsilon, "rtol": rtol,
                                                       "atol": atol, "nfev": int(sol.nfev)})
    tr.diagnostics["norm"] = np.linalg.norm(psi, axis=1)
    tr.diagnostics["energy"] = exact_energy(field_, potential, kinetic_mass, q, v, psi)
    if dense:
        tr.meta["dense"] = sol.sol
    return tr


# --------------------------------------------------------------- effective forces
def _rest(dd: DerivativeData, mf: ModelField, v, acc, order: int) -> np.ndarray:
    """All Euler-Lagrange terms except the highest time derivative.

    For ``order <= 2`` the acceleration term ``m a + eps^2 G a`` is included
    through ``acc``; for order 3 the ``2 eps^3 z q'''`` term is excluded.
    """
    eps = mf.epsilon
    m = dd.model
    r = mf.kinetic_mass * acc + m.dE + m.dV
    if order >= 1:
        r = r + eps * force_order1(m, v)
    if order >= 2:
        r = r + eps ** 2 * force_order2_el(dd, v, acc)
    if order >= 3:
        r = r + eps ** 3 * force_order3_rest(dd, v, acc)
    return r


def acceleration(mf: ModelField, q, v, order: int = 2, dd: DerivativeData | None = None) -> np.ndarray:
    """Solve the order-``order`` (<= 2) equations for ``q''``."""
    order = min(order, 2)
    if dd is None:
        dd = mf.derivatives(q, order=2 if order == 2 else 1)
    K = mf.K
    zero = np.zeros(K)
    r0 = _rest(dd, mf, np.asarray(v, float), zero, order)
    Mm = mf.kinetic_mass * np.eye(K)
    if order >= 2:
        Mm = Mm + mf.epsilon ** 2 * dd.model.G
    try:
        return np.linalg.solve(Mm, -r0)
    except np.linalg.LinAlgError as exc:
        raise SingularMetricError(f"effective mass matrix is singular at q={np.asarray(q).tolist()}") from exc


def _acc_matrix(dd: DerivativeData, mf: ModelField, v, order: int) -> np.ndarray:
    """Jacobian of :func:`_rest` with respect to the acceleration (it is linear in it)."""
    K = mf.K
    zero = np.zeros(K)
    r0 = _rest(dd, mf, v, zero, order)
    return np.column_stack([_rest(dd, mf, v, e, order) - r0 for e in np.eye(K)])


def jerk_order3(mf: ModelField, q, v, acc, dd: DerivativeData | None = None) -> np.ndarray:
    """Third-order equation solved for ``q'''`` (even K, invertible z)."""
    if dd is None:
        dd = mf.derivatives(q, order=3)
    z = dd.model.z
    _check_z(z, mf)
    r = _rest(dd, mf, np.asarray(v, float), np.asarray(acc, float), 3)
    return np.linalg.solve(2 * mf.epsilon ** 3 * z, -r)


def _check_z(z, mf):
    if abs(np.linalg.det(z)) < 1e-12:
        raise SingularMetricError("z tensor is nearly degenerate; third-order dynamics needs det z != 0 for even K",
                                  det=float(np.linalg.det(z)))


def _o2_flow_jerk(mf: ModelField, q, v, a, h: float = 1e-4) -> np.ndarray:
    """``d/ds`` of the second-order acceleration along its own flow."""
    vals = [acceleration(mf, q + o * h * v, v + o * h * a, 2) for o in RICHARDSON_OFFSETS]
    return sum(w * x for w, x in zip(RICHARDSON_WEIGHTS, vals)) / h


def slow_manifold_acceleration(mf: ModelField, q, v, iterations: int = 2):
    """Acceleration (and jerk) consistent with the third-order equations to high order.

    Starting from the second-order acceleration, the third-order equation is
    solved for ``q''`` with ``q'''`` taken from the second-order flow. Each
    iteration shrinks the excitation of the spurious fast mode by a factor of
    order ``eps^3``.
    """
    q = np.asarray(q, float)
    v = np.asarray(v, float)
    a = acceleration(mf, q, v, 2)
    j = _o2_flow_jerk(mf, q, v, a)
    if mf.real:
        return a, j
    dd = mf.derivatives(q, order=3)
    eps3 = mf.epsilon ** 3
    for _ in range(iterations):
        Amat = _acc_matrix(dd, mf, v, 3)
        r0 = _rest(dd, mf, v, np.zeros(mf.K), 3)
        a = np.linalg.solve(Amat, -(r0 + 2 * eps3 * dd.model.z @ j))
    return a, j


# ------------------------------------------------------------------ odd K constraint
def null_vector(z: np.ndarray) -> np.ndarray:
    """Unit null direction of an antisymmetric matrix of odd size.

    For K = 3 the axial vector is used, which is smooth in ``z``. For larger
    odd K the right singular vector of the smallest singular value is used
    with its largest component made positive.
    """
    K = z.shape[0]
    if K == 1:
        return np.ones(1)
    if K == 3:
        y = np.array([z[1, 2], z[2, 0], z[0, 1]])
        nrm = np.linalg.norm(y)
        if nrm < 1e-300:
            raise UnsupportedConfigurationError("z vanishes; null direction is not unique")
        return y / nrm
    _, sv, vt = np.linalg.svd(z)
    if sv[-2] < 1e-10 * max(sv[0], 1e-300):
        raise UnsupportedConfigurationError("z has more than one null direction")
    y = vt[-1]
    return y * np.sign(y[np.argmax(np.abs(y))])


def odd_k_constraint(mf: ModelField, q, v, acc, dd: DerivativeData | None = None):
    """Constraint residual ``y0 . phi`` and the projected third-order solve.

    Returns ``(residual, jerk)``. ``phi = -(all terms except 2 eps^3 z q''')``;
    the components of ``q'''`` transverse to the null vector ``y0`` follow
    from ``2 eps^3 z q''' = phi``, the component along ``y0`` from the time
    derivative of the constraint.
    """
    q = np.asarray(q, float)
    v = np.asarray(v, float)
    acc = np.asarray(acc, float)
    K = mf.K
    if K % 2 == 0:
        raise UnsupportedConfigurationError("the constrained third-order mode applies to odd K only")
    eps3 = mf.epsilon ** 3
    if dd is None:
        dd = mf.derivatives(q, order=3)

    def C(ddx, qv, vv, aa):
        y0 = null_vector(ddx.model.z) if K > 1 else np.ones(1)
        return y0 @ (-_rest(ddx, mf, vv, aa, 3))

    y0 = null_vector(dd.model.z)
    phi = -_rest(dd, mf, v, acc, 3)
    residual = float(y0 @ phi)
    if K == 1:
        # z = 0: the whole equation is the constraint; the jerk follows from its derivative
        base = np.zeros(1)
    else:
        base = np.linalg.lstsq(2 * eps3 * dd.model.z, phi, rcond=1e-12)[0]
        base = base - y0 * (y0 @ base)
    # d/ds C = dC/dq . v + dC/dv . acc + dC/dacc . jerk, with jerk = base + tau y0
    h = CONSTRAINT_STEP * (1 + np.linalg.norm(q)) / max(np.linalg.norm(v), 1e-12)
    vals = [C(mf.derivatives(q + o * h * v, order=3), q, v, acc) for o in RICHARDSON_OFFSETS]
    dq_term = sum(w * x for w, x in zip(RICHARDSON_WEIGHTS, vals)) / h
    hv = CONSTRAINT_STEP * (1 + np.linalg.norm(v))
    an = np.linalg.norm(acc)
    if an > 0:
        hh = hv / an
        vals = [C(dd, q, v + o * hh * acc, acc) for o in RICHARDSON_OFFSETS]
        dv_term = sum(w * x for w, x in zip(RICHARDSON_WEIGHTS, vals)) / hh
    else:
        dv_term = 0.0
    c0 = C(dd, q, v, np.zeros(K))
    lin = lambda x: C(dd, q, v, x) - c0          # noqa: E731 - C is affine in the acceleration
    denom = lin(y0)
    if abs(denom) < 1e-14:
        raise NumericalError("constraint derivative does not determine the null component of q'''")
    tau = -(dq_term + dv_term + lin(base)) / denom
    return residual, base + tau * y0


def consistent_acceleration(mf: ModelField, q, v, acc) -> np.ndarray:
    """Shift ``acc`` along the null direction so the odd-K constraint holds."""
    dd = mf.derivatives(q, order=3)
    K = mf.K
    y0 = null_vector(dd.model.z) if K > 1 else np.ones(1)
    c = lambda x: y0 @ (-_rest(dd, mf, np.asarray(v, float), x, 3))  # noqa: E731
    c0 = c(np.zeros(K))
    k = (c(y0) - c0)
    return np.asarray(acc, float) + y0 * (-(c(np.asarray(acc, float))) / k)


# ------------------------------------------------------------------ fourth order
def _o4_terms(mf: ModelField, x, v, a, j):
    d = mf.fourth_order_data(x)
    eps = mf.epsilon
    G, G1, _ = d.G
    A0, A1 = d.a
    B0, B1, B2 = d.b
    W0, W1, W2, W3 = d.w
    V1 = mf.potential.derivative_1d(x, 1)
    g = mf.kinetic_mass + eps ** 2 * G
    lower = (g * a + 0.5 * eps ** 2 * G1 * v * v + V1 + d.dE
             + eps ** 4 * (4 * W1 * v * j + 3 * W1 * a * a + (12 * A0 + 6 * W2 - 4 * B1) * v * v * a
                           + (3 * A1 + W3 - B2) * v ** 4))
    return d, lower, 2 * eps ** 4 * W0


def snap_order4(mf: ModelField, x, v, a, j) -> float:
    """Fourth-order equation solved for ``q''''`` (K = 1, real H)."""
    _, lower, lead = _o4_terms(mf, float(x), float(v), float(a), float(j))
    return -lower / lead


def energy_order4(mf: ModelField, x, v, a, j) -> float:
    """Conserved energy of the fourth-order Lagrangian (generalized Ostrogradsky form)."""
    d = mf.fourth_order_data(float(x))
    eps = mf.epsilon
    g = mf.kinetic_mass + eps ** 2 * d.G[0]
    A0 = d.a[0]
    B1 = d.b[1]
    W0, W1, W2 = d.w[0], d.w[1], d.w[2]
    V0 = mf.potential.derivative_1d(float(x), 0)
    return (0.5 * g * v * v + V0 + d.E
            + eps ** 4 * ((3 * A0 - B1 + W2) * v ** 4 + 2 * W1 * v * v * a + 2 * W0 * v * j - W0 * a * a))


# -------------------------------------------------------------- kinematics
def effective_energy(dd: DerivativeData, mf: ModelField, v, acc=None, order: int = 3) -> float:
    """Energy of the truncated Lagrangian (the connection drops out)."""
    m = dd.model
    v = np.asarray(v, float)
    E = 0.5 * v @ (mf.kinetic_mass * np.eye(mf.K) + (mf.epsilon ** 2 * m.G if order >= 2 else 0)) @ v + m.V + m.E_n
    if order >= 3 and acc is not None:
        eps3 = mf.epsilon ** 3
        E += 2 * eps3 * np.einsum("abc,a,b,c->", m.f_sym, v, v, v)
        E += 2 * eps3 * np.einsum("am,a,m->", m.z, v, np.asarray(acc, float))
    return float(E)


def momentum(dd: DerivativeData, mf: ModelField, v, acc) -> np.ndarray:
    """``p = dL/dv - d/ds dL/dacc`` of the third-order Lagrangian."""
    m = dd.model
    eps = mf.epsilon
    v = np.asarray(v, float)
    acc = np.asarray(acc, float)
    p = eps * m.A + (mf.kinetic_mass * np.eye(mf.K) + eps ** 2 * m.G) @ v
    p = p + 3 * eps ** 3 * np.einsum("mab,a,b->m", m.f_sym, v, v)
    p = p + 2 * eps ** 3 * m.z @ acc
    if dd.dz is not None:
        p = p + eps ** 3 * np.einsum("gmb,g,b->m", dd.dz, v, v)
    return p


def lagrangian_velocity_gradient(dd: DerivativeData, mf: ModelField, v, acc) -> np.ndarray:
    """``dL/dv`` of the third-order Lagrangian."""
    m = dd.model
    eps = mf.epsilon
    v = np.asarray(v, float)
    return (eps * m.A + (mf.kinetic_mass * np.eye(mf.K) + eps ** 2 * m.G) @ v
            + 3 * eps ** 3 * np.einsum("mab,a,b->m", m.f_sym, v, v)
            + eps ** 3 * m.z @ np.asarray(acc, float))


def spin_tensor(z: np.ndarray, v, eps: float) -> np.ndarray:
    """``S_ab = eps^3 (z_bc v_c v_a - z_ac v_c v_b)``."""
    v = np.asarray(v, float)
    zv = z @ v
    return eps ** 3 * (np.outer(v, zv) - np.outer(zv, v))


def angular_momentum(dd: DerivativeData, mf: ModelField, q, v, acc):
    """Orbital ``L_ab = p_a q_b - p_b q_a``, spin ``S`` and total ``M = L + S``."""
    if mf.K < 2:
        raise UnsupportedConfigurationError("angular momentum needs K >= 2")
    p = momentum(dd, mf, v, acc)
    q = np.asarray(q, float)
    L = np.outer(p, q) - np.outer(q, p)
    S = spin_tensor(dd.model.z, v, mf.epsilon)
    return L, S, L + S


def zitterbewegung_residual(mf: ModelField, traj: Trajectory, min_speed2: float = 1e-12) -> np.ndarray:
    """Residual of ``p = dL/dv + d/ds (S_am v_a / |v|^2)`` along a third-order trajectory.

    The slow-time derivative uses second-order central differences on the
    trajectory grid. Rows where ``|v|^2 <= min_speed2`` are NaN.
    """
    if traj.a is None:
        raise ValidationError("trajectory must carry accelerations")
    N = len(traj)
    proj = np.full((N, mf.K), np.nan)
    p = np.zeros((N, mf.K))
    dl = np.zeros((N, mf.K))
    for i in range(N):
        dd = mf.derivatives(traj.q[i], order=3)
        v = traj.v[i]
        p[i] = momentum(dd, mf, v, traj.a[i])
        dl[i] = lagrangian_velocity_gradient(dd, mf, v, traj.a[i])
        v2 = v @ v
        if v2 > min_speed2:
            S = spin_tensor(dd.model.z, v, mf.epsilon)
            proj[i] = S.T @ v / v2
    ds = traj.s[1] - traj.s[0]
    dproj = grid_derivative(proj, ds)
    res = p - dl - dproj
    res[np.isnan(proj).any(axis=1)] = np.nan
    return res


# ------------------------------------------------------------------ integrator
def _solve(rhs, span, y0, method, rtol, atol, s_eval, label):
    sol = solve_ivp(rhs, tuple(span), y0, method=method, rtol=rtol, atol=atol, t_eval=s_eval)
    if not sol.success:
        raise IntegrationError(f"{label} integration failed: {sol.message}", partial=(sol.t, sol.y))
    return sol


def integrate_effective(mf: ModelField, order, init: dict, s_span, s_eval=None, rtol: float = DEFAULT_RTOL,
                        atol: float = DEFAULT_ATOL, method: str | None = None, constraint_tol: float = 1e-8,
                        diagnostics: bool = True) -> Trajectory:
    """Integrate the order-``order`` effective equations.

    ``init`` holds ``q`` and ``v``; ``a`` (and ``j`` for O4) are optional
    and default to slow-manifold values. For O3 with odd K a supplied ``a``
    must satisfy the constraint to ``constraint_tol``.
    """
    order = parse_order(order)
    K = mf.K
    q0 = np.asarray(init["q"], float)
    v0 = np.asarray(init["v"], float)
    if q0.shape != (K,) or v0.shape != (K,):
        raise ValidationError(f"initial data must have K={K} components")
    meta = {"order": f"O{order}", "epsilon": mf.epsilon, "rtol": rtol, "atol": atol}

    if order == 4:
        if K != 1 or not mf.real:
            raise UnsupportedConfigurationError("O4 requires K = 1 and a real Hamiltonian")
        a0 = init.get("a")
        j0 = init.get("j")
        if a0 is None or j0 is None:
            a_s, j_s = slow_manifold_acceleration(mf, q0, v0)
            a0 = a_s if a0 is None else a0
            j0 = j_s if j0 is None else j0

        def rhs4(s, y):
            return np.array([y[1], y[2], y[3], snap_order4(mf, y[0], y[1], y[2], y[3])])

        y0 = np.array([q0[0], v0[0], float(np.ravel(a0)[0]), float(np.ravel(j0)[0])])
        sol = _solve(rhs4, s_span, y0, method or "DOP853", rtol, atol, s_eval, "O4")
        tr = Trajectory(s=sol.t, q=sol.y[0][:, None], v=sol.y[1][:, None], a=sol.y[2][:, None],
                        jerk=sol.y[3][:, None], meta=meta)
        meta["method"] = method or "DOP853"
        if diagnostics:
            tr.diagnostics["energy"] = np.array([energy_order4(mf, *sol.y[:, i]) for i in range(sol.t.size)])
        return tr

    if order <= 2 or (order == 3 and mf.real):
        eff = min(order, 2)
        if order == 3:
            meta["note"] = "z vanishes identically for a real Hamiltonian; O3 reduces to O2"

        def rhs(s, y):
            q, v = y[:K], y[K:]
            return np.concatenate([v, acceleration(mf, q, v, eff)])

        m = method or "DOP853"
        sol = _solve(rhs, s_span, np.concatenate([q0, v0]), m, rtol, atol, s_eval, f"O{order}")
        q = sol.y[:K].T
        v = sol.y[K:].T
        acc = np.array([acceleration(mf, q[i], v[i], eff) for i in range(sol.t.size)]) if diagnostics else None
        tr = Trajectory(s=sol.t, q=q, v=v, a=acc, meta=dict(meta, method=m))
        if diagnostics:
            tr.diagnostics["energy"] = np.array(
                [effective_energy(mf.derivatives(q[i], order=2), mf, v[i], order=eff) for i in range(sol.t.size)])
        return tr

    # order 3 with a complex field
    a0 = init.get("a")
    odd = K % 2 == 1
    if a0 is None:
        a0, _ = slow_manifold_acceleration(mf, q0, v0)
        if odd:
            a0 = consistent_acceleration(mf, q0, v0, a0)
    a0 = np.asarray(a0, float)
    if odd:
        res, _ = odd_k_constraint(mf, q0, v0, a0)
        if abs(res) > constraint_tol:
            raise ConstraintError(f"initial data violate the odd-K constraint (residual {abs(res):.3e} "
                                  f"> {constraint_tol:.1e})", residual=abs(res))

        def rhs3(s, y):
            q, v, a = y[:K], y[K:2 * K], y[2 * K:]
            _, j = odd_k_constraint(mf, q, v, a)
            return np.concatenate([v, a, j])
    else:
        _check_z(mf.derivatives(q0, order=3).model.z, mf)

        def rhs3(s, y):
            q, v, a = y[:K], y[K:2 * K], y[2 * K:]
            return np.concatenate([v, a, jerk_order3(mf, q, v, a)])

    m = method or "Radau"
    sol = _solve(rhs3, s_span, np.concatenate([q0, v0, a0]), m, rtol, atol, s_eval, "O3")
    q = sol.y[:K].T
    v = sol.y[K:2 * K].T
    acc = sol.y[2 * K:].T
    meta.update(method=m, nfev=int(sol.nfev), mode="odd-K constrained" if odd else "even-K full")
    tr = Trajectory(s=sol.t, q=q, v=v, a=acc, meta=meta)
    if diagnostics:
        E = np.empty(sol.t.size)
        res = np.zeros(sol.t.size)
        for i in range(sol.t.size):
            dd = mf.derivatives(q[i], order=3)
            E[i] = effective_energy(dd, mf, v[i], acc[i], order=3)
            if odd:
                y0 = null_vector(dd.model.z)
                res[i] = y0 @ (-_rest(dd, mf, v[i], acc[i], 3))
        tr.diagnostics["energy"] = E
        if odd:
            tr.diagnostics["constraint_residual"] = res
    return tr


# ------------------------------------------------------------ matched comparison
def exact_initial_state(mf: ModelField, q0, v0, order: int = 3) -> np.ndarray:
    """Superadiabatic quantum state matching classical initial data ``(q0, v0)``."""
    q0 = np.asarray(q0, float)
    v0 = np.asarray(v0, float)
    a0 = acceleration(mf, q0, v0, 2)
    j0 = _o2_flow_jerk(mf, q0, v0, a0)
    return superadiabatic_state(mf.field, mf.level, q0, [v0, a0, j0], mf.epsilon, order=order)


@dataclass
class ConvergenceReport:
    epsilons: list
    max_errors: dict
    slopes: dict
    intercepts: dict
    meta: dict = field(default_factory=dict)


def _sweep_one(mf: ModelField, q0, v0, eps: float, orders, s_start: float, duration: float, samples: int,
               mass_scaling: str) -> list:
    """Max deviations for one epsilon (one independent sweep task)."""
    if mass_scaling == "slow":
        m_eps = mf.with_epsilon(eps)
    else:
        m_eps = mf.with_epsilon(eps, mf.kinetic_mass * (eps / mf.epsilon) ** 2)
    psi0 = exact_initial_state(m_eps, q0, v0)
    ts = np.linspace(s_start, s_start + duration, samples)
    ex = integrate_exact(m_eps.field, m_eps.potential, m_eps.kinetic_mass, eps, psi0, q0, v0,
                         (0.0, s_start + duration), s_eval=np.concatenate([[0.0], ts]))
    qex = ex.q[1:]
    qi, vi = ex.q[1], ex.v[1]
    out = []
    for o in orders:
        tr = integrate_effective(m_eps, o, {"q": qi, "v": vi}, (s_start, s_start + duration), s_eval=ts,
                                 rtol=1e-11 if o < 3 else 1e-10, atol=1e-12, diagnostics=False)
        out.append(float(np.max(np.abs(tr.q - qex))))
    return out


def convergence_sweep(mf: ModelField, q0, v0, epsilons, orders=(0, 1, 2, 3), s_start: float = EFFECTIVE_START,
                      duration: float = 4.0, samples: int = 81, mass_scaling: str = "slow",
                      workers: int = 1) -> ConvergenceReport:
    """Max deviation of effective runs from the exact run, per order and epsilon.

    The exact run starts at ``s = 0`` in the superadiabatic state; effective
    runs start at ``s_start`` from the exact ``q`` and ``q'`` there.
    ``mass_scaling="slow"`` keeps ``mf.kinetic_mass`` fixed across epsilon;
    ``"physical"`` rescales it as ``eps^2 M`` with ``M = kinetic_mass / eps_ref^2``.
    With ``workers > 1`` the epsilon values run in separate processes; each
    task is deterministic, so the report does not depend on ``workers``.
    """
    from .numerics import loglog_slope

    orders = list(orders)
    args = [(mf, q0, v0, eps, orders, s_start, duration, samples, mass_scaling) for eps in epsilons]
    if workers > 1 and len(args) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, len(args))) as pool:
            rows = list(pool.map(_sweep_one, *zip(*args)))
    else:
        rows = [_sweep_one(*a) for a in args]
    errors = {o: [row[i] for row in rows] for i, o in enumerate(orders)}
    slopes, icpts = {}, {}
    for o in orders:
        slopes[o], icpts[o] = loglog_slope(epsilons, errors[o])
    return ConvergenceReport(list(epsilons), errors, slopes, icpts,
                             {"s_start": s_start, "duration": duration, "samples": samples})
