"""First-order (Hamiltonian) form of the third-order effective dynamics.

The third-order Lagrangian depends on the acceleration only through
``-eps^3 z_ab q''_a q'_b``. Introducing ``v = q'`` with a multiplier ``pi``
gives the extended first-order Lagrangian

    L = pi . (q' - v) - eps^3 z_ab v'_a v_b + L3(q, v)
      = A_a(Q) Q'_a + H(Q),     Q = (q, v, pi),

with one-form ``A = (pi, eps^3 z_ba v_b, 0)`` and ``H = L3(q, v) - pi . v``.
Its Euler-Lagrange equations read ``Omega Q' = dH`` with the closed two-form
``Omega_ab = d_b A_a - d_a A_b``, in blocks

    Omega = [[ 0,    Y,  I],          Y_ab = -eps^3 v_c d_a z_cb,
             [-Y^T,  Z,  0],          Z_ab = -2 eps^3 z_ab,
             [-I,    0,  0]]

and the flow is ``Q' = Omega^{-1} dH = {Q, H}``. ``L3(q, v)`` here holds every
third-order term except the acceleration coupling:
``-V - E_n + eps A.v + 1/2 v g v + eps^3 f v v v``.

Only even K is supported: for odd K the block ``Z`` is singular and the
dynamics is constrained (see :func:`postadiabatic.dynamics.odd_k_constraint`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, SingularMetricError, UnsupportedConfigurationError, ValidationError
from .tensors import DerivativeData, ModelField

SINGULAR_Z = 1e-12


# ------------------------------------------------------------------ systems
class ModelSystem:
    """Extended-phase-space data of a :class:`ModelField` (third-order truncation)."""

    def __init__(self, mf: ModelField):
        if mf.real:
            raise SingularMetricError("z vanishes identically for a real Hamiltonian; the extended system "
                                      "has no symplectic inverse")
        if mf.K % 2 == 1:
            raise UnsupportedConfigurationError(
                "Hamiltonian form of the constrained odd-K dynamics is not implemented; "
                "use the constrained Lagrangian integrator instead")
        self.mf = mf
        self.K = mf.K
        self.epsilon = mf.epsilon
        self._cache_q = None
        self._cache_dd = None

    def data(self, q) -> DerivativeData:
        q = np.asarray(q, float)
        if self._cache_q is None or not np.array_equal(q, self._cache_q):
            self._cache_dd = self.mf.derivatives(q, order=3)
            self._cache_q = q.copy()
        return self._cache_dd

    def z_and_dz(self, q):
        dd = self.data(q)
        return dd.model.z, dd.dz

    def lagrangian_gradient_v(self, q, v) -> np.ndarray:
        """``dL3/dv`` without the acceleration coupling."""
        dd = self.data(q)
        m = dd.model
        eps = self.epsilon
        return (eps * m.A + m.metric @ v + 3 * eps ** 3 * np.einsum("mab,a,b->m", m.f_sym, v, v))

    def hamiltonian(self, Q) -> float:
        K = self.K
        q, v, pi = Q[:K], Q[K:2 * K], Q[2 * K:]
        m = self.data(q).model
        eps = self.epsilon
        L3 = (-m.V - m.E_n + eps * m.A @ v + 0.5 * v @ m.metric @ v
              + eps ** 3 * np.einsum("abc,a,b,c->", m.f_sym, v, v, v))
        return float(L3 - pi @ v)

    def hamiltonian_gradient(self, Q) -> np.ndarray:
        K = self.K
        q, v, pi = Q[:K], Q[K:2 * K], Q[2 * K:]
        dd = self.data(q)
        m = dd.model
        eps = self.epsilon
        dq = (-m.dV - m.dE + eps * dd.dA @ v + 0.5 * eps ** 2 * np.einsum("gab,a,b->g", dd.dG, v, v)
              + eps ** 3 * np.einsum("gabc,a,b,c->g", dd.dfs, v, v, v))
        dv = self.lagrangian_gradient_v(q, v) - pi
        return np.concatenate([dq, dv, -v])


class QuadraticSystem:
    """Constant ``z`` with a quadratic Hamiltonian ``H = 1/2 Q.S.Q``; the flow is linear."""

    def __init__(self, z, S, epsilon: float):
        z = np.asarray(z, float)
        S = np.asarray(S, float)
        K = z.shape[0]
        if np.max(np.abs(z + z.T)) > 0:
            raise ValidationError("z must be antisymmetric")
        if S.shape != (3 * K, 3 * K):
            raise ValidationError(f"S must be {3 * K}x{3 * K}, got {S.shape}")
        self.K = K
        self.epsilon = float(epsilon)
        self.z = z
        self.S = 0.5 * (S + S.T)

    def z_and_dz(self, q):
        return self.z, np.zeros((self.K,) * 3)

    def hamiltonian(self, Q) -> float:
        return float(0.5 * Q @ self.S @ Q)

    def hamiltonian_gradient(self, Q) -> np.ndarray:
        return self.S @ Q


# ------------------------------------------------------------------- state
@dataclass
class ExtendedState:
    """A point ``Q = (q, v, pi)`` with its cached symplectic blocks."""

    Q: np.ndarray
    K: int
    epsilon: float
    z: np.ndarray
    dz: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    H: float
    meta: dict = field(default_factory=dict)

    @property
    def q(self) -> np.ndarray:
        return self.Q[:self.K]

    @property
    def v(self) -> np.ndarray:
        return self.Q[self.K:2 * self.K]

    @property
    def pi(self) -> np.ndarray:
        return self.Q[2 * self.K:]

    @property
    def one_form(self) -> np.ndarray:
        return np.concatenate([self.pi, self.epsilon ** 3 * self.z.T @ self.v, np.zeros(self.K)])


def _blocks(system, Q):
    K = system.K
    eps3 = system.epsilon ** 3
    z, dz = system.z_and_dz(Q[:K])
    v = Q[K:2 * K]
    Y = -eps3 * np.einsum("c,acb->ab", v, dz)
    Z = -2 * eps3 * z
    return z, dz, Y, Z


def state_at(system, Q) -> ExtendedState:
    """Evaluate the blocks and ``H`` of ``system`` at ``Q``."""
    Q = np.asarray(Q, float)
    if Q.shape != (3 * system.K,):
        raise ValidationError(f"extended state must have 3K={3 * system.K} components")
    z, dz, Y, Z = _blocks(system, Q)
    return ExtendedState(Q=Q.copy(), K=system.K, epsilon=system.epsilon, z=z, dz=dz, Y=Y, Z=Z,
                         H=system.hamiltonian(Q))


def build_extended(mf: ModelField, q, v, acc=None) -> tuple[ModelSystem, ExtendedState]:
    """Extended state matching Lagrangian data ``(q, q', q'')``.

    ``pi`` equals the higher-derivative momentum ``dL/dq' - d/ds dL/dq''``,
    which is what the Euler-Lagrange equation for ``v`` requires. ``acc``
    defaults to the slow-manifold acceleration.
    """
    from .dynamics import momentum, slow_manifold_acceleration

    system = ModelSystem(mf)
    q = np.asarray(q, float)
    v = np.asarray(v, float)
    if acc is None:
        acc, _ = slow_manifold_acceleration(mf, q, v)
    dd = system.data(q)
    pi = momentum(dd, mf, v, acc)
    st = state_at(system, np.concatenate([q, v, pi]))
    st.meta["acceleration"] = np.asarray(acc, float)
    return system, st


# ------------------------------------------------------------- two-form
def omega(state: ExtendedState) -> np.ndarray:
    """``Omega`` in the block layout ``[[0, Y, I], [-Y^T, Z, 0], [-I, 0, 0]]``."""
    K = state.K
    I = np.eye(K)
    O = np.zeros((K, K))
    return np.block([[O, state.Y, I], [-state.Y.T, state.Z, O], [-I, O, O]])


def omega_inverse(state: ExtendedState) -> np.ndarray:
    """Block inverse ``[[0, 0, -I], [0, Z^-1, -Z^-1 Y^T], [I, -Y Z^-1, Y Z^-1 Y^T]]``."""
    K = state.K
    det = np.linalg.det(state.Z)
    if abs(det) < SINGULAR_Z * state.epsilon ** (3 * K):
        raise SingularMetricError(f"symplectic block Z is singular (det {det:.3e})", det=float(det))
    Zi = np.linalg.inv(state.Z)
    I = np.eye(K)
    O = np.zeros((K, K))
    Y = state.Y
    return np.block([[O, O, -I], [O, Zi, -Zi @ Y.T], [I, -Y @ Zi, Y @ Zi @ Y.T]])


def one_form(system, Q) -> np.ndarray:
    """``A(Q) = (pi, eps^3 z^T v, 0)``."""
    K = system.K
    z, _ = system.z_and_dz(Q[:K])
    return np.concatenate([Q[2 * K:], system.epsilon ** 3 * z.T @ Q[K:2 * K], np.zeros(K)])


def omega_from_one_form(system, Q, h: float = 1e-5) -> np.ndarray:
    """``Omega_ab = d_b A_a - d_a A_b`` by central differences of :func:`one_form`."""
    Q = np.asarray(Q, float)
    n = Q.size
    J = np.empty((n, n))  # J[a, b] = d_b A_a
    for b in range(n):
        e = np.zeros(n)
        e[b] = h
        J[:, b] = (one_form(system, Q + e) - one_form(system, Q - e)) / (2 * h)
    return J - J.T


def closedness_residual(system, Q, h: float = 1e-4) -> float:
    """``max |d_c Omega_ab + d_b Omega_ca + d_a Omega_bc|`` with ``Omega`` from its blocks."""
    Q = np.asarray(Q, float)
    n = Q.size
    D = np.empty((n, n, n))  # D[c, a, b] = d_c Omega_ab
    for c in range(n):
        e = np.zeros(n)
        e[c] = h
        D[c] = (omega(state_at(system, Q + e)) - omega(state_at(system, Q - e))) / (2 * h)
    cyc = D + np.transpose(D, (2, 0, 1)) + np.transpose(D, (1, 2, 0))
    return float(np.max(np.abs(cyc)))


# ----------------------------------------------------------- Poisson bracket
def _fd_gradient(fun: Callable, Q, h: float) -> np.ndarray:
    n = Q.size
    g = np.empty(n)
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        g[a] = (fun(Q + e) - fun(Q - e)) / (2 * h)
    return g


def poisson_bracket(state: ExtendedState, C: Callable, D: Callable, grad_C: Optional[Callable] = None,
                    grad_D: Optional[Callable] = None, h: float = 1e-6, inverse=None) -> float:
    """``{C, D} = Omega^{-1}_ab d_a C d_b D`` at ``state``.

    Observables are scalar callables of ``Q``; gradients default to central
    differences with step ``h``.
    """
    Q = state.Q
    gC = grad_C(Q) if grad_C is not None else _fd_gradient(C, Q, h)
    gD = grad_D(Q) if grad_D is not None else _fd_gradient(D, Q, h)
    Wi = omega_inverse(state) if inverse is None else inverse
    return float(gC @ Wi @ gD)


def hamiltonian_value(system, Q) -> float:
    return system.hamiltonian(np.asarray(Q, float))


def vector_field(system, Q) -> np.ndarray:
    """``Q' = Omega^{-1} dH``."""
    st = state_at(system, Q)
    return omega_inverse(st) @ system.hamiltonian_gradient(st.Q)


def extended_residual(system, Q, Qdot) -> np.ndarray:
    """Residual ``Omega Q' - dH`` of the extended Euler-Lagrange equations."""
    st = state_at(system, Q)
    return omega(st) @ np.asarray(Qdot, float) - system.hamiltonian_gradient(st.Q)


def lagrangian_elimination_residual(mf: ModelField, q, v, acc, h: float = 1e-5) -> np.ndarray:
    """Extended equations evaluated on Lagrangian data ``(q, q', q'', q''')``.

    ``pi`` is set to the higher-derivative momentum and ``pi'`` is its total
    derivative along the third-order flow. A vanishing residual means that
    eliminating ``(v, pi)`` from the extended equations gives back the
    third-order Euler-Lagrange equations.
    """
    from .dynamics import jerk_order3, momentum

    system = ModelSystem(mf)
    q = np.asarray(q, float)
    v = np.asarray(v, float)
    acc = np.asarray(acc, float)
    jerk = jerk_order3(mf, q, v, acc)

    def p_at(t):
        qt = q + t * v + 0.5 * t * t * acc + t ** 3 / 6 * jerk
        vt = v + t * acc + 0.5 * t * t * jerk
        at = acc + t * jerk
        return momentum(mf.derivatives(qt, order=3), mf, vt, at)

    pdot = (-p_at(2 * h) + 8 * p_at(h) - 8 * p_at(-h) + p_at(-2 * h)) / (12 * h)
    Q = np.concatenate([q, v, momentum(system.data(q), mf, v, acc)])
    return extended_residual(system, Q, np.concatenate([v, acc, pdot]))


# --------------------------------------------------------------- integration
@dataclass
class ExtendedTrajectory:
    s: np.ndarray
    Q: np.ndarray
    K: int
    H: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def q(self) -> np.ndarray:
        return self.Q[:, :self.K]

    @property
    def v(self) -> np.ndarray:
        return self.Q[:, self.K:2 * self.K]

    @property
    def pi(self) -> np.ndarray:
        return self.Q[:, 2 * self.K:]


def integrate_hamiltonian(system, Q0, s_span, s_eval=None, rtol: float = 1e-10, atol: float = 1e-12,
                          method: str = "Radau") -> ExtendedTrajectory:
    """Integrate ``Q' = Omega^{-1} dH`` and record ``H`` along the run.

    The flow inherits the stiff spurious mode of the third-order equations,
    hence the implicit default method. A singular ``Z`` during the run raises
    :class:`SingularMetricError` carrying the trajectory up to that point.
    """
    Q0 = np.asarray(Q0, float)
    K = system.K
    visited = []

    def rhs(s, Q):
        out = vector_field(system, Q)
        visited.append((s, Q.copy()))
        return out

    try:
        sol = solve_ivp(rhs, tuple(s_span), Q0, method=method, rtol=rtol, atol=atol, t_eval=s_eval)
    except SingularMetricError as exc:
        s_last = np.array([t for t, _ in visited])
        Q_last = np.array([x for _, x in visited])
        raise SingularMetricError(str(exc), partial=ExtendedTrajectory(s_last, Q_last, K, np.array([])))
    if not sol.success:
        raise IntegrationError(f"Hamiltonian integration failed: {sol.message}", partial=(sol.t, sol.y))
    Q = sol.y.T
    H = np.array([system.hamiltonian(x) for x in Q])
    return ExtendedTrajectory(s=sol.t, Q=Q, K=K, H=H,
                              meta={"method": method, "rtol": rtol, "atol": atol, "nfev": int(sol.nfev),
                                    "hamiltonian": "L3(q, v) - pi.v"})
