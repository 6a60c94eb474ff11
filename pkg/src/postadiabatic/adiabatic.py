"""Adiabatic perturbation series along a prescribed slow path.

The state is written as

    Psi(s) = exp(-(i/eps) int E_n) exp(i gamma_n) sum_k c_k(s) |k(s)>,
    c_k = sum_m eps^m c_k^[m],

and the coefficients follow from the recursion

    Delta_nk c_k^[m] = -i (c_k^[m-1]' + sum_l W_kl c_l^[m-1] - W_nn c_k^[m-1]),  k != n
    c_n^[m]' = -sum'_l W_nl c_l^[m],

with ``W_kl = <k|l'>``. Off-diagonal ``W`` comes from sum-over-states
matrix elements (exact for the given path velocity); the diagonal entries
are the finite-difference connection of the stored, overlap-aligned frames.
Derivatives of coefficient tables use second-order central differences on
the grid and integrals use the composite trapezoid rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, solve_ivp
from scipy.interpolate import make_interp_spline

from .errors import DegeneracyError, IntegrationError, NumericalError, ValidationError
from .numerics import grid_derivative
from .operators import HamiltonianField, align_to, eigh_batch

MAX_ORDER = 4


class SlowPath:
    """A slow path ``q(s)`` with derivatives up to fourth order.

    Parameters
    ----------
    fun : callable
        ``fun(s, k)`` returns the ``k``-th derivative of ``q`` at ``s``.
    s : array
        Uniform, strictly increasing slow-time grid.
    epsilon : float
        Adiabaticity parameter attached to the path.
    """

    def __init__(self, fun: Callable[[float, int], np.ndarray], s, epsilon: float = 0.1):
        s = np.asarray(s, dtype=float)
        if s.ndim != 1 or s.size < 3:
            raise ValidationError("path grid needs at least three points")
        ds = np.diff(s)
        if np.any(ds <= 0):
            raise ValidationError("path grid must be strictly increasing")
        if np.max(np.abs(ds - ds[0])) > 1e-9 * max(1.0, abs(ds[0])):
            raise ValidationError("path grid must be uniform")
        if not 0 < epsilon < 1:
            raise ValidationError("epsilon must lie in (0, 1)")
        self._fun = fun
        self.s = s
        self.epsilon = float(epsilon)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])

    def derivative(self, s: float, k: int = 0) -> np.ndarray:
        return np.atleast_1d(np.asarray(self._fun(float(s), k), dtype=float))

    def samples(self, k: int = 0) -> np.ndarray:
        """``k``-th derivative sampled on the grid, shape ``(N, K)``."""
        return np.array([self.derivative(x, k) for x in self.s])

    def consistency_error(self) -> float:
        """Largest mismatch between sampled derivatives and grid differences of ``q``."""
        q = self.samples(0)
        err = 0.0
        for k in (1, 2):
            num = grid_derivative(q if k == 1 else self.samples(1), self.ds)
            err = max(err, float(np.max(np.abs(num - self.samples(k))[1:-1])))
        return err

    @classmethod
    def circle(cls, s, radius: float = 1.0, omega: float = 1.0, phase: float = 0.0, center=(0.0, 0.0),
               epsilon: float = 0.1) -> "SlowPath":
        """``q = center + radius (sin(omega s + phase), cos(omega s + phase))``."""
        c = np.asarray(center, float)

        def fun(x, k):
            th = omega * x + phase
            # d^k/ds^k sin = omega^k sin(th + k pi/2)
            return (c if k == 0 else 0.0) + radius * omega ** k * np.array(
                [np.sin(th + k * np.pi / 2), np.cos(th + k * np.pi / 2)])

        return cls(fun, s, epsilon)

    @classmethod
    def static(cls, q0, s, epsilon: float = 0.1) -> "SlowPath":
        q0 = np.asarray(q0, float)
        return cls(lambda x, k: q0 if k == 0 else np.zeros_like(q0), s, epsilon)

    @classmethod
    def polynomial(cls, coeffs, s, epsilon: float = 0.1) -> "SlowPath":
        """``q(s) = sum_j coeffs[j] s^j / j!`` (Taylor form)."""
        C = np.atleast_2d(np.asarray(coeffs, float))
        from math import factorial

        def fun(x, k):
            out = np.zeros(C.shape[1])
            for j in range(k, C.shape[0]):
                out += C[j] * x ** (j - k) / factorial(j - k)
            return out

        return cls(fun, s, epsilon)

    @classmethod
    def from_samples(cls, s, q, epsilon: float = 0.1) -> "SlowPath":
        """Quintic interpolating spline through sampled coordinates."""
        s = np.asarray(s, float)
        spl = make_interp_spline(s, np.asarray(q, float), k=5)
        return cls(lambda x, k: spl(x, nu=k), s, epsilon)


@dataclass
class FrameSeries:
    """Overlap-aligned eigenframes on a path grid with the connection ``W_kl = <k|l'>``."""

    s: np.ndarray
    energies: np.ndarray       # (N, d)
    vectors: np.ndarray        # (N, d, d)
    W: np.ndarray              # (N, d, d)
    velocities: np.ndarray     # (N, K)
    policy: str = "overlap-aligned"

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])


def frame_series(field: HamiltonianField, path: SlowPath, policy: str = "overlap-aligned",
                 gap_tol: float = 1e-8) -> FrameSeries:
    """Eigenframes along ``path`` with consecutive frames phase-aligned."""
    Q = path.samples(0)
    Vel = path.samples(1)
    real = policy == "real-forced"
    if real and not field.is_real:
        raise ValidationError("real-forced gauge requires a real Hamiltonian field")
    E, V = eigh_batch(field, Q, real=field.is_pencil and field.is_real)
    gaps = np.diff(E, axis=1)
    if gaps.min() <= gap_tol:
        i, k = np.unravel_index(np.argmin(gaps), gaps.shape)
        raise DegeneracyError(f"levels {k} and {k + 1} are degenerate at s={path.s[i]:.6g}",
                              q=Q[i].tolist(), pair=(int(k), int(k + 1)), gap=float(gaps[i, k]))
    if policy != "raw":
        for i in range(1, len(Q)):
            V[i] = align_to(V[i - 1], V[i])
    if real:
        V = V.real.astype(complex)
    dH = field.derivatives_batch(Q)
    # off-diagonal: <k|l'> = v_a <k|H_a|l> / (E_l - E_k)
    M = np.einsum("pik,paij,pjl->pakl", V.conj(), dH, V, optimize=True)
    Mv = np.einsum("pa,pakl->pkl", Vel, M)
    dE = E[:, None, :] - E[:, :, None]            # E_l - E_k
    d = E.shape[1]
    off = ~np.eye(d, dtype=bool)
    W = np.zeros_like(Mv)
    W[:, off] = Mv[:, off] / dE[:, off]
    # diagonal: connection of the stored frames
    dV = grid_derivative(V, path.ds)
    diag = np.einsum("pik,pik->pk", V.conj(), dV)
    W[:, ~off] = 1j * diag.imag
    return FrameSeries(path.s.copy(), E, V, W, Vel, policy)


@dataclass
class AdiabaticCoefficients:
    """Coefficient tables ``c[j][i, k] = c_k^[j](s_i)`` for the level ``level``."""

    level: int
    s: np.ndarray
    tables: list
    frames: FrameSeries
    berry_phase: np.ndarray
    dynamical_phase: np.ndarray
    anchor: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def order(self) -> int:
        return len(self.tables) - 1

    def state_vector(self, j: int, i: int) -> np.ndarray:
        """``|n_j>`` at grid index ``i`` in the original basis."""
        return self.frames.vectors[i] @ self.tables[j][i]

    def norm_residual(self, eps: float, order: int | None = None) -> np.ndarray:
        """``sum_k |c_k|^2 - 1`` of the truncated series along the grid."""
        m = self.order if order is None else order
        c = sum(eps ** j * self.tables[j] for j in range(m + 1))
        return np.sum(np.abs(c) ** 2, axis=1) - 1.0


def _check_level(frames: FrameSeries, n: int) -> None:
    if not 0 <= n < frames.energies.shape[1]:
        raise ValidationError(f"level {n} out of range")


def c1_offdiagonal(field: HamiltonianField, path: SlowPath, n: int, s: float) -> np.ndarray:
    """``c_k^[1] = -i <k|n'> / Delta_nk`` for all ``k != n`` (entry ``n`` omitted)."""
    q = path.derivative(s, 0)
    v = path.derivative(s, 1)
    E, V = eigh_batch(field, q[None])
    E, V = E[0], V[0]
    d = E.size
    if not 0 <= n < d:
        raise ValidationError(f"level {n} out of range")
    dH = field.derivatives_batch(q[None])[0]
    col = np.einsum("ik,aij,j->ak", V.conj(), dH, V[:, n])
    out = []
    for k in range(d):
        if k == n:
            continue
        gap = E[n] - E[k]
        if abs(gap) <= 1e-8:
            raise DegeneracyError(f"levels {n} and {k} degenerate at s={s}", q=q.tolist(), pair=(n, k))
        kdot = v @ col[:, k] / gap
        out.append(-1j * kdot / gap)
    return np.array(out)


def cm_recursion(frames: FrameSeries, n: int, m: int, anchor: int = 0,
                 min_points_per_order: int = 5) -> AdiabaticCoefficients:
    """Coefficient tables up to order ``m``.

    Integration constants are fixed at the grid point ``anchor``:
    ``Im c_n^[j] = 0`` and ``Re c_n^[j] = -1/2 sum_{i=1}^{j-1} <n_i|n_{j-i}>``,
    which keeps the truncated series normalized order by order.
    """
    _check_level(frames, n)
    if m < 0 or m > 8:
        raise ValidationError("order must be between 0 and 8")
    N, d = frames.energies.shape
    if N < min_points_per_order * (m + 1):
        raise NumericalError(f"grid too coarse for order {m}: need at least {min_points_per_order * (m + 1)} points",
                             required=min_points_per_order * (m + 1))
    ds = frames.ds
    W = frames.W
    D = frames.energies[:, n, None] - frames.energies     # Delta_nk
    mask = np.ones(d, bool)
    mask[n] = False
    c0 = np.zeros((N, d), complex)
    c0[:, n] = 1.0
    tables = [c0]
    for j in range(1, m + 1):
        prev = tables[-1]
        dprev = grid_derivative(prev, ds)
        kn = dprev + np.einsum("pkl,pl->pk", W, prev)
        c = np.zeros((N, d), complex)
        c[:, mask] = (-1j * (kn[:, mask] - W[:, n, n, None] * prev[:, mask])) / D[:, mask]
        rate = -np.einsum("pl,pl->p", W[:, n, mask], c[:, mask])
        cum = cumulative_trapezoid(rate, dx=ds, initial=0.0)
        cum = cum - cum[anchor]
        const = 0.0
        for i in range(1, j):
            const += np.vdot(tables[i][anchor], tables[j - i][anchor])
        c[:, n] = cum - 0.5 * const.real
        tables.append(c)
    wnn = W[:, n, n]
    berry = cumulative_trapezoid((1j * wnn).real, dx=ds, initial=0.0)
    dyn = cumulative_trapezoid(frames.energies[:, n], dx=ds, initial=0.0)
    return AdiabaticCoefficients(level=n, s=frames.s, tables=tables, frames=frames,
                                 berry_phase=berry - berry[anchor], dynamical_phase=dyn - dyn[anchor],
                                 anchor=anchor, diagnostics={"endpoint_one_sided": True})


def c1_diagonal(frames: FrameSeries, n: int) -> np.ndarray:
    """``c_n^[1](s)`` on the grid (purely imaginary, zero at the first point)."""
    return cm_recursion(frames, n, 1).tables[1][:, n]


def c2_offdiagonal(frames: FrameSeries, n: int) -> np.ndarray:
    """``c_k^[2](s)`` for ``k != n`` on the grid, shape ``(N, d-1)``."""
    t = cm_recursion(frames, n, 2).tables[2]
    return np.delete(t, n, axis=1)


def normalization_identities(coeffs: AdiabaticCoefficients) -> dict:
    """Order-by-order normalization residuals (max over the grid).

    ``first``: ``|Re c_n^[1]|``; ``second``: ``|2 Re c_n^[2] + <n_1|n_1>|``.
    """
    out = {}
    if coeffs.order >= 1:
        out["first"] = float(np.max(np.abs(coeffs.tables[1][:, coeffs.level].real)))
    if coeffs.order >= 2:
        n1n1 = np.sum(np.abs(coeffs.tables[1]) ** 2, axis=1)
        out["second"] = float(np.max(np.abs(2 * coeffs.tables[2][:, coeffs.level].real + n1n1)))
    return out


def n_vectors(field: HamiltonianField, q, n: int, gap_tol: float = 1e-8) -> np.ndarray:
    """Response vectors ``N_a = sum'_k <k|d_a n>/Delta_nk |k>`` as rows ``(K, d)``."""
    q = np.asarray(q, float)
    E, V = eigh_batch(field, q[None])
    E, V = E[0], V[0]
    if not 0 <= n < E.size:
        raise ValidationError(f"level {n} out of range")
    dH = field.derivatives_batch(q[None])[0]
    out = np.zeros((field.K, E.size), complex)
    for k in range(E.size):
        if k == n:
            continue
        gap = E[n] - E[k]
        if abs(gap) <= gap_tol:
            raise DegeneracyError(f"levels {n} and {k} are degenerate", q=q.tolist(), pair=(n, k))
        elem = np.einsum("i,aij,j->a", V[:, k].conj(), dH, V[:, n])
        out += np.outer(elem / gap ** 2, V[:, k])
    return out


def reconstruct_wavefunction(coeffs: AdiabaticCoefficients, eps: float, order: int, i: int) -> np.ndarray:
    """Truncated series state at grid index ``i`` including dynamical and Berry phases."""
    if order > coeffs.order:
        raise ValidationError(f"coefficients only available to order {coeffs.order}")
    c = sum(eps ** j * coeffs.tables[j][i] for j in range(order + 1))
    phase = np.exp(-1j * coeffs.dynamical_phase[i] / eps + 1j * coeffs.berry_phase[i])
    return phase * (coeffs.frames.vectors[i] @ c)


def superadiabatic_state(field: HamiltonianField, n: int, q0, derivs, eps: float, order: int = 3,
                         half_width: float = 0.1, points: int = 41) -> np.ndarray:
    """Normalized ``sum_{m<=order} eps^m |n_m>`` at the start of a motion.

    The motion near ``s = 0`` is replaced by its Taylor polynomial
    ``q0 + sum_j derivs[j-1] s^j / j!`` on a symmetric grid so the series
    can be evaluated at the centre with central differences.
    """
    coeffs = np.vstack([np.asarray(q0, float)] + [np.asarray(x, float) for x in derivs])
    s = np.linspace(-half_width, half_width, points)
    path = SlowPath.polynomial(coeffs, s, epsilon=min(eps, 0.99))
    fr = frame_series(field, path)
    mid = points // 2
    cf = cm_recursion(fr, n, order, anchor=mid)
    c = sum(eps ** j * cf.tables[j][mid] for j in range(order + 1))
    psi = fr.vectors[mid] @ c
    return psi / np.linalg.norm(psi)


def evolve_along_path(field: HamiltonianField, path: SlowPath, psi0, eps: float, s_eval,
                      rtol: float = 1e-12, atol: float = 1e-14) -> np.ndarray:
    """Exact solution of ``i eps psi' = H(q(s)) psi`` sampled at ``s_eval``.

    Integration starts at ``s_eval[0]``; returns an array ``(len(s_eval), d)``.
    """
    psi0 = np.asarray(psi0, complex)
    s_eval = np.asarray(s_eval, float)

    def rhs(s, psi):
        H = field.evaluate_batch(path.derivative(s, 0)[None])[0]
        return -1j / eps * (H @ psi)

    sol = solve_ivp(rhs, (s_eval[0], s_eval[-1]), psi0, method="DOP853", rtol=rtol, atol=atol, t_eval=s_eval)
    if not sol.success:
        raise IntegrationError(f"Schrödinger integration failed: {sol.message}", partial=(sol.t, sol.y))
    return sol.y.T


def path_force(field: HamiltonianField, path: SlowPath, s_values, psi) -> np.ndarray:
    """Mean generalized force ``<psi|d_a H|psi>`` at the given path points, shape ``(N, K)``."""
    Q = np.array([path.derivative(x, 0) for x in np.atleast_1d(s_values)])
    dH = field.derivatives_batch(Q)
    psi = np.atleast_2d(psi)
    return np.einsum("pi,paij,pj->pa", psi.conj(), dH, psi).real


UNDEFINED_ANGLE = float("nan")


def action_angle_map(psi, basis) -> tuple[np.ndarray, np.ndarray]:
    """Actions ``I_n = |<g_n|psi>|^2`` and angles ``arg <g_n|psi>``.

    Angles of components with ``I_n < 1e-14`` are reported as NaN.
    """
    psi = np.asarray(psi, complex)
    nrm = np.linalg.norm(psi)
    if abs(nrm - 1) > 1e-9:
        raise ValidationError(f"state must be normalized (norm {nrm:.12f})")
    amp = np.asarray(basis, complex).conj().T @ psi
    I = np.abs(amp) ** 2
    phi = np.where(I < 1e-14, UNDEFINED_ANGLE, np.angle(amp))
    return I, phi


def action_angle_rhs(I, phi, kappa) -> tuple[np.ndarray, np.ndarray]:
    """Hamilton equations ``I' = dH/dphi``, ``phi' = -dH/dI`` for ``H = sum kappa_nm G_n* G_m``."""
    I = np.asarray(I, float)
    phi = np.asarray(phi, float)
    g = np.sqrt(I) * np.exp(1j * phi)
    kg = kappa @ g
    Idot = 2 * np.imag(np.conj(g) * kg)
    # dH/dI_n = Re(conj(g_n) (kappa g)_n) / I_n
    with np.errstate(divide="ignore", invalid="ignore"):
        phidot = -np.real(np.conj(g) * kg) / I
    return Idot, phidot
