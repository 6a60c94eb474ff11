"""Riemannian analysis of the second-order effective motion.

The metric is ``g = m delta + eps^2 G`` (``m = eps^2 M``), so free motion
of the second-order Lagrangian is geodesic motion. Christoffel symbols and
curvature come from finite differences of the metric field; the two-level
closed forms serve as oracles.

Curvature convention::

    R^r_{s m n} = d_m Gamma^r_{n s} - d_n Gamma^r_{m s}
                  + Gamma^r_{m l} Gamma^l_{n s} - Gamma^r_{n l} Gamma^l_{m s},
    Ric_{s n} = R^m_{s m n},   R = g^{s n} Ric_{s n}.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegrationError, SingularMetricError, ValidationError
from .numerics import fd_step
from .tensors import ModelField, _nested_offsets

SINGULAR_DET = 1e-14


class MetricField:
    """A symmetric-matrix field ``q -> g(q)`` evaluated in batches.

    Parameters
    ----------
    batch : callable
        Maps an array of points ``(P, K)`` to metrics ``(P, K, K)``.
    K : int
    h_rel : float
        Relative finite-difference step for metric derivatives.
    scale : float
        Typical size of ``det g``; the singularity guard is relative to it.
    """

    def __init__(self, batch: Callable[[np.ndarray], np.ndarray], K: int, h_rel: float = 1e-3,
                 scale: float = 1.0):
        self.batch = batch
        self.K = K
        self.h_rel = h_rel
        self.scale = scale

    def __call__(self, q) -> np.ndarray:
        return self.batch(np.asarray(q, float)[None])[0]

    @classmethod
    def from_model(cls, mf: ModelField, h_rel: float = 1e-3) -> "MetricField":
        """``eps^2 (M delta + G)`` of a model field (``mf.kinetic_mass = eps^2 M``)."""
        eps2 = mf.epsilon ** 2
        m = mf.kinetic_mass
        K = mf.K

        def batch(Q):
            G = mf._evaluate(Q, with_f=False)["G"]
            return m * np.eye(K)[None] + eps2 * G

        return cls(batch, K, h_rel, scale=m ** K)

    @classmethod
    def constant(cls, g) -> "MetricField":
        g = np.asarray(g, float)
        return cls(lambda Q: np.broadcast_to(g, (np.atleast_2d(Q).shape[0],) + g.shape).copy(), g.shape[0])

    @classmethod
    def conformal(cls, phi: Callable[[np.ndarray], float], K: int = 2) -> "MetricField":
        """``g = phi(q) I``."""
        return cls(lambda Q: np.array([phi(q) * np.eye(K) for q in np.atleast_2d(Q)]), K)

    @classmethod
    def two_level(cls, M: float, eps: float, state: str = "ground") -> "MetricField":
        """Closed-form metric of the real two-level model."""
        sgn = _state_sign(state)

        def batch(Q):
            Q = np.atleast_2d(Q)
            r2 = np.sum(Q * Q, axis=1)
            r5 = r2 ** 2.5
            P = (r2[:, None, None] * np.eye(2)[None] - Q[:, :, None] * Q[:, None, :]) / (4 * r5[:, None, None])
            return eps ** 2 * (M * np.eye(2)[None] + sgn * P)

        return cls(batch, 2, scale=(eps ** 2 * M) ** 2)

    def derivatives(self, q, depth: int = 2):
        """``g``, ``dg[m, a, b]`` and (if ``depth >= 2``) ``ddg[l, m, a, b]``."""
        q = np.asarray(q, float)
        K = self.K
        h = fd_step(q, self.h_rel)
        o1, w1 = _nested_offsets(K, 1, h)
        pts = [q[None], (q + o1).reshape(-1, K)]
        if depth >= 2:
            o2, w2 = _nested_offsets(K, 2, h)
            pts.append((q + o2).reshape(-1, K))
        vals = self.batch(np.concatenate(pts))
        g = vals[0]
        n1 = 4 * K
        dg = np.einsum("ms,msab->mab", w1, vals[1:1 + n1].reshape(K, 4, K, K))
        ddg = None
        if depth >= 2:
            ddg = np.einsum("lms,lmsab->lmab", w2, vals[1 + n1:].reshape(K, K, 16, K, K))
        return g, dg, ddg


def _state_sign(state: str) -> int:
    if state not in ("ground", "excited"):
        raise ValidationError(f"state must be 'ground' or 'excited', got {state!r}")
    return 1 if state == "ground" else -1


def _inverse(g: np.ndarray, q) -> np.ndarray:
    det = np.linalg.det(g)
    if abs(det) < SINGULAR_DET:
        raise SingularMetricError(f"metric is singular at q={np.asarray(q).tolist()} (det {det:.3e})", det=det)
    return np.linalg.inv(g)


def metric(model) -> np.ndarray:
    """``eps^2 (M delta + G)`` from an :class:`EffectiveModel`."""
    return model.metric


def christoffel_from_derivatives(g, dg, q=None) -> np.ndarray:
    """``Gamma[a, m, n] = 1/2 g^{as} (d_m g_sn + d_n g_sm - d_s g_mn)``."""
    ginv = _inverse(g, q)
    low = 0.5 * (np.einsum("msn->smn", dg) + np.einsum("nsm->smn", dg) - dg)
    return np.einsum("as,smn->amn", ginv, low)


def christoffel(mfield: MetricField, q) -> np.ndarray:
    """Christoffel symbols of the second kind at ``q``."""
    g, dg, _ = mfield.derivatives(q, depth=1)
    return christoffel_from_derivatives(g, dg, q)


@dataclass
class MetricData:
    """Metric, connection and curvature at one point."""

    q: np.ndarray
    g: np.ndarray
    g_inv: np.ndarray
    gamma: Optional[np.ndarray]
    riemann: Optional[np.ndarray]
    scalar: float
    signature: tuple
    det: float
    trace: float
    extra: dict = field(default_factory=dict)


def signature(g: np.ndarray, tol: float = 0.0) -> tuple[int, int]:
    """Counts of positive and negative eigenvalues."""
    ev = np.linalg.eigvalsh(0.5 * (g + g.T))
    return int(np.sum(ev > tol)), int(np.sum(ev < -tol))


def curvature(mfield: MetricField, q) -> MetricData:
    """Covariant Riemann tensor ``R[r, s, m, n] = g_rl R^l_{s m n}`` and scalar curvature."""
    q = np.asarray(q, float)
    g, dg, ddg = mfield.derivatives(q, depth=2)
    ginv = _inverse(g, q)
    low = 0.5 * (np.einsum("msn->smn", dg) + np.einsum("nsm->smn", dg) - dg)
    Gam = np.einsum("as,smn->amn", ginv, low)
    dlow = 0.5 * (np.einsum("lmsn->lsmn", ddg) + np.einsum("lnsm->lsmn", ddg) - ddg)
    dginv = -np.einsum("ab,lbc,cd->lad", ginv, dg, ginv)
    dGam = np.einsum("las,smn->lamn", dginv, low) + np.einsum("as,lsmn->lamn", ginv, dlow)
    # R^r_{s m n}
    Rup = (np.einsum("mrns->rsmn", dGam) - np.einsum("nrms->rsmn", dGam)
           + np.einsum("rml,lns->rsmn", Gam, Gam) - np.einsum("rnl,lms->rsmn", Gam, Gam))
    R = np.einsum("rl,lsmn->rsmn", g, Rup)
    ric = np.einsum("msmn->sn", Rup)
    scal = float(np.einsum("sn,sn->", ginv, ric))
    return MetricData(q=q, g=g, g_inv=ginv, gamma=Gam, riemann=R, scalar=scal, signature=signature(g),
                      det=float(np.linalg.det(g)), trace=float(np.trace(g)))


def scalar_curvature_2d(data: MetricData) -> float:
    """``2 R_1212 / det g`` (K = 2)."""
    return 2 * data.riemann[0, 1, 0, 1] / data.det


def two_level_closed_forms(q, M: float, eps: float, state: str = "ground") -> MetricData:
    """Closed-form metric, determinant, trace and scalar curvature of the real two-level model."""
    q = np.asarray(q, float)
    rho = float(np.hypot(*q))
    if rho == 0:
        raise SingularMetricError("closed forms are singular at rho = 0 (level crossing)")
    sgn = _state_sign(state)
    g = MetricField.two_level(M, eps, state)(q)
    r3 = rho ** 3
    if sgn < 0 and abs(1 - 4 * M * r3) < 1e-12:
        raise SingularMetricError(f"excited-state metric is singular at 4 M rho^3 = 1 (rho={rho})")
    det = eps ** 4 * M * (M + sgn / (4 * r3))
    tr = eps ** 2 * (2 * M + sgn / (4 * r3))
    if sgn > 0:
        R = -3 * (1 + 16 * M * r3) / (2 * eps ** 2 * M * rho ** 2 * (1 + 4 * M * r3) ** 2)
    else:
        R = 3 * (16 * M * r3 - 1) / (2 * eps ** 2 * M * rho ** 2 * (1 - 4 * M * r3) ** 2)
    return MetricData(q=q, g=g, g_inv=np.linalg.inv(g) if det != 0 else np.full((2, 2), np.nan), gamma=None,
                      riemann=None, scalar=R, signature=signature(g), det=det, trace=tr)


def signature_change_radius(M: float) -> float:
    """``rho*`` with ``4 M rho*^3 = 1``."""
    return (1.0 / (4.0 * M)) ** (1.0 / 3.0)


def find_signature_change(mfield: MetricField, direction, r_lo: float, r_hi: float, tol: float = 1e-9,
                          max_iter: int = 200) -> float:
    """Bisection for a sign change of ``det g`` along the ray ``r * direction``."""
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    f = lambda r: np.linalg.det(mfield(r * d))  # noqa: E731
    flo, fhi = f(r_lo), f(r_hi)
    if np.sign(flo) == np.sign(fhi):
        raise ValidationError("det g has the same sign at both ends of the bracket")
    lo, hi = r_lo, r_hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


@dataclass
class GeodesicTrajectory:
    s: np.ndarray
    q: np.ndarray
    u: np.ndarray
    norm: np.ndarray
    v: Optional[np.ndarray] = None
    vdot: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)


def _singular_event(mfield: MetricField, guard: float, K: int):
    def ev(s, y):
        return abs(np.linalg.det(mfield(y[:K]))) - guard

    ev.terminal = True
    return ev


def geodesic_integrate(mfield: MetricField, q0, u0, s_span, rtol: float = 1e-9, atol: float = 1e-12,
                       s_eval=None, guard: float | None = None) -> GeodesicTrajectory:
    """Integrate ``q'' + Gamma q' q' = 0`` and monitor ``g(u, u)``.

    Integration halts when ``|det g|`` drops below ``guard`` (default
    ``1e-10 * scale``); the partial trajectory is attached to the raised
    :class:`SingularMetricError`.
    """
    K = mfield.K
    q0 = np.asarray(q0, float)
    u0 = np.asarray(u0, float)
    guard = 1e-10 * mfield.scale if guard is None else guard

    def rhs(s, y):
        q, u = y[:K], y[K:]
        Gam = christoffel(mfield, q)
        return np.concatenate([u, -np.einsum("amn,m,n->a", Gam, u, u)])

    ev = _singular_event(mfield, guard, K)
    sol = solve_ivp(rhs, tuple(s_span), np.concatenate([q0, u0]), method="DOP853", rtol=rtol, atol=atol,
                    events=ev, dense_output=True)
    last = sol.y[:K, -1]
    if s_eval is None:
        t, y = sol.t, sol.y
    else:
        s_eval = np.asarray(s_eval, float)
        lo, hi = min(s_span[0], sol.t[-1]), max(s_span[0], sol.t[-1])
        t = s_eval[(s_eval >= lo) & (s_eval <= hi)]
        y = sol.sol(t) if len(t) else np.zeros((2 * K, 0))
    q, u = y[:K].T, y[K:].T
    gs = mfield.batch(q) if len(t) else np.zeros((0, K, K))
    norm = np.einsum("pab,pa,pb->p", gs, u, u)
    tr = GeodesicTrajectory(s=t, q=q, u=u, norm=norm, meta={"rtol": rtol, "atol": atol, "s_end": float(sol.t[-1])})
    if not sol.success:
        # The step size usually collapses a little before the guard event fires,
        # because u diverges as det g -> 0; classify that case as a crossing.
        if sol.status == -1 and abs(np.linalg.det(mfield(last))) < 1e-6 * mfield.scale:
            raise SingularMetricError(f"metric became singular near s={sol.t[-1]:.6g}", partial=tr)
        raise IntegrationError(f"geodesic integration failed: {sol.message}", partial=(sol.t, sol.y))
    if sol.status == 1:
        raise SingularMetricError(f"metric became singular at s={sol.t_events[0][0]:.6g}", partial=tr)
    return tr


def jacobi_operator(data: MetricData, u, v) -> np.ndarray:
    """``-R^a_{b c d} u^b v^c u^d`` (covariant acceleration of the deviation)."""
    Rup = np.einsum("ar,rbcd->abcd", data.g_inv, data.riemann)
    return -np.einsum("abcd,b,c,d->a", Rup, u, v, u)


def jacobi_operator_scalar(data: MetricData, u, v) -> np.ndarray:
    """Two-dimensional form ``-(R/2) (v (u.u) - u (u.v))``."""
    g = data.g
    return -0.5 * data.scalar * (v * (u @ g @ u) - u * (u @ g @ v))


def jacobi_deviation(mfield: MetricField, q0, u0, v0, vdot0, s_span, rtol: float = 1e-10, atol: float = 1e-12,
                     s_eval=None) -> GeodesicTrajectory:
    """Geodesic together with its linearized deviation ``v`` (coordinate components).

    The deviation obeys the linearized geodesic equation
    ``v'' = -2 Gamma^a_{bc} u^b v'^c - d_d Gamma^a_{bc} v^d u^b u^c``,
    which is the coordinate form of the Jacobi equation.
    """
    K = mfield.K

    def rhs(s, y):
        q, u, v, vd = y[:K], y[K:2 * K], y[2 * K:3 * K], y[3 * K:]
        g, dg, ddg = mfield.derivatives(q, depth=2)
        ginv = _inverse(g, q)
        low = 0.5 * (np.einsum("msn->smn", dg) + np.einsum("nsm->smn", dg) - dg)
        Gam = np.einsum("as,smn->amn", ginv, low)
        dlow = 0.5 * (np.einsum("lmsn->lsmn", ddg) + np.einsum("lnsm->lsmn", ddg) - ddg)
        dginv = -np.einsum("ab,lbc,cd->lad", ginv, dg, ginv)
        dGam = np.einsum("las,smn->lamn", dginv, low) + np.einsum("as,lsmn->lamn", ginv, dlow)
        acc = -np.einsum("amn,m,n->a", Gam, u, u)
        vacc = -2 * np.einsum("abc,b,c->a", Gam, u, vd) - np.einsum("dabc,d,b,c->a", dGam, v, u, u)
        return np.concatenate([u, acc, vd, vacc])

    y0 = np.concatenate([np.asarray(x, float) for x in (q0, u0, v0, vdot0)])
    sol = solve_ivp(rhs, tuple(s_span), y0, method="DOP853", rtol=rtol, atol=atol, t_eval=s_eval)
    if not sol.success:
        raise IntegrationError(f"deviation integration failed: {sol.message}", partial=(sol.t, sol.y))
    q, u = sol.y[:K].T, sol.y[K:2 * K].T
    gs = mfield.batch(q)
    return GeodesicTrajectory(s=sol.t, q=q, u=u, norm=np.einsum("pab,pa,pb->p", gs, u, u),
                              v=sol.y[2 * K:3 * K].T, vdot=sol.y[3 * K:].T)


def metric_grid(mfield: MetricField, points) -> list[MetricData]:
    """Curvature data at many points (used by the ``geometry`` command)."""
    return [curvature(mfield, q) for q in np.atleast_2d(points)]
