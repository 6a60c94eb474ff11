"""Effective-Lagrangian tensors and post-adiabatic forces.

Everything here is evaluated through one batched kernel: the points needed
by a request (the centre, first- and second-derivative stencils, and the
inner stencils used to differentiate the response vectors N) are stacked and
sent through a single batched Hermitian eigensolver.

Conventions
-----------
* ``c[a, k] = <k|d_a n>`` for ``k != n`` (zero for ``k == n``).
* ``N_a = sum'_k c[a, k] / (E_n - E_k) |k>``.
* Derivative arrays carry the differentiation index first:
  ``dG[g, a, b] = d_g G_ab``, ``ddz[d, g, a, b] = d_d d_g z_ab``.
* Slow-time Lagrangian (``kinetic_mass`` is the coefficient ``m`` of the
  slow-time kinetic term, ``m = eps**2 * M`` for a bare mass ``M``)::

    L = -V - E_n + eps A.v + 1/2 (m delta + eps^2 G) v v
        + eps^3 (f v v v - z_ab a_a v_b)
        + eps^4 (a v^4 + b acc v^2 + w v jerk)        (K = 1, real H)

  and the equation of motion is ``(d/ds d/dv - d2/ds2 d/dacc + ... - d/dq) L = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations
from typing import Callable, Optional

import numpy as np

from .errors import DegeneracyError, UnsupportedConfigurationError, ValidationError
from .numerics import RICHARDSON_OFFSETS, RICHARDSON_WEIGHTS, fd_step
from .operators import HamiltonianField, eigh_batch


@dataclass(frozen=True)
class Potential:
    """Polynomial bare potential ``V(q) = sum_j coef_j prod_a q_a**powers_j[a]``."""

    K: int
    terms: tuple = ()

    def __post_init__(self):
        clean = []
        for coef, powers in self.terms:
            powers = tuple(int(p) for p in powers)
            if len(powers) != self.K or min(powers, default=0) < 0:
                raise ValidationError(f"potential term powers {powers} do not match K={self.K}")
            clean.append((float(coef), powers))
        object.__setattr__(self, "terms", tuple(clean))

    @classmethod
    def harmonic(cls, K: int, k: float, center=None) -> "Potential":
        """``k/2 |q - center|^2`` expanded into monomials."""
        center = np.zeros(K) if center is None else np.asarray(center, float)
        terms = []
        for a in range(K):
            e = [0] * K
            e2 = list(e)
            e2[a] = 2
            terms.append((0.5 * k, e2))
            e1 = list(e)
            e1[a] = 1
            terms.append((-k * center[a], e1))
            terms.append((0.5 * k * center[a] ** 2, e))
        return cls(K, tuple(terms))

    def value(self, Q: np.ndarray) -> np.ndarray:
        Q = np.atleast_2d(Q)
        out = np.zeros(Q.shape[0])
        for c, p in self.terms:
            out += c * np.prod(Q ** np.array(p), axis=1)
        return out

    def gradient(self, Q: np.ndarray) -> np.ndarray:
        Q = np.atleast_2d(Q)
        out = np.zeros_like(Q)
        for c, p in self.terms:
            p = np.array(p)
            for a in range(self.K):
                if p[a] == 0:
                    continue
                pa = p.copy()
                pa[a] -= 1
                out[:, a] += c * p[a] * np.prod(Q ** pa, axis=1)
        return out

    def hessian(self, Q: np.ndarray) -> np.ndarray:
        Q = np.atleast_2d(Q)
        out = np.zeros((Q.shape[0], self.K, self.K))
        for c, p in self.terms:
            p = np.array(p)
            for a in range(self.K):
                for b in range(self.K):
                    pa = p.copy()
                    fa = pa[a]
                    pa[a] -= 1
                    fb = pa[b]
                    pa[b] -= 1
                    if fa == 0 or fb <= 0:
                        continue
                    out[:, a, b] += c * fa * fb * np.prod(Q ** pa, axis=1)
        return out

    def derivative_1d(self, x: float, order: int) -> float:
        """``d^order V / dq^order`` for K = 1."""
        out = 0.0
        for c, (p,) in self.terms:
            if p >= order:
                coef = 1.0
                for j in range(order):
                    coef *= p - j
                out += c * coef * x ** (p - order)
        return out


def symmetrize(t: np.ndarray) -> np.ndarray:
    """Average a rank-3 tensor over all six index permutations."""
    return sum(np.transpose(t, p) for p in permutations(range(3))) / 6.0


@dataclass
class EffectiveModel:
    """All effective-Lagrangian tensors at one point for one level.

    ``berry_curvature[m, a] = 2 Im <d_m n|d_a n>`` is the gauge-invariant
    kernel of the first-order force; ``A`` is the connection in the frame's
    deterministic gauge.
    """

    q: np.ndarray
    level: int
    epsilon: float
    kinetic_mass: float
    E_n: float
    dE: np.ndarray
    A: np.ndarray
    berry_curvature: np.ndarray
    G: np.ndarray
    f: np.ndarray
    f_sym: np.ndarray
    z: np.ndarray
    V: float
    dV: np.ndarray
    N: np.ndarray = field(repr=False, default=None)
    a: Optional[float] = None
    b: Optional[float] = None
    w: Optional[float] = None

    @property
    def K(self) -> int:
        return self.q.size

    @property
    def metric(self) -> np.ndarray:
        """``m delta + eps^2 G``; equals ``eps^2 (M delta + G)`` for bare mass ``M``."""
        return self.kinetic_mass * np.eye(self.K) + self.epsilon ** 2 * self.G


@dataclass
class DerivativeData:
    """Coordinate derivatives of the tensor fields at a point."""

    model: EffectiveModel
    dG: np.ndarray
    dz: Optional[np.ndarray] = None
    ddz: Optional[np.ndarray] = None
    dfs: Optional[np.ndarray] = None
    dA: Optional[np.ndarray] = None  # dA[g, b] = d_g A_b, in the frame's deterministic gauge


@dataclass
class FourthOrderData:
    """K = 1 coefficients and the derivatives entering the fourth-order equation."""

    q: float
    E: float
    dE: float
    G: tuple  # (G, G', G'')
    a: tuple  # (a, a')
    b: tuple  # (b, b', b'')
    w: tuple  # (w, w', w'', w''')


@lru_cache(maxsize=None)
def _unit_nested_offsets(K: int, depth: int):
    base_off = np.zeros((K, 4, K))
    for a in range(K):
        base_off[a, :, a] = RICHARDSON_OFFSETS
    offs = [(np.zeros(K), 1.0, ())]
    for _ in range(depth):
        new = []
        for o, wt, idx in offs:
            for a in range(K):
                for j in range(4):
                    new.append((o + base_off[a, j], wt * RICHARDSON_WEIGHTS[j], idx + (a,)))
        offs = new
    S = 4 ** depth
    off_arr = np.zeros((K,) * depth + (S, K))
    w_arr = np.zeros((K,) * depth + (S,))
    counters = {}
    for o, wt, idx in offs:
        c = counters.get(idx, 0)
        off_arr[idx + (c,)] = o
        w_arr[idx + (c,)] = wt
        counters[idx] = c + 1
    off_arr.setflags(write=False)
    w_arr.setflags(write=False)
    return off_arr, w_arr


def _nested_offsets(K: int, depth: int, h: float):
    """Offsets and weights for ``depth`` nested Richardson gradients.

    Returns ``offsets`` with shape ``(K,)*depth + (4**depth, K)`` and matching
    weights, so that summing ``weights * values`` over the stencil axis gives
    the ``depth``-th derivative tensor.
    """
    off, w = _unit_nested_offsets(K, depth)
    return off * h, w / h ** depth


class ModelField:
    """Evaluator of the effective tensors of one level of a Hamiltonian field.

    Parameters
    ----------
    field : HamiltonianField
    level : int
        Index of the adiabatic level (ascending order).
    epsilon : float
        Adiabaticity parameter.
    kinetic_mass : float
        Coefficient ``m`` of ``m/2 v^2`` in the slow-time Lagrangian.
    potential : Potential, optional
        Bare potential; zero if omitted.
    h_rel, h_outer_rel : float
        Relative finite-difference steps for differentiating the response
        vectors and for differentiating tensor fields.
    gauge : callable, optional
        ``q -> alpha`` extra phase ``exp(i alpha)`` applied to ``|n>``; only
        used to test gauge invariance.
    gap_tol : float
        Minimal admissible gap between the tracked level and the others.
    """

    def __init__(self, field: HamiltonianField, level: int, epsilon: float, kinetic_mass: float = 1.0,
                 potential: Potential | None = None, h_rel: float = 1e-4, h_outer_rel: float = 1e-3,
                 gauge: Callable[[np.ndarray], float] | None = None, gap_tol: float = 1e-8):
        if not 0 <= level < field.d:
            raise ValidationError(f"level {level} out of range for d={field.d}", "/level")
        if not epsilon > 0:
            raise ValidationError("epsilon must be positive", "/epsilon")
        self.field = field
        self.level = int(level)
        self.epsilon = float(epsilon)
        self.kinetic_mass = float(kinetic_mass)
        self.potential = potential if potential is not None else Potential(field.K)
        if self.potential.K != field.K:
            raise ValidationError(f"potential has K={self.potential.K}, field has K={field.K}", "/V")
        self.h_rel = h_rel
        self.h_outer_rel = h_outer_rel
        self.gauge = gauge
        self.gap_tol = gap_tol
        self.real = field.is_pencil and field.is_real

    @property
    def K(self) -> int:
        return self.field.K

    def with_epsilon(self, epsilon: float, kinetic_mass: float | None = None) -> "ModelField":
        return ModelField(self.field, self.level, epsilon,
                          self.kinetic_mass if kinetic_mass is None else kinetic_mass,
                          self.potential, self.h_rel, self.h_outer_rel, self.gauge, self.gap_tol)

    # ------------------------------------------------------------------ kernel
    def _core(self, Q: np.ndarray):
        """Batched eigen-data at points ``Q`` (P, K)."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        E, V = eigh_batch(self.field, Q, real=self.real)
        n = self.level
        D = E[:, n, None] - E
        mask = np.ones(E.shape[1], bool)
        mask[n] = False
        gaps = np.abs(D[:, mask])
        if gaps.size and gaps.min() <= self.gap_tol:
            p, j = np.unravel_index(np.argmin(gaps), gaps.shape)
            k = np.arange(E.shape[1])[mask][j]
            raise DegeneracyError(f"level {n} meets level {k} at q={Q[p].tolist()} (gap {gaps[p, j]:.3e})",
                                  q=Q[p].tolist(), pair=(n, int(k)), gap=float(gaps[p, j]))
        inv = np.where(mask[None, :], 1.0 / np.where(mask[None, :], D, 1.0), 0.0)
        if self.gauge is not None:
            ph = np.exp(1j * np.array([self.gauge(q) for q in Q]))
            V = V.copy()
            V[:, :, n] *= ph[:, None]
        dH = self.field.derivatives_batch(Q)
        vn = V[:, :, n]
        m = np.einsum("pik,paij,pj->pak", V.conj(), dH, vn, optimize=True)
        return E, V, m, inv

    @staticmethod
    def _basic_from_core(E, V, m, inv, n):
        c = m * inv[:, None, :]                      # <k|d_a n>
        Ncoef = c * inv[:, None, :]                  # eigenbasis coefficients of N_a
        Nvec = np.einsum("pik,pak->pai", V, Ncoef)
        gram = np.einsum("pak,pbk->pab", c.conj(), c)  # <d_a n|d_b n> restricted to k != n
        Om = 2.0 * gram.imag
        G = -2.0 * np.einsum("pak,pbk,pk->pab", c, c.conj(), inv).real
        G = 0.5 * (G + np.swapaxes(G, 1, 2))
        NN = np.einsum("pbk,pak->pab", Ncoef.conj(), Ncoef)  # <N_b|N_a> indexed [a, b]
        z = NN.imag
        z = 0.5 * (z - np.swapaxes(z, 1, 2))
        return dict(E=E[:, n], dE=m[:, :, n].real, c=c, Ncoef=Ncoef, N=Nvec, Om=Om, G=G, z=z,
                    NN=NN, vn=V[:, :, n])

    def _evaluate(self, Q: np.ndarray, with_f: bool, with_A: bool = False):
        """Tensors at every row of ``Q``; ``f`` (and ``A``) need inner stencils."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        P, K = Q.shape
        n = self.level
        need_inner = with_f or with_A
        if need_inner:
            h = fd_step(Q[0], self.h_rel)
            off, wts = _nested_offsets(self.K, 1, h)          # (K, 4, K), (K, 4)
            inner = (Q[:, None, None, :] + off[None]).reshape(-1, K)
            allQ = np.concatenate([Q, inner])
        else:
            allQ = Q
        E, V, m, inv = self._core(allQ)
        base = self._basic_from_core(E[:P], V[:P], m[:P], inv[:P], n)
        if not need_inner:
            return base
        Ei, Vi, mi, invi = E[P:], V[P:], m[P:], inv[P:]
        vn_c = base["vn"]                                     # (P, d)
        vn_i = Vi[:, :, n].reshape(P, K, 4, -1)
        # <n(q)|n(q')> for the inner stencil; derivative gives <n|d_g n>
        ov = np.einsum("pi,pgsi->pgs", vn_c.conj(), vn_i)
        if with_A:
            ndn = np.einsum("gs,pgs->pg", wts, ov)
            base["A"] = -ndn.imag
        if with_f:
            # align shifted frames to the centre (parallel transport), then
            # restore the caller gauge explicitly so the full formula is used
            ci = mi * invi[:, None, :]
            Ni = np.einsum("pik,pak->pai", Vi, ci * invi[:, None, :]).reshape(P, K, 4, K, -1)
            if self.gauge is None:
                phase = np.abs(ov) / np.where(ov == 0, 1, ov)
                Ni = Ni * phase[..., None, None]
                ov_al = np.abs(ov)
            else:
                ov_al = ov
            dN = np.einsum("gs,pgsbi->pgbi", wts, Ni)              # d_g N_b
            ndn = np.einsum("gs,pgs->pg", wts, ov_al)              # <n|d_g n>
            NN = base["NN"]                                        # [a, b] = <N_b|N_a>
            t1 = ndn[:, None, None, :] * NN[:, :, :, None]
            t2 = np.einsum("pgbi,pai->pabg", dN.conj(), base["N"])
            f = (t1 + t2).imag
            base["f"] = f
        return base

    # ----------------------------------------------------------- point access
    def model(self, q) -> EffectiveModel:
        """All tensors at ``q`` (fourth-order coefficients when K = 1 and H is real)."""
        q = np.asarray(q, dtype=float).reshape(self.K)
        b = self._evaluate(q[None], with_f=True, with_A=True)
        f = b["f"][0]
        A = b["A"][0]
        z = b["z"][0]
        if self.real:
            f = np.zeros_like(f)
            A = np.zeros_like(A)
            z = np.zeros_like(z)
        em = EffectiveModel(q=q, level=self.level, epsilon=self.epsilon, kinetic_mass=self.kinetic_mass,
                            E_n=float(b["E"][0]), dE=b["dE"][0], A=A, berry_curvature=b["Om"][0],
                            G=b["G"][0], f=f, f_sym=symmetrize(f), z=z,
                            V=float(self.potential.value(q[None])[0]), dV=self.potential.gradient(q[None])[0],
                            N=b["N"][0])
        if self.K == 1 and self.real:
            a, bb, w = self._fourth_order_coefficients(q[None])
            em.a, em.b, em.w = float(a[0]), float(bb[0]), float(w[0])
        return em

    def derivatives(self, q, order: int = 3) -> DerivativeData:
        """Tensor fields and the coordinate derivatives needed by the order-``order`` equations."""
        q = np.asarray(q, dtype=float).reshape(self.K)
        K = self.K
        H = fd_step(q, self.h_outer_rel)
        off1, w1 = _nested_offsets(K, 1, H)
        P1 = (q + off1).reshape(-1, K)
        third = order >= 3 and not self.real
        pts = [q[None], P1]
        if third:
            off2, w2 = _nested_offsets(K, 2, H)
            P2 = (q + off2).reshape(-1, K)
            pts.append(P2)
        Q = np.concatenate(pts)
        nf = 1 + P1.shape[0] if third else 0
        if third:
            b = self._evaluate(Q[:nf], with_f=True, with_A=True)
            rest = self._evaluate(Q[nf:], with_f=False)
            for key in ("G", "z"):
                b[key] = np.concatenate([b[key], rest[key]])
        else:
            b = self._evaluate(Q, with_f=False)
        z0 = np.zeros((K, K)) if self.real else b["z"][0]
        f0 = np.zeros((K, K, K))
        A0 = np.zeros(K)
        if third:
            f0 = b["f"][0]
            A0 = b["A"][0]
        em = EffectiveModel(q=q, level=self.level, epsilon=self.epsilon, kinetic_mass=self.kinetic_mass,
                            E_n=float(b["E"][0]), dE=b["dE"][0], A=A0, berry_curvature=b["Om"][0],
                            G=b["G"][0], f=f0, f_sym=symmetrize(f0), z=z0,
                            V=float(self.potential.value(q[None])[0]), dV=self.potential.gradient(q[None])[0],
                            N=None)
        s1 = slice(1, 1 + P1.shape[0])
        Gs = b["G"][s1].reshape((K, 4, K, K))
        dG = np.einsum("gs,gsab->gab", w1, Gs)
        dd = DerivativeData(model=em, dG=dG)
        if order >= 3:
            if third:
                zs = b["z"][s1].reshape((K, 4, K, K))
                dd.dz = np.einsum("gs,gsab->gab", w1, zs)
                fs = np.array([symmetrize(t) for t in b["f"][s1]]).reshape((K, 4, K, K, K))
                dd.dfs = np.einsum("gs,gsabc->gabc", w1, fs)
                zz = b["z"][1 + P1.shape[0]:].reshape((K, K, 16, K, K))
                dd.ddz = np.einsum("dgs,dgsab->dgab", w2, zz)
                dd.dA = np.einsum("gs,gsb->gb", w1, b["A"][s1].reshape((K, 4, K)))
            else:
                dd.dz = np.zeros((K, K, K))
                dd.dfs = np.zeros((K, K, K, K))
                dd.ddz = np.zeros((K, K, K, K))
                dd.dA = np.zeros((K, K))
        return dd

    # ---------------------------------------------------------- fourth order
    def _fourth_order_coefficients(self, Q: np.ndarray):
        """Batched ``(a, b, w)`` for K = 1 real fields."""
        if self.K != 1 or not self.real:
            raise UnsupportedConfigurationError("fourth-order coefficients require K = 1 and a real Hamiltonian")
        Q = np.atleast_2d(Q)
        P = Q.shape[0]
        n = self.level
        h = fd_step(Q[0], self.h_rel)
        off, wts = _nested_offsets(self.K, 1, h)
        inner = (Q[:, None, None, :] + off[None]).reshape(-1, 1)
        E, V, m, inv = self._core(np.concatenate([Q, inner]))
        c = m[:P, 0, :] * inv[:P]                         # <k|dn>
        w = -np.sum(np.abs(c) ** 2 * inv[:P] ** 3, axis=1)
        # d/dq (1/Delta_nk) = -(dE_n - dE_k)/Delta_nk^2 with Hellmann-Feynman slopes
        dHd = np.einsum("pik,pij,pjk->pk", V[:P].conj(), self.field.derivatives_batch(Q)[:, 0], V[:P]).real
        dinv = -(dHd[:, n, None] - dHd) * inv[:P] ** 2
        b = -np.sum(np.abs(c) ** 2 * inv[:P] ** 2 * dinv, axis=1)
        Ncoef = c * inv[:P]
        Nvec = np.einsum("pik,pk->pi", V[:P], Ncoef)
        Vi = V[P:]
        ci = m[P:, 0, :] * inv[P:]
        Ni = np.einsum("pik,pk->pi", Vi, ci * inv[P:]).reshape(P, 4, -1)
        ov = np.einsum("pi,psi->ps", V[:P, :, n].conj(), Vi[:, :, n].reshape(P, 4, -1))
        Ni = Ni * (np.abs(ov) / ov)[..., None]
        dN = np.einsum("s,psi->pi", wts[0], Ni)
        proj = np.einsum("pik,pi->pk", V[:P].conj(), dN)   # <k|dN>
        mask = np.ones(E.shape[1], bool)
        mask[n] = False
        a = np.sum((np.abs(proj) ** 2 * inv[:P])[:, mask], axis=1)
        NN = np.sum(np.abs(Ncoef) ** 2, axis=1)
        dnN = np.sum(c.conj() * Ncoef, axis=1).real       # <dn|N>
        a = a - NN * dnN
        return a, b, w

    def fourth_order_data(self, x: float) -> FourthOrderData:
        """Coefficients and derivatives up to the orders the K = 1 fourth-order equation uses."""
        if self.K != 1 or not self.real:
            raise UnsupportedConfigurationError("fourth order requires K = 1 and a real Hamiltonian")
        x = float(x)
        H = fd_step(np.array([x]), 10 * self.h_outer_rel)
        offs = []
        wts = []
        for depth in range(4):
            o, w = _nested_offsets(1, depth, H)
            offs.append(o.reshape(-1))
            wts.append(w.reshape(-1))
        pts = np.concatenate(offs) + x
        a, b, w = self._fourth_order_coefficients(pts[:, None])
        core = self._basic_from_core(*self._core(pts[:, None]), self.level)
        G = core["G"][:, 0, 0]
        sl = np.cumsum([0] + [o.size for o in offs])

        def der(arr, k):
            return float(np.dot(wts[k], arr[sl[k]:sl[k + 1]]))

        return FourthOrderData(q=x, E=float(core["E"][0]), dE=float(core["dE"][0, 0]),
                               G=(der(G, 0), der(G, 1), der(G, 2)), a=(der(a, 0), der(a, 1)),
                               b=(der(b, 0), der(b, 1), der(b, 2)),
                               w=(der(w, 0), der(w, 1), der(w, 2), der(w, 3)))

    # ----------------------------------------------------------- path helpers
    def response_vectors(self, q) -> np.ndarray:
        """``N_a`` as rows of a ``(K, d)`` array."""
        b = self._evaluate(np.asarray(q, float)[None], with_f=False)
        return b["N"][0]


# ---------------------------------------------------------------- functional API
def born_oppenheimer(mf: ModelField, q) -> float:
    """Adiabatic energy ``E_n(q)``."""
    return float(mf._evaluate(np.asarray(q, float)[None], with_f=False)["E"][0])


def berry_connection(mf: ModelField, q) -> np.ndarray:
    """``A_a = Im <d_a n|n>`` in the deterministic (or caller) gauge."""
    if mf.real:
        return np.zeros(mf.K)
    return mf._evaluate(np.asarray(q, float)[None], with_f=False, with_A=True)["A"][0]


def berry_curvature(mf: ModelField, q) -> np.ndarray:
    """Gauge-invariant ``2 Im <d_m n|d_a n>`` (the curl of ``-A``)."""
    return mf._evaluate(np.asarray(q, float)[None], with_f=False)["Om"][0]


def mass_tensor(mf: ModelField, q) -> np.ndarray:
    """Mass correction ``G_ab``."""
    return mf._evaluate(np.asarray(q, float)[None], with_f=False)["G"][0]


def z_tensor(mf: ModelField, q) -> np.ndarray:
    """Antisymmetric ``z_ab = Im <N_b|N_a>``."""
    if mf.real:
        return np.zeros((mf.K, mf.K))
    return mf._evaluate(np.asarray(q, float)[None], with_f=False)["z"][0]


def f_tensor(mf: ModelField, q) -> tuple[np.ndarray, np.ndarray]:
    """Raw third-order tensor ``f`` and its full symmetrization."""
    if mf.real:
        z = np.zeros((mf.K,) * 3)
        return z, z
    f = mf._evaluate(np.asarray(q, float)[None], with_f=True)["f"][0]
    return f, symmetrize(f)


def fourth_order_coeffs(mf: ModelField, q) -> tuple[float, float, float]:
    """``(a, b, w)`` of the fourth-order Lagrangian; K = 1 real fields only."""
    if mf.K != 1 or not mf.real:
        raise UnsupportedConfigurationError("fourth-order coefficients require K = 1 and a real Hamiltonian")
    a, b, w = mf._fourth_order_coefficients(np.asarray(q, float).reshape(1, 1))
    return float(a[0]), float(b[0]), float(w[0])


def force_order0(dd_or_model) -> np.ndarray:
    m = dd_or_model.model if isinstance(dd_or_model, DerivativeData) else dd_or_model
    return m.dE


def force_order1(model: EffectiveModel, v) -> np.ndarray:
    """Gyroscopic force ``2 v_a Im <d_m n|d_a n>``; orthogonal to ``v``."""
    return model.berry_curvature @ np.asarray(v, float)


def force_order2_el(dd: DerivativeData, v, acc) -> np.ndarray:
    """Second-order force from the Euler-Lagrange operator of ``eps^2/2 G v v``."""
    v = np.asarray(v, float)
    acc = np.asarray(acc, float)
    dG = dd.dG
    return (dd.model.G @ acc + np.einsum("gma,g,a->m", dG, v, v)
            - 0.5 * np.einsum("mab,a,b->m", dG, v, v))


def force_order3_rest(dd: DerivativeData, v, acc) -> np.ndarray:
    """Third-order force without the ``2 z q'''`` term."""
    fs, dz, ddz, dfs = dd.model.f_sym, dd.dz, dd.ddz, dd.dfs
    return (3 * np.einsum("gmab,g,a,b->m", dfs, v, v, v)
            + 6 * np.einsum("mab,a,b->m", fs, acc, v)
            + np.einsum("gma,g,a->m", dz, v, acc)
            + np.einsum("dgmb,d,g,b->m", ddz, v, v, v)
            + np.einsum("gmb,g,b->m", dz, acc, v)
            + 2 * np.einsum("gmb,g,b->m", dz, v, acc)
            - np.einsum("mabc,a,b,c->m", dfs, v, v, v)
            + np.einsum("mab,a,b->m", dz, acc, v))


def force_order3_el(dd: DerivativeData, v, acc, jerk) -> np.ndarray:
    """Third-order force: Euler-Lagrange operator (with the second-derivative term) of L3."""
    v, acc, jerk = (np.asarray(x, float) for x in (v, acc, jerk))
    return 2 * dd.model.z @ jerk + force_order3_rest(dd, v, acc)


def path_state(path, s: float, count: int = 4) -> list[np.ndarray]:
    """``[q, q', q'', q''']`` of a path object at ``s``."""
    return [np.asarray(path.derivative(s, k), float) for k in range(count)]


def force_order2(mf: ModelField, path, s: float, ds: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Second-order force along a prescribed path, returned as ``(direct, euler_lagrange)``.

    The direct value assembles the perturbative expression term by term
    (gradient of ``sum' |<k|n'>|^2 / Delta_kn``, the slow-time derivative of
    ``<d_m n|n_1>`` and the gradient of ``<n_1|n'>`` with ``n_1 = -i v_a N_a``)
    from sum-over-states matrix elements; the second value is the
    Euler-Lagrange force of the second-order Lagrangian.
    """
    q, v, acc = path_state(path, s, 3)
    dd = mf.derivatives(q, order=2)
    el = force_order2_el(dd, v, acc)

    def pieces(Q, vel):
        E, V, m, inv = mf._core(Q)
        c = m * inv[:, None, :]                            # <k|d_a n>
        kdot = np.einsum("a,pak->pk", vel, c)              # <k|n'>
        t_energy = np.sum(np.abs(kdot) ** 2 * (-inv), axis=1)     # sum' |<k|n'>|^2 / Delta_kn
        # <d_m n|N_a> = sum' conj(c_m) c_a / Delta_nk ; <n_1|n'> = i v_a <N_a|n'>
        dmN = np.einsum("pmk,pak,pk->pma", c.conj(), c, inv)
        n1_ndot = 1j * np.einsum("a,pak,pk,pk->p", vel, c.conj(), inv, kdot)
        return t_energy, dmN, n1_ndot

    h = fd_step(q, mf.h_outer_rel)
    off, wts = _nested_offsets(mf.K, 1, h)
    pts = (q + off).reshape(-1, mf.K)
    tE, _, n1nd = pieces(pts, v)
    grad_T = np.einsum("gs,gs->g", wts, tE.reshape(mf.K, 4))
    grad_X = np.einsum("gs,gs->g", wts, n1nd.reshape(mf.K, 4))
    # slow-time derivative of <d_m n|n_1> = -i v_a <d_m n|N_a>
    vals = []
    for o in RICHARDSON_OFFSETS:
        qs, vs = path.derivative(s + o * ds, 0), path.derivative(s + o * ds, 1)
        _, dmN, _ = pieces(np.asarray(qs, float)[None], np.asarray(vs, float))
        vals.append(-1j * dmN[0] @ np.asarray(vs, float))
    dY = sum(wt * val for wt, val in zip(RICHARDSON_WEIGHTS, vals)) / ds
    direct = grad_T + 2 * (dY.imag + grad_X.imag)
    return direct, el


def force_order3(mf: ModelField, path, s: float) -> np.ndarray:
    """Third-order force along a prescribed path (Euler-Lagrange of L3)."""
    q, v, acc, jerk = path_state(path, s, 4)
    dd = mf.derivatives(q, order=3)
    return force_order3_el(dd, v, acc, jerk)


def total_force(mf: ModelField, q, v, acc, jerk=None, order: int = 3) -> np.ndarray:
    """``F0 + eps F1 + eps^2 F2 (+ eps^3 F3)`` along a given kinematic state."""
    dd = mf.derivatives(q, order=max(order, 2))
    eps = mf.epsilon
    F = dd.model.dE.copy()
    if order >= 1:
        F = F + eps * force_order1(dd.model, v)
    if order >= 2:
        F = F + eps ** 2 * force_order2_el(dd, v, acc)
    if order >= 3:
        F = F + eps ** 3 * force_order3_el(dd, v, acc, jerk)
    return F
