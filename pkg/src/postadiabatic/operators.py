"""Parametrized Hermitian operator fields and their gauge-fixed spectra.

The canonical representation is the linear pencil

    H(q) = H0 + sum_a q_a H_a,

for which the coordinate derivatives are exact. A caller-supplied evaluator
``q -> H(q)`` is accepted as well; its derivatives come from central finite
differences with the declared step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import AmbiguousAssociationError, DegeneracyError, ValidationError
from .numerics import RICHARDSON_OFFSETS, RICHARDSON_WEIGHTS

HERMITIAN_TOL = 1e-12
GAUGE_POLICIES = ("overlap-aligned", "real-forced", "raw")

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def _asymmetry(M: np.ndarray) -> float:
    return float(np.max(np.abs(M - np.conj(np.swapaxes(M, -1, -2))))) if M.size else 0.0


@dataclass(frozen=True)
class HamiltonianField:
    """Hermitian matrix field over K real coordinates.

    Parameters
    ----------
    H0 : (d, d) complex array
        Constant part.
    Hlin : (K, d, d) complex array
        Linear couplings; ``H(q) = H0 + q_a Hlin[a]``.
    evaluator : callable, optional
        Opaque map ``q -> (d, d)`` matrix replacing the pencil. When given,
        ``H0`` and ``Hlin`` only fix the dimensions.
    step : float
        Finite-difference step for evaluator derivatives.
    """

    H0: np.ndarray
    Hlin: np.ndarray
    evaluator: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)
    step: float = 1e-5

    def __post_init__(self):
        H0 = np.array(self.H0, dtype=complex)
        Hlin = np.array(self.Hlin, dtype=complex)
        if H0.ndim != 2 or H0.shape[0] != H0.shape[1] or H0.shape[0] < 2:
            raise ValidationError(f"H0 must be a square matrix of size >= 2, got shape {H0.shape}", "/H0")
        if Hlin.ndim != 3 or Hlin.shape[1:] != H0.shape or Hlin.shape[0] < 1:
            raise ValidationError(
                f"Hlin must have shape (K, {H0.shape[0]}, {H0.shape[0]}), got {Hlin.shape}", "/Hlin")
        if self.evaluator is None:
            a0 = _asymmetry(H0)
            if a0 > HERMITIAN_TOL:
                raise ValidationError(f"H0 is not Hermitian (max asymmetry {a0:.3e})", "/H0", asymmetry=a0)
            for i, Ha in enumerate(Hlin):
                a = _asymmetry(Ha)
                if a > HERMITIAN_TOL:
                    raise ValidationError(f"Hlin[{i}] is not Hermitian (max asymmetry {a:.3e})",
                                          f"/Hlin/{i}", asymmetry=a)
            # symmetrize away representation noise below the tolerance
            H0 = 0.5 * (H0 + H0.conj().T)
            Hlin = 0.5 * (Hlin + np.conj(np.swapaxes(Hlin, 1, 2)))
        object.__setattr__(self, "H0", H0)
        object.__setattr__(self, "Hlin", Hlin)

    @classmethod
    def from_callable(cls, fn: Callable[[np.ndarray], np.ndarray], d: int, K: int, step: float = 1e-5):
        """Wrap an opaque evaluator; derivatives use finite differences of size ``step``."""
        return cls(np.zeros((d, d)), np.zeros((K, d, d)), evaluator=fn, step=step)

    @property
    def d(self) -> int:
        return self.H0.shape[0]

    @property
    def K(self) -> int:
        return self.Hlin.shape[0]

    @property
    def is_pencil(self) -> bool:
        return self.evaluator is None

    @property
    def is_real(self) -> bool:
        """True when every matrix entry is real (enables the real-forced gauge)."""
        if self.is_pencil:
            return bool(np.all(self.H0.imag == 0) and np.all(self.Hlin.imag == 0))
        probe = np.array([self.evaluator(np.full(self.K, 0.37 + 0.11 * i)) for i in range(2)])
        return bool(np.all(np.abs(np.imag(probe)) == 0))

    def evaluate_batch(self, Q: np.ndarray) -> np.ndarray:
        """Matrices at many points: ``Q`` of shape ``(P, K)`` gives ``(P, d, d)``."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if self.is_pencil:
            return self.H0[None] + np.einsum("pa,aij->pij", Q, self.Hlin)
        out = np.empty((Q.shape[0], self.d, self.d), dtype=complex)
        for i, q in enumerate(Q):
            M = np.asarray(self.evaluator(q), dtype=complex)
            a = _asymmetry(M)
            if a > HERMITIAN_TOL * max(1.0, float(np.max(np.abs(M)))):
                raise ValidationError(f"evaluator returned a non-Hermitian matrix at q={q.tolist()} "
                                      f"(max asymmetry {a:.3e})", asymmetry=a)
            out[i] = 0.5 * (M + M.conj().T)
        return out

    def derivatives_batch(self, Q: np.ndarray) -> np.ndarray:
        """Coordinate derivatives ``dH/dq_a`` with shape ``(P, K, d, d)``."""
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if self.is_pencil:
            return np.broadcast_to(self.Hlin, (Q.shape[0],) + self.Hlin.shape)
        P, K = Q.shape
        offs = np.zeros((K, 4, K))
        for a in range(K):
            offs[a, :, a] = self.step * RICHARDSON_OFFSETS
        pts = (Q[:, None, None, :] + offs[None]).reshape(-1, K)
        vals = self.evaluate_batch(pts).reshape(P, K, 4, self.d, self.d)
        return np.einsum("j,pajkl->pakl", RICHARDSON_WEIGHTS, vals) / self.step


def evaluate(field: HamiltonianField, q) -> np.ndarray:
    """The Hermitian matrix ``H(q)``."""
    q = np.asarray(q, dtype=float)
    if q.shape != (field.K,):
        raise ValidationError(f"expected {field.K} coordinates, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValidationError("coordinates must be finite", q=q.tolist())
    return field.evaluate_batch(q[None])[0]


def fix_phases(V: np.ndarray) -> np.ndarray:
    """Deterministic phase: the largest-magnitude entry of each column becomes real positive.

    Ties within 1e-8 of the maximum go to the lowest row index so the choice
    does not flicker under round-off. Works on stacks ``(..., d, d)``.
    """
    mag = np.abs(V)
    mx = mag.max(axis=-2, keepdims=True)
    idx = np.argmax(mag >= mx - 1e-8 * np.maximum(mx, 1e-300), axis=-2)
    pivot = np.take_along_axis(V, idx[..., None, :], axis=-2)
    return V * (np.abs(pivot) / pivot)


def eigh_batch(field: HamiltonianField, Q: np.ndarray, real: bool | None = None):
    """Ascending eigenvalues and phase-fixed eigenvectors at many points.

    Returns ``E`` of shape ``(P, d)`` and ``V`` of shape ``(P, d, d)`` with
    eigenvectors as columns. For real fields the eigenvectors are returned
    with exactly zero imaginary parts.
    """
    Hs = field.evaluate_batch(Q)
    if real is None:
        real = field.is_pencil and field.is_real
    if real:
        E, V = np.linalg.eigh(Hs.real)
        V = fix_phases(V).astype(complex)
    else:
        E, V = np.linalg.eigh(Hs)
        V = fix_phases(V)
    return E, V


@dataclass(frozen=True)
class Spectrum:
    """Eigen-resolution of ``H(q)`` at a single point."""

    q: np.ndarray
    energies: np.ndarray
    vectors: np.ndarray
    gap_tol: float

    @property
    def d(self) -> int:
        return self.energies.size

    @property
    def gaps(self) -> np.ndarray:
        """Table ``Delta[k, l] = E_k - E_l``."""
        return self.energies[:, None] - self.energies[None, :]

    @property
    def min_gap(self) -> float:
        return float(np.min(np.diff(self.energies))) if self.d > 1 else np.inf

    def vector(self, k: int) -> np.ndarray:
        return self.vectors[:, k]


def default_gap_tol(H: np.ndarray) -> float:
    return 1e-8 * max(float(np.linalg.norm(H, 2)), 1e-300)


def _check_gaps(E: np.ndarray, q, gap_tol: float) -> None:
    gaps = np.diff(E)
    i = int(np.argmin(gaps))
    if gaps[i] <= gap_tol:
        raise DegeneracyError(
            f"levels {i} and {i + 1} are degenerate at q={np.asarray(q).tolist()} "
            f"(gap {gaps[i]:.3e} <= {gap_tol:.3e})", q=np.asarray(q).tolist(), pair=(i, i + 1),
            gap=float(gaps[i]))


def spectrum(field: HamiltonianField, q, gap_tol: float | None = None) -> Spectrum:
    """Eigenvalues (ascending) and phase-fixed eigenvectors of ``H(q)``.

    Raises
    ------
    DegeneracyError
        If the smallest adjacent gap does not exceed ``gap_tol``
        (default ``1e-8 * ||H||``).
    """
    q = np.asarray(q, dtype=float)
    H = evaluate(field, q)
    if gap_tol is None:
        gap_tol = default_gap_tol(H)
    if gap_tol <= 0:
        raise ValidationError("gap_tol must be positive")
    E, V = eigh_batch(field, q[None])
    _check_gaps(E[0], q, gap_tol)
    return Spectrum(q=q, energies=E[0], vectors=V[0], gap_tol=gap_tol)


@dataclass(frozen=True)
class GaugeFrame:
    """A spectrum together with the policy that fixed its eigenvector phases."""

    spectrum: Spectrum
    policy: str = "overlap-aligned"

    def __post_init__(self):
        if self.policy not in GAUGE_POLICIES:
            raise ValidationError(f"unknown gauge policy {self.policy!r}; expected one of {GAUGE_POLICIES}")

    @property
    def q(self):
        return self.spectrum.q

    @property
    def energies(self):
        return self.spectrum.energies

    @property
    def vectors(self):
        return self.spectrum.vectors


def gauge_frame(field: HamiltonianField, q, policy: str = "overlap-aligned",
                gap_tol: float | None = None) -> GaugeFrame:
    """Build a frame at ``q``; ``real-forced`` requires a real field."""
    sp = spectrum(field, q, gap_tol)
    if policy == "real-forced":
        if not field.is_real:
            raise ValidationError("real-forced gauge requires a real Hamiltonian field")
        sp = Spectrum(sp.q, sp.energies, sp.vectors.real.astype(complex), sp.gap_tol)
    return GaugeFrame(sp, policy)


def smooth_gauge(prev: GaugeFrame, raw: Spectrum, ambiguity_tol: float = 1e-6) -> GaugeFrame:
    """Re-phase (and if needed re-label) ``raw`` to follow ``prev`` continuously.

    Levels are associated by maximal overlap magnitude; each associated
    vector is multiplied by the unit phase making ``<k_prev|k_curr>`` real
    positive.
    """
    if prev.spectrum.d != raw.d:
        raise ValidationError("frames have different dimensions")
    O = np.abs(prev.vectors.conj().T @ raw.vectors)
    d = raw.d
    order = np.argmax(O, axis=1)
    for k in range(d):
        row = np.sort(O[k])[::-1]
        if d > 1 and row[0] - row[1] < ambiguity_tol:
            raise AmbiguousAssociationError(
                f"level {k} overlaps two new levels almost equally ({row[0]:.9f} vs {row[1]:.9f})",
                level=k)
    if len(set(order.tolist())) != d:
        raise AmbiguousAssociationError("level association is not one-to-one", order=order.tolist())
    V = raw.vectors[:, order].copy()
    E = raw.energies[order].copy()
    ov = np.einsum("ik,ik->k", prev.vectors.conj(), V)
    V = V * (np.abs(ov) / np.where(ov == 0, 1.0, ov))
    if prev.policy == "real-forced":
        V = V.real.astype(complex)
    return GaugeFrame(Spectrum(raw.q, E, V, raw.gap_tol), prev.policy)


def align_to(ref: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Multiply columns of ``V`` (stack allowed) so ``<ref_k|V_k>`` is real positive."""
    ov = np.sum(np.conj(ref) * V, axis=-2, keepdims=True)
    return V * (np.abs(ov) / np.where(ov == 0, 1.0, ov))


def _level_check(frame: GaugeFrame, n: int) -> None:
    if not 0 <= n < frame.spectrum.d:
        raise ValidationError(f"level {n} out of range for d={frame.spectrum.d}")
    _check_gaps(frame.energies, frame.q, frame.spectrum.gap_tol)


def eigvec_derivative(field: HamiltonianField, frame: GaugeFrame, n: int, mu: int,
                      diagonal: complex = 0.0) -> np.ndarray:
    """``d|n>/dq_mu`` from the sum over states plus ``diagonal * |n>``.

    The diagonal component ``<n|d_mu n>`` is fixed by the gauge; the default
    0 corresponds to parallel transport.
    """
    _level_check(frame, n)
    E, V = frame.energies, frame.vectors
    dH = field.derivatives_batch(frame.q[None])[0, mu]
    col = V.conj().T @ dH @ V[:, n]
    out = diagonal * V[:, n]
    for k in range(E.size):
        if k != n:
            out = out + V[:, k] * col[k] / (E[n] - E[k])
    return out


def hellmann_feynman_check(field: HamiltonianField, frame: GaugeFrame, n: int) -> np.ndarray:
    """``<n|dH/dq_mu|n>`` for every mu; equals the gradient of ``E_n``."""
    _level_check(frame, n)
    vn = frame.vectors[:, n]
    dH = field.derivatives_batch(frame.q[None])[0]
    return np.einsum("i,aij,j->a", vn.conj(), dH, vn).real


def standard_two_level_real() -> HamiltonianField:
    """``H = [[q2, q1], [q1, -q2]]``, the real two-level model."""
    return HamiltonianField(np.zeros((2, 2)), np.array([PAULI_X, PAULI_Z]))


def standard_two_level_complex() -> HamiltonianField:
    """``H = q1 sx + q2 sy + sz``, the complex model used for dynamics sweeps."""
    return HamiltonianField(PAULI_Z, np.array([PAULI_X, PAULI_Y]))


def one_coordinate_two_level() -> HamiltonianField:
    """``H = q sx + sz`` with a single coordinate."""
    return HamiltonianField(PAULI_Z, np.array([PAULI_X]))
