"""Invariant checks run by the ``verify`` command.

Each check returns ``{"passed": bool, "value": float, "tol": float}``. The
set of checks depends on the scenario: closed-form geometry checks need a
``geometry.closed_form`` entry, symplectic checks need an even-K complex
field, the constraint check an odd-K complex field and the fourth-order
checks a one-coordinate real field.
"""

from __future__ import annotations

import numpy as np

from .errors import DegeneracyError, SingularMetricError
from .scenario import Scenario


def _check(value: float, tol: float) -> dict:
    value = float(value)
    return {"passed": bool(np.isfinite(value) and value < tol), "value": value, "tol": tol}


def _random_points(sc: Scenario, rng: np.random.Generator, count: int) -> np.ndarray:
    ini = sc.data.get("initial")
    centre = np.array(ini["q"]) if ini else np.zeros(sc.K)
    return centre + rng.normal(size=(count, sc.K))


def run_checks(sc: Scenario, seed: int = 0, epsilon: float | None = None, points: int = 50) -> dict:
    from .operators import eigh_batch
    from .tensors import force_order1

    rng = np.random.default_rng(seed)
    mf = sc.model_field(epsilon)
    checks: dict[str, dict] = {}

    Q = _random_points(sc, rng, points)
    E, V = eigh_batch(sc.field, Q)
    H = sc.field.evaluate_batch(Q)
    scale = np.linalg.norm(H, ord=2, axis=(1, 2))
    res = np.linalg.norm(H @ V - V * E[:, None, :], axis=1).max(axis=1) / np.maximum(scale, 1e-300)
    checks["eigen_residual"] = _check(res.max(), 1e-9)
    ortho = np.abs(np.einsum("pik,pil->pkl", V.conj(), V) - np.eye(sc.field.d)).max()
    checks["eigenvector_orthonormality"] = _check(ortho, 1e-10)

    sym_G = anti_z = sym_f = work = 0.0
    min_eig = np.inf
    hf = 0.0
    used = 0
    for q in Q[:min(points, 20)]:
        try:
            m = mf.model(q)
        except DegeneracyError:
            continue
        used += 1
        sym_G = max(sym_G, np.abs(m.G - m.G.T).max())
        anti_z = max(anti_z, np.abs(m.z + m.z.T).max())
        fs = m.f_sym
        sym_f = max(sym_f, np.abs(fs - np.transpose(fs, (1, 0, 2))).max(), np.abs(fs - np.transpose(fs, (0, 2, 1))).max())
        v = rng.normal(size=sc.K)
        work = max(work, abs(force_order1(m, v) @ v))
        min_eig = min(min_eig, np.linalg.eigvalsh(m.G).min())
        h = 1e-5
        fd = [(mf._evaluate(np.array([q + h * e]), False)["E"][0] - mf._evaluate(np.array([q - h * e]), False)["E"][0])
              / (2 * h) for e in np.eye(sc.K)]
        hf = max(hf, np.abs(np.array(fd) - m.dE).max())
    checks["G_symmetric"] = _check(sym_G, 1e-14)
    checks["z_antisymmetric"] = _check(anti_z, 1e-14)
    checks["f_sym_permutation_symmetric"] = _check(sym_f, 1e-14)
    checks["lorentz_force_does_no_work"] = _check(work, 1e-12)
    checks["hellmann_feynman"] = _check(hf, 1e-7)
    if sc.data["level"] == 0 and used:
        checks["ground_G_positive_semidefinite"] = _check(-min_eig, 1e-12)

    geo = sc.data.get("geometry", {})
    if geo.get("closed_form") and sc.K == 2:
        checks.update(_geometry_checks(sc, mf.epsilon))

    if not mf.real and sc.K % 2 == 0 and "initial" in sc.data:
        checks.update(_symplectic_checks(sc, mf, rng))
    if not mf.real and sc.K % 2 == 1 and "initial" in sc.data:
        from .dynamics import consistent_acceleration, odd_k_constraint, slow_manifold_acceleration

        q0, v0 = np.array(sc.data["initial"]["q"]), np.array(sc.data["initial"]["v"])
        a0, _ = slow_manifold_acceleration(mf, q0, v0)
        a0 = consistent_acceleration(mf, q0, v0, a0)
        r, _ = odd_k_constraint(mf, q0, v0, a0)
        checks["odd_k_initial_constraint"] = _check(abs(r), 1e-10)
    if mf.real and sc.K == 1:
        x = np.array(sc.data["initial"]["q"]) if "initial" in sc.data else np.zeros(1)
        m = mf.model(x)
        checks["fourth_order_coefficients_finite"] = _check(0.0 if np.isfinite([m.a, m.b, m.w]).all() else np.inf, 1)
    return checks


def _geometry_checks(sc: Scenario, eps: float) -> dict:
    from .cli import geometry_rows, _metric_field
    from .geometry import find_signature_change, geodesic_integrate, signature_change_radius

    out = {}
    rows = np.array(geometry_rows(sc, eps), float)
    err = rows[:, 9]
    finite = np.isfinite(err)
    out["closed_form_curvature"] = _check(err[finite].max() if finite.any() else np.inf, 1e-5)
    out["closed_form_curvature"]["points"] = int(finite.sum())
    state = sc.data["geometry"]["closed_form"]
    if state == "excited":
        M = sc.data["mass"]
        r_star = signature_change_radius(M)
        r = find_signature_change(_metric_field(sc, M, eps), [1.0, 0.3], 0.5 * r_star, 2 * r_star, tol=1e-10)
        out["signature_change_radius"] = _check(abs(r - r_star), 1e-6)
    else:
        R = rows[:, 5]
        out["ground_curvature_negative"] = _check(0.0 if np.all(R[np.isfinite(R)] < 0) else 1.0, 0.5)
    gd = sc.data["geometry"].get("geodesic")
    if gd is not None:
        try:
            tr = geodesic_integrate(_metric_field(sc, sc.data["mass"], eps), gd["q0"], gd["u0"], gd["s_span"])
            out["geodesic_norm_drift"] = _check(np.max(np.abs(tr.norm - tr.norm[0])) / abs(tr.norm[0]), 1e-8)
        except SingularMetricError:
            out["geodesic_norm_drift"] = {"passed": False, "value": None, "tol": 1e-8,
                                          "note": "metric became singular along the geodesic"}
    return out


def _symplectic_checks(sc: Scenario, mf, rng) -> dict:
    from .symplectic import build_extended, closedness_residual, omega, omega_inverse, state_at

    q0, v0 = np.array(sc.data["initial"]["q"]), np.array(sc.data["initial"]["v"])
    system, st = build_extended(mf, q0, v0)
    inv_err = clo = 0.0
    for _ in range(5):
        Q = st.Q + 0.1 * rng.normal(size=st.Q.size)
        s = state_at(system, Q)
        inv_err = max(inv_err, np.abs(omega(s) @ omega_inverse(s) - np.eye(Q.size)).max())
        clo = max(clo, closedness_residual(system, Q))
    return {"omega_inverse": _check(inv_err, 1e-10), "omega_closed": _check(clo, 1e-8)}
