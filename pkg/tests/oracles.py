"""Independent reference implementations used by the tests.

Nothing here imports the package: every oracle is coded from the defining
formulas (sympy for symbolic derivatives, plain numpy otherwise) so the
tests compare two separate implementations.
"""

from __future__ import annotations

import numpy as np


# ----------------------------------------------------------------- two-level closed forms
def two_level_metric(q, M, eps, state="ground"):
    """Closed-form metric of H = [[q2, q1], [q1, -q2]]: eps^2 (M + s G)."""
    q1, q2 = q
    r5 = (q1 * q1 + q2 * q2) ** 2.5
    s = 1.0 if state == "ground" else -1.0
    G = np.array([[q2 * q2, -q1 * q2], [-q1 * q2, q1 * q1]]) / (4 * r5)
    return eps ** 2 * (M * np.eye(2) + s * G)


def two_level_scalar_curvature(rho, M, eps, state="ground"):
    """Scalar curvature of the two-level metric as a function of rho."""
    x = M * rho ** 3
    if state == "ground":
        return -3 * (1 + 16 * x) / (2 * eps ** 2 * M * rho ** 2 * (1 + 4 * x) ** 2)
    return 3 * (16 * x - 1) / (2 * eps ** 2 * M * rho ** 2 * (4 * x - 1) ** 2)


# ------------------------------------------------------------------- sympy tensor oracle
def sympy_two_level_tensors(hx, hy, hz, qsyms, point, level):
    """E, Berry curvature, G, z and f of a 2x2 field ``H = h . sigma`` from explicit eigenvectors.

    ``hx, hy, hz`` are sympy expressions in ``qsyms``. The eigenvectors are
    written in closed form in a gauge that is smooth near ``point`` and all
    derivatives are symbolic.
    """
    import sympy as sp

    h = sp.sqrt(hx ** 2 + hy ** 2 + hz ** 2)
    # spin-1/2 eigenvectors along h (smooth away from h = -|h| z_hat)
    up = sp.Matrix([h + hz, hx + sp.I * hy]) / sp.sqrt(2 * h * (h + hz))
    dn = sp.Matrix([-(hx - sp.I * hy), h + hz]) / sp.sqrt(2 * h * (h + hz))
    vecs = [dn, up]
    energies = [-h, h]
    n = vecs[level]
    k = vecs[1 - level]
    D = energies[level] - energies[1 - level]          # Delta_nk
    subs = dict(zip(qsyms, point))
    K = len(qsyms)

    def ip(a, b):
        return (a.H * b)[0, 0]

    dn_ = [sp.diff(n, x) for x in qsyms]
    N = [k * ip(k, dn_[a]) / D for a in range(K)]

    def ev(expr):
        return complex(sp.N(expr.subs(subs), 30))

    E = ev(energies[level]).real
    Om = np.array([[2 * ev(ip(dn_[m], dn_[a])).imag for a in range(K)] for m in range(K)])
    G = np.array([[2 * ev(ip(dn_[a], k) * ip(k, dn_[b]) / (-D)).real for b in range(K)] for a in range(K)])
    z = np.array([[ev(ip(N[b], N[a])).imag for b in range(K)] for a in range(K)])
    f = np.zeros((K, K, K))
    for a in range(K):
        for b in range(K):
            for c in range(K):
                expr = ip(n, dn_[c]) * ip(N[b], N[a]) + ip(sp.diff(N[b], qsyms[c]), N[a])
                f[a, b, c] = ev(expr).imag
    return {"E": E, "Om": Om, "G": G, "z": z, "f": f}


def complex_standard_oracle(point, level):
    """Tensors of H = q1 sx + q2 sy + sz at ``point``."""
    import sympy as sp

    q1, q2 = sp.symbols("q1 q2", real=True)
    return sympy_two_level_tensors(q1, q2, sp.Integer(1), (q1, q2), [sp.nsimplify(x) for x in point], level)


# ------------------------------------------------------------ exact-evolution force oracle
def exact_force_residuals(field_matrix, dfield, path_q, level, epsilons, s_end, rtol=1e-12, atol=1e-14):
    """``<psi|dH|psi>(s_end)`` for each epsilon, psi started in |n(q(0))>.

    ``field_matrix(q)`` returns H, ``dfield(q)`` the stack dH/dq_a and
    ``path_q(s)`` the coordinates. Evolution follows ``i eps psi' = H psi``.
    """
    from scipy.integrate import solve_ivp

    E0, V0 = np.linalg.eigh(field_matrix(path_q(0.0)))
    out = []
    for eps in epsilons:
        sol = solve_ivp(lambda s, y: -1j / eps * (field_matrix(path_q(s)) @ y), (0.0, s_end),
                        V0[:, level].astype(complex), method="DOP853", rtol=rtol, atol=atol)
        psi = sol.y[:, -1]
        dH = dfield(path_q(s_end))
        out.append(np.array([np.vdot(psi, Ha @ psi).real for Ha in dH]))
    return np.array(out)


def eps3_amplitude(epsilons, residuals):
    """Least-squares fit ``R / eps^3 = A + B eps`` per component; returns ``A``."""
    e = np.asarray(epsilons, float)
    X = np.column_stack([np.ones_like(e), e])
    Y = np.asarray(residuals) / e[:, None] ** 3
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return coef[0]
