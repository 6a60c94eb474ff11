"""Command-line front end.

Usage::

    postadiabatic <command> --scenario <file-or-bundled-name> [--out DIR] [--order O0..O4]
                  [--epsilon E[,E...]] [--seed N] [--tol RTOL]

Commands: spectrum, tensors, geometry, simulate, hamiltonian, sweep, verify.
Every command writes its data files plus ``manifest_<command>.json`` into the
output directory. Exit codes: 0 ok, 2 invalid input, 3 numerical failure
(including failed checks in ``verify``), 4 unsupported configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .errors import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, PostAdiabaticError, SingularMetricError, ValidationError
from .scenario import RunManifest, Scenario, load_scenario, matrix_to_json, write_csv, write_json

log = logging.getLogger("postadiabatic")

COMMANDS = ("spectrum", "tensors", "geometry", "simulate", "hamiltonian", "sweep", "verify")


def _parse_epsilons(text: str | None):
    if text is None:
        return None
    try:
        vals = [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise ValidationError(f"--epsilon expects a comma-separated list of numbers, got {text!r}") from exc
    if not vals or any(not 0 < v < 1 for v in vals):
        raise ValidationError("--epsilon values must lie in (0, 1)")
    return vals


def _initial(sc: Scenario):
    ini = sc.data.get("initial")
    if ini is None:
        raise ValidationError("this command needs initial data", "/initial")
    return np.array(ini["q"]), np.array(ini["v"])


def _sample_points(sc: Scenario) -> np.ndarray:
    path = sc.data.get("path")
    if path is None:
        return _initial(sc)[0][None]
    if path["kind"] == "circle":
        s = np.linspace(0.0, path["s_end"], path["points"])
        th = path["omega"] * s + path["phase"]
        return np.array(path["center"]) + path["radius"] * np.stack([np.sin(th), np.cos(th)], axis=1)
    return np.array(path["q"])


# -------------------------------------------------------------------- commands
def cmd_spectrum(sc: Scenario, args, man: RunManifest) -> None:
    from .operators import spectrum

    pts = []
    for q in _sample_points(sc):
        sp = spectrum(sc.field, q, sc.tolerances["gap_tol"])
        pts.append({"q": q, "energies": sp.energies, "min_gap": sp.min_gap, "vectors": matrix_to_json(sp.vectors)})
    man.artifacts.append(write_json(os.path.join(args.out, "spectrum.json"), {"points": pts}, man.scenario_hash))


def cmd_tensors(sc: Scenario, args, man: RunManifest) -> None:
    mf = sc.model_field(args.eps[0] if args.eps else None)
    out = []
    for q in _sample_points(sc):
        m = mf.model(q)
        out.append({"q": q, "E_n": m.E_n, "A": m.A, "G": m.G, "f_sym": m.f_sym, "z": m.z,
                    "a": m.a, "b": m.b, "w": m.w})
    man.settings["epsilon"] = mf.epsilon
    man.artifacts.append(write_json(os.path.join(args.out, "tensors.json"), {"points": out}, man.scenario_hash))


def _metric_field(sc: Scenario, M: float, eps: float):
    from .geometry import MetricField

    kin = eps ** 2 * M if sc.data["mass_convention"] == "physical" else M
    return MetricField.from_model(sc.model_field(eps).with_epsilon(eps, kin))


def geometry_rows(sc: Scenario, eps: float):
    """Rows ``(M, q1, q2, det, tr, R, n_pos, n_neg, R_closed, rel_err)`` over the configured grid."""
    from .geometry import curvature, two_level_closed_forms

    geo = sc.data.get("geometry", {})
    grid = geo.get("grid", {"rho": [0.3, 0.5, 1.0, 2.0, 5.0], "M": [sc.data["mass"]], "angle": 0.7})
    closed = geo.get("closed_form")
    rows = []
    for M in grid["M"]:
        mfield = _metric_field(sc, M, eps)
        for rho in grid["rho"]:
            q = rho * np.array([np.cos(grid["angle"]), np.sin(grid["angle"])])
            try:
                d = curvature(mfield, q)
                R, det, tr, sig = d.scalar, d.det, d.trace, d.signature
            except SingularMetricError:
                g = mfield(q)
                R, det, tr, sig = np.nan, float(np.linalg.det(g)), float(np.trace(g)), (np.nan, np.nan)
            Rc = err = np.nan
            if closed is not None:
                try:
                    cf = two_level_closed_forms(q, M, eps, closed)
                    Rc = cf.scalar
                    scale = max(abs(Rc), 1.0 / (eps ** 2 * M * rho ** 2))
                    err = abs(R - Rc) / scale
                except SingularMetricError:
                    pass
            rows.append([M, q[0], q[1], det, tr, R, sig[0], sig[1], Rc, err])
    return rows


def _drift_check(values, tol: float) -> dict:
    values = np.asarray(values, float)
    drift = float(np.max(np.abs(values - values[0])) / max(abs(values[0]), 1e-300))
    return {"passed": bool(drift < tol), "value": drift, "tol": tol}


def cmd_geometry(sc: Scenario, args, man: RunManifest) -> None:
    from .geometry import geodesic_integrate, jacobi_deviation

    if sc.K != 2:
        raise ValidationError(f"geometry output is defined for K=2, got K={sc.K}", "/hamiltonian/K")
    eps = args.eps[0] if args.eps else sc.epsilon
    rows = geometry_rows(sc, eps)
    man.artifacts.append(write_csv(os.path.join(args.out, "geometry_grid.csv"),
                                   ["M", "q1", "q2", "det_g", "tr_g", "R", "n_pos", "n_neg", "R_closed",
                                    "rel_err"], rows, man.scenario_hash))
    geo = sc.data.get("geometry", {})
    if "geodesic" in geo:
        gd = geo["geodesic"]
        mfield = _metric_field(sc, sc.data["mass"], eps)
        s_eval = np.linspace(*gd["s_span"], sc.data["samples"])
        try:
            tr = geodesic_integrate(mfield, gd["q0"], gd["u0"], gd["s_span"], rtol=args.rtol or 1e-9,
                                    s_eval=s_eval)
        except SingularMetricError as exc:
            # Keep the partial geodesic on disk and report the crossing as a failed check.
            tr = exc.partial
            man.artifacts.append(write_csv(os.path.join(args.out, "geodesic.csv"),
                                           ["s", "q1", "q2", "u1", "u2", "norm"],
                                           np.column_stack([tr.s, tr.q, tr.u, tr.norm]), man.scenario_hash))
            man.checks["geodesic_nonsingular"] = {"passed": False, "s_end": tr.meta["s_end"], "note": str(exc)}
            return
        man.artifacts.append(write_csv(os.path.join(args.out, "geodesic.csv"),
                                       ["s", "q1", "q2", "u1", "u2", "norm"],
                                       np.column_stack([tr.s, tr.q, tr.u, tr.norm]), man.scenario_hash))
        man.checks["geodesic_norm_drift"] = _drift_check(tr.norm, 1e-8)
        if "deviation" in geo:
            dv = geo["deviation"]
            jd = jacobi_deviation(mfield, gd["q0"], gd["u0"], dv["v0"], dv["vdot0"], gd["s_span"], s_eval=s_eval)
            man.artifacts.append(write_csv(os.path.join(args.out, "deviation.csv"),
                                           ["s", "q1", "q2", "u1", "u2", "v1", "v2", "vdot1", "vdot2"],
                                           np.column_stack([jd.s, jd.q, jd.u, jd.v, jd.vdot]), man.scenario_hash))


def cmd_simulate(sc: Scenario, args, man: RunManifest) -> None:
    from .dynamics import integrate_effective

    order = args.order or sc.data["order"]
    mf = sc.model_field(args.eps[0] if args.eps else None)
    q0, v0 = _initial(sc)
    ini = {"q": q0, "v": v0}
    for k in ("a", "j"):
        if k in sc.data["initial"]:
            ini[k] = np.array(sc.data["initial"][k])
    s_eval = np.linspace(*sc.data["s_span"], sc.data["samples"])
    rtol = args.rtol or sc.tolerances["rtol"]
    tr = integrate_effective(mf, order, ini, sc.data["s_span"], s_eval=s_eval, rtol=rtol,
                             atol=sc.tolerances["atol"], constraint_tol=sc.tolerances["constraint_tol"])
    K = sc.K
    cols = [tr.s[:, None], tr.q, tr.v]
    header = ["s"] + [f"q{a}" for a in range(K)] + [f"v{a}" for a in range(K)]
    if tr.a is not None:
        cols.append(tr.a)
        header += [f"a{a}" for a in range(K)]
    for key in ("energy", "constraint_residual"):
        if key in tr.diagnostics:
            cols.append(tr.diagnostics[key][:, None])
            header.append(key)
    man.artifacts.append(write_csv(os.path.join(args.out, "trajectory.csv"), header, np.hstack(cols),
                                   man.scenario_hash))
    E = tr.diagnostics["energy"]
    man.settings.update({"order": tr.meta["order"], "epsilon": mf.epsilon, "rtol": rtol,
                         "method": tr.meta.get("method")})
    man.checks["energy_drift"] = _drift_check(E, 1e-7)
    if "constraint_residual" in tr.diagnostics:
        r = float(np.max(np.abs(tr.diagnostics["constraint_residual"])))
        man.checks["constraint_residual"] = {"passed": bool(r < 1e-7), "value": r, "tol": 1e-7}


def _observable(name: str, K: int):
    kind = name.rstrip("0123456789")
    idx = int(name[len(kind):])
    offset = {"q": 0, "v": K, "pi": 2 * K}[kind] + idx
    e = np.zeros(3 * K)
    e[offset] = 1.0
    return (lambda Q: Q[offset]), (lambda Q: e)


def cmd_hamiltonian(sc: Scenario, args, man: RunManifest) -> None:
    from .symplectic import build_extended, integrate_hamiltonian, omega_inverse, poisson_bracket

    mf = sc.model_field(args.eps[0] if args.eps else None)
    q0, v0 = _initial(sc)
    acc = sc.data["initial"].get("a")
    system, st = build_extended(mf, q0, v0, None if acc is None else np.array(acc))
    s_eval = np.linspace(*sc.data["s_span"], sc.data["samples"])
    rtol = args.rtol or sc.tolerances["rtol"]
    tr = integrate_hamiltonian(system, st.Q, sc.data["s_span"], s_eval=s_eval, rtol=rtol,
                               atol=sc.tolerances["atol"])
    K = sc.K
    header = (["s"] + [f"q{a}" for a in range(K)] + [f"v{a}" for a in range(K)] + [f"pi{a}" for a in range(K)]
              + ["H"])
    man.artifacts.append(write_csv(os.path.join(args.out, "extended_trajectory.csv"), header,
                                   np.column_stack([tr.s, tr.Q, tr.H]), man.scenario_hash))
    Wi = omega_inverse(st)
    table = []
    for a, b in sc.data["brackets"]:
        fa, ga = _observable(a, K)
        fb, gb = _observable(b, K)
        table.append({"pair": [a, b], "value": poisson_bracket(st, fa, fb, ga, gb, inverse=Wi)})
    man.artifacts.append(write_json(os.path.join(args.out, "brackets.json"),
                                    {"state": st.Q, "brackets": table}, man.scenario_hash))
    man.settings.update({"epsilon": mf.epsilon, "rtol": rtol, "hamiltonian": tr.meta["hamiltonian"]})
    man.checks["hamiltonian_drift"] = _drift_check(tr.H, 1e-7)


def cmd_sweep(sc: Scenario, args, man: RunManifest) -> None:
    from .dynamics import convergence_sweep

    sw = sc.data["sweep"]
    eps = args.eps or sw["epsilons"]
    orders = [args.order] if args.order else sw["orders"]
    from .dynamics import parse_order
    orders = [parse_order(o) for o in orders]
    q0, v0 = _initial(sc)
    mf = sc.model_field(eps[0])
    rep = convergence_sweep(mf, q0, v0, eps, orders=orders, s_start=sw["s_start"], duration=sw["duration"],
                            samples=sw["samples"],
                            mass_scaling="slow" if sc.data["mass_convention"] == "slow" else "physical",
                            workers=os.cpu_count() or 1)
    payload = {"epsilons": eps,
               "max_errors": {f"O{o}": rep.max_errors[o] for o in orders},
               "fitted_slope": {f"O{o}": rep.slopes[o] for o in orders},
               "intercept": {f"O{o}": rep.intercepts[o] for o in orders},
               "s_start": sw["s_start"], "duration": sw["duration"]}
    man.artifacts.append(write_json(os.path.join(args.out, "sweep.json"), payload, man.scenario_hash))
    for o in orders:
        man.checks[f"slope_O{o}"] = {"value": rep.slopes[o], "expected": o + 1,
                                     "passed": abs(rep.slopes[o] - (o + 1)) <= 0.5}


def cmd_verify(sc: Scenario, args, man: RunManifest) -> None:
    from .verify import run_checks

    checks = run_checks(sc, seed=args.seed, epsilon=args.eps[0] if args.eps else None)
    man.checks.update(checks)
    man.artifacts.append(write_json(os.path.join(args.out, "verify.json"), {"checks": checks}, man.scenario_hash))
    for name, c in checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {name}: {c.get('value')!r} (tol {c.get('tol')!r})")


HANDLERS = {"spectrum": cmd_spectrum, "tensors": cmd_tensors, "geometry": cmd_geometry,
            "simulate": cmd_simulate, "hamiltonian": cmd_hamiltonian, "sweep": cmd_sweep, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="postadiabatic", description="Post-adiabatic effective dynamics toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", required=True, help="scenario JSON file or bundled scenario name")
    p.add_argument("--out", default=None, help="output directory (default: scenario 'output')")
    p.add_argument("--order", default=None, help="truncation order O0..O4 (overrides the scenario)")
    p.add_argument("--epsilon", default=None, help="comma-separated epsilon values")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
    p.add_argument("--tol", type=float, default=None, help="relative integrator tolerance")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        sc = load_scenario(args.scenario)
        args.eps = _parse_epsilons(args.epsilon)
        args.rtol = args.tol
        if args.order is not None:
            from .dynamics import parse_order
            args.order = f"O{parse_order(args.order)}"
        args.out = args.out or sc.data["output"]
        os.makedirs(args.out, exist_ok=True)
        man = RunManifest(command=args.command, scenario_hash=sc.hash, scenario=sc.data,
                          settings={"order": args.order or sc.data["order"], "epsilon": args.eps or sc.epsilons,
                                    "seed": args.seed, "tol": args.tol, "s_i": 0.5,
                                    "tolerances": sc.tolerances})
        t0 = time.perf_counter()
        HANDLERS[args.command](sc, args, man)
        man.wall_clock_s = time.perf_counter() - t0
        man.artifacts.append(man.write(args.out))
    except PostAdiabaticError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if not man.ok:
        print("one or more checks failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
