"""Scenario files, run manifests and reproducible artifact writers.

A scenario is a UTF-8 JSON object. Complex matrix entries are written as
``[re, im]`` pairs; plain numbers are read as real. Unknown keys and
inconsistent dimensions are rejected with a JSON-pointer location.

Example (minimal)::

    {"format_version": 1, "name": "ground",
     "hamiltonian": {"d": 2, "K": 2, "H0": [[0, 0], [0, 0]],
                     "Hlin": [[[0, 1], [1, 0]], [[1, 0], [0, -1]]]},
     "level": 0, "epsilon": 0.1, "mass": 1.0,
     "initial": {"q": [1.0, 0.0], "v": [0.0, 1.0]}}
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import numpy as np

from . import __version__
from .errors import ValidationError
from .operators import HamiltonianField
from .tensors import ModelField, Potential

SUPPORTED_VERSIONS = (1,)
MASS_CONVENTIONS = ("physical", "slow")

DEFAULT_TOLERANCES = {"rtol": 1e-9, "atol": 1e-10, "gap_tol": 1e-8, "h_rel": 1e-4, "h_outer_rel": 1e-3,
                      "constraint_tol": 1e-8}

_TOP_KEYS = {"format_version", "name", "description", "hamiltonian", "potential", "mass", "mass_convention",
             "epsilon", "level", "order", "initial", "path", "s_span", "samples", "tolerances", "output",
             "geometry", "sweep", "observables", "brackets"}
_SECTION_KEYS = {
    "hamiltonian": {"d", "K", "H0", "Hlin"},
    "potential": {"terms"},
    "initial": {"q", "v", "a", "j"},
    "path": {"kind", "radius", "omega", "phase", "center", "s", "q", "s_end", "points"},
    "tolerances": set(DEFAULT_TOLERANCES),
    "geometry": {"closed_form", "grid", "geodesic", "deviation"},
    "sweep": {"epsilons", "orders", "s_start", "duration", "samples"},
}
_REQUIRED = ("format_version", "hamiltonian", "level", "epsilon")


@dataclass
class Scenario:
    """Validated scenario with defaults resolved (``data`` is the canonical dict)."""

    data: dict
    field: HamiltonianField
    potential: Potential

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def K(self) -> int:
        return self.field.K

    @property
    def epsilons(self) -> list:
        return list(self.data["epsilon"])

    @property
    def epsilon(self) -> float:
        return float(self.data["epsilon"][0])

    @property
    def tolerances(self) -> dict:
        return self.data["tolerances"]

    @property
    def hash(self) -> str:
        return scenario_hash(self.data)

    def kinetic_mass(self, epsilon: float | None = None) -> float:
        eps = self.epsilon if epsilon is None else epsilon
        M = self.data["mass"]
        return eps ** 2 * M if self.data["mass_convention"] == "physical" else M

    def model_field(self, epsilon: float | None = None) -> ModelField:
        eps = self.epsilon if epsilon is None else float(epsilon)
        tol = self.tolerances
        return ModelField(self.field, self.data["level"], eps, self.kinetic_mass(eps), self.potential,
                          h_rel=tol["h_rel"], h_outer_rel=tol["h_outer_rel"], gap_tol=tol["gap_tol"])


# ------------------------------------------------------------------ parsing
def _complex_matrix(obj, pointer: str, d: int) -> np.ndarray:
    if not isinstance(obj, list) or len(obj) != d:
        raise ValidationError(f"expected a {d}x{d} matrix", pointer)
    out = np.zeros((d, d), dtype=complex)
    for i, row in enumerate(obj):
        if not isinstance(row, list) or len(row) != d:
            raise ValidationError(f"row {i} must have {d} entries", f"{pointer}/{i}")
        for j, x in enumerate(row):
            p = f"{pointer}/{i}/{j}"
            if isinstance(x, bool):
                raise ValidationError("matrix entries must be numbers or [re, im] pairs", p)
            if isinstance(x, (int, float)):
                out[i, j] = float(x)
            elif isinstance(x, list) and len(x) == 2 and all(isinstance(y, (int, float)) and not isinstance(y, bool)
                                                              for y in x):
                out[i, j] = complex(float(x[0]), float(x[1]))
            else:
                raise ValidationError("matrix entries must be numbers or [re, im] pairs", p)
    return out


def _vector(obj, pointer: str, K: int) -> list:
    if not isinstance(obj, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in obj):
        raise ValidationError("expected a list of numbers", pointer)
    if len(obj) != K:
        raise ValidationError(f"dimension mismatch: length {len(obj)} but K={K}", pointer)
    return [float(x) for x in obj]


def _check_keys(obj, allowed, pointer: str) -> None:
    if not isinstance(obj, dict):
        raise ValidationError("expected a JSON object", pointer or "/")
    for k in obj:
        if k not in allowed:
            raise ValidationError(f"unknown key {k!r}", f"{pointer}/{k}")


def _number(x, pointer: str, positive: bool = False) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValidationError("expected a number", pointer)
    x = float(x)
    if positive and not x > 0:
        raise ValidationError("expected a positive number", pointer)
    return x


def matrix_to_json(M: np.ndarray) -> list:
    """``[re, im]`` pairs for every entry (exact round trip through :func:`parse_scenario`)."""
    return [[[float(x.real), float(x.imag)] for x in row] for row in np.asarray(M, complex)]


def parse_scenario(text: str | bytes | dict) -> Scenario:
    """Validate a scenario and resolve its defaults."""
    if isinstance(text, dict):
        raw = copy.deepcopy(text)
    else:
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"invalid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})", "/") from exc
    _check_keys(raw, _TOP_KEYS, "")
    for k in _REQUIRED:
        if k not in raw:
            raise ValidationError(f"missing required key {k!r}", f"/{k}")
    for sec, keys in _SECTION_KEYS.items():
        if sec in raw:
            _check_keys(raw[sec], keys, f"/{sec}")
    if raw["format_version"] not in SUPPORTED_VERSIONS:
        raise ValidationError(f"unsupported format_version {raw['format_version']!r}; supported: "
                              f"{list(SUPPORTED_VERSIONS)}", "/format_version")

    h = raw["hamiltonian"]
    for k in ("d", "K", "H0", "Hlin"):
        if k not in h:
            raise ValidationError(f"missing required key {k!r}", f"/hamiltonian/{k}")
    d, K = h["d"], h["K"]
    if not isinstance(d, int) or isinstance(d, bool) or d < 2:
        raise ValidationError("d must be an integer >= 2", "/hamiltonian/d")
    if not isinstance(K, int) or isinstance(K, bool) or K < 1:
        raise ValidationError("K must be a positive integer", "/hamiltonian/K")
    if not isinstance(h["Hlin"], list):
        raise ValidationError("Hlin must be a list of matrices", "/hamiltonian/Hlin")
    if len(h["Hlin"]) != K:
        raise ValidationError(f"dimension mismatch: Hlin has {len(h['Hlin'])} matrices but K={K}",
                              "/hamiltonian/Hlin", got=len(h["Hlin"]), K=K)
    H0 = _complex_matrix(h["H0"], "/hamiltonian/H0", d)
    Hlin = np.array([_complex_matrix(m, f"/hamiltonian/Hlin/{i}", d) for i, m in enumerate(h["Hlin"])])
    try:
        fld = HamiltonianField(H0, Hlin)
    except ValidationError as exc:
        raise ValidationError(str(exc.args[0]), "/hamiltonian" + exc.pointer, **exc.details) from exc

    data: dict[str, Any] = {
        "format_version": raw["format_version"],
        "name": str(raw.get("name", "scenario")),
        "description": str(raw.get("description", "")),
        "hamiltonian": {"d": d, "K": K, "H0": matrix_to_json(fld.H0), "Hlin": [matrix_to_json(m) for m in fld.Hlin]},
    }

    terms = []
    for i, t in enumerate(raw.get("potential", {}).get("terms", [])):
        p = f"/potential/terms/{i}"
        if not isinstance(t, dict) or set(t) != {"coef", "powers"}:
            raise ValidationError("a potential term is an object with keys 'coef' and 'powers'", p)
        pw = t["powers"]
        if not isinstance(pw, list) or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in pw):
            raise ValidationError("powers must be non-negative integers", f"{p}/powers")
        if len(pw) != K:
            raise ValidationError(f"dimension mismatch: powers has length {len(pw)} but K={K}", f"{p}/powers")
        terms.append({"coef": _number(t["coef"], f"{p}/coef"), "powers": list(pw)})
    data["potential"] = {"terms": terms}
    pot = Potential(K, tuple((t["coef"], t["powers"]) for t in terms))

    data["mass"] = _number(raw.get("mass", 1.0), "/mass", positive=True)
    conv = raw.get("mass_convention", "physical")
    if conv not in MASS_CONVENTIONS:
        raise ValidationError(f"mass_convention must be one of {list(MASS_CONVENTIONS)}", "/mass_convention")
    data["mass_convention"] = conv

    eps = raw["epsilon"]
    eps_list = eps if isinstance(eps, list) else [eps]
    if not eps_list:
        raise ValidationError("epsilon list is empty", "/epsilon")
    data["epsilon"] = []
    for i, e in enumerate(eps_list):
        e = _number(e, f"/epsilon/{i}" if isinstance(eps, list) else "/epsilon", positive=True)
        if not e < 1:
            raise ValidationError("epsilon must lie in (0, 1)", "/epsilon")
        data["epsilon"].append(e)

    level = raw["level"]
    if not isinstance(level, int) or isinstance(level, bool) or not 0 <= level < d:
        raise ValidationError(f"level must be an integer in [0, {d - 1}]", "/level")
    data["level"] = level

    order = raw.get("order", "O2")
    from .dynamics import parse_order
    try:
        data["order"] = f"O{parse_order(order)}"
    except ValidationError as exc:
        raise ValidationError(str(exc.args[0]), "/order") from exc

    if "initial" in raw:
        ini = raw["initial"]
        for k in ("q", "v"):
            if k not in ini:
                raise ValidationError(f"missing required key {k!r}", f"/initial/{k}")
        data["initial"] = {k: _vector(ini[k], f"/initial/{k}", K) for k in ("q", "v", "a", "j") if k in ini}

    if "path" in raw:
        data["path"] = _parse_path(raw["path"], K)

    span = raw.get("s_span", [0.0, 5.0])
    if not isinstance(span, list) or len(span) != 2:
        raise ValidationError("s_span must be [start, end]", "/s_span")
    span = [_number(x, f"/s_span/{i}") for i, x in enumerate(span)]
    if not span[1] > span[0]:
        raise ValidationError("s_span must be increasing", "/s_span")
    data["s_span"] = span
    samples = raw.get("samples", 101)
    if not isinstance(samples, int) or isinstance(samples, bool) or samples < 2:
        raise ValidationError("samples must be an integer >= 2", "/samples")
    data["samples"] = samples

    tol = dict(DEFAULT_TOLERANCES)
    for k, x in raw.get("tolerances", {}).items():
        tol[k] = _number(x, f"/tolerances/{k}", positive=True)
    data["tolerances"] = tol
    data["output"] = str(raw.get("output", "out"))

    if "geometry" in raw:
        data["geometry"] = _parse_geometry(raw["geometry"], K)
    sw = raw.get("sweep", {})
    data["sweep"] = {
        "epsilons": [_number(x, f"/sweep/epsilons/{i}", positive=True)
                     for i, x in enumerate(sw.get("epsilons", data["epsilon"]))],
        "orders": [f"O{parse_order(o)}" for o in sw.get("orders", ["O0", "O1", "O2", "O3"])],
        "s_start": _number(sw.get("s_start", 0.5), "/sweep/s_start"),
        "duration": _number(sw.get("duration", 4.0), "/sweep/duration", positive=True),
        "samples": int(sw.get("samples", 81)),
    }
    obs = raw.get("observables", [])
    if not isinstance(obs, list):
        raise ValidationError("observables must be a list", "/observables")
    names = {f"{kind}{a}" for kind in ("q", "v", "pi") for a in range(K)}
    for i, o in enumerate(obs):
        if o not in names:
            raise ValidationError(f"unknown observable {o!r}; use q<i>, v<i> or pi<i>", f"/observables/{i}")
    data["observables"] = list(obs)
    brackets = raw.get("brackets", [])
    for i, pair in enumerate(brackets):
        if not (isinstance(pair, list) and len(pair) == 2 and all(p in names for p in pair)):
            raise ValidationError("brackets are pairs of observable names", f"/brackets/{i}")
    data["brackets"] = [list(p) for p in brackets]
    return Scenario(data=data, field=fld, potential=pot)


def _parse_path(p: dict, K: int) -> dict:
    kind = p.get("kind")
    if kind == "circle":
        if K != 2:
            raise ValidationError(f"circle paths need K=2, got K={K}", "/path/kind")
        return {"kind": "circle", "radius": _number(p.get("radius", 1.0), "/path/radius", positive=True),
                "omega": _number(p.get("omega", 1.0), "/path/omega"),
                "phase": _number(p.get("phase", 0.0), "/path/phase"),
                "center": _vector(p.get("center", [0.0, 0.0]), "/path/center", 2),
                "s_end": _number(p.get("s_end", 1.0), "/path/s_end", positive=True),
                "points": int(p.get("points", 201))}
    if kind == "samples":
        s = p.get("s")
        q = p.get("q")
        if not isinstance(s, list) or not isinstance(q, list) or len(s) != len(q):
            raise ValidationError("sampled paths need lists 's' and 'q' of equal length", "/path")
        return {"kind": "samples", "s": [_number(x, f"/path/s/{i}") for i, x in enumerate(s)],
                "q": [_vector(x, f"/path/q/{i}", K) for i, x in enumerate(q)]}
    raise ValidationError("path kind must be 'circle' or 'samples'", "/path/kind")


def _parse_geometry(g: dict, K: int) -> dict:
    out: dict[str, Any] = {}
    if "closed_form" in g:
        if g["closed_form"] not in ("ground", "excited"):
            raise ValidationError("closed_form must be 'ground' or 'excited'", "/geometry/closed_form")
        out["closed_form"] = g["closed_form"]
    if "grid" in g:
        grid = g["grid"]
        if not isinstance(grid, dict) or set(grid) - {"rho", "M", "angle"}:
            raise ValidationError("grid keys are 'rho', 'M' and 'angle'", "/geometry/grid")
        out["grid"] = {"rho": [_number(x, f"/geometry/grid/rho/{i}", positive=True)
                               for i, x in enumerate(grid.get("rho", [0.3, 0.5, 1.0, 2.0, 5.0]))],
                       "M": [_number(x, f"/geometry/grid/M/{i}", positive=True)
                             for i, x in enumerate(grid.get("M", [1.0]))],
                       "angle": _number(grid.get("angle", 0.7), "/geometry/grid/angle")}
    if "geodesic" in g:
        geo = g["geodesic"]
        if not isinstance(geo, dict) or set(geo) - {"q0", "u0", "s_span"}:
            raise ValidationError("geodesic keys are 'q0', 'u0' and 's_span'", "/geometry/geodesic")
        out["geodesic"] = {"q0": _vector(geo["q0"], "/geometry/geodesic/q0", K),
                           "u0": _vector(geo["u0"], "/geometry/geodesic/u0", K),
                           "s_span": [float(x) for x in geo.get("s_span", [0.0, 1.0])]}
    if "deviation" in g:
        dev = g["deviation"]
        if not isinstance(dev, dict) or set(dev) - {"v0", "vdot0"}:
            raise ValidationError("deviation keys are 'v0' and 'vdot0'", "/geometry/deviation")
        out["deviation"] = {"v0": _vector(dev["v0"], "/geometry/deviation/v0", K),
                            "vdot0": _vector(dev.get("vdot0", [0.0] * K), "/geometry/deviation/vdot0", K)}
    return out


def emit_scenario(sc: Scenario) -> str:
    """Canonical JSON text of a resolved scenario."""
    return json.dumps(sc.data, sort_keys=True, indent=2)


def load_scenario(ref: str) -> Scenario:
    """Load from a file path, or from a bundled scenario name (see :func:`bundled_scenarios`)."""
    if os.path.exists(ref):
        with open(ref, "rb") as fh:
            return parse_scenario(fh.read())
    name = ref[:-5] if ref.endswith(".json") else ref
    if name in bundled_scenarios():
        return parse_scenario(resources.files("postadiabatic.scenarios").joinpath(f"{name}.json").read_bytes())
    raise ValidationError(f"scenario {ref!r} is neither a file nor a bundled scenario "
                          f"({', '.join(bundled_scenarios())})", "/")


def bundled_scenarios() -> list[str]:
    root = resources.files("postadiabatic.scenarios")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


# ---------------------------------------------------------------- artifacts
def scenario_hash(data: dict) -> str:
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def fmt(x) -> str:
    """17 significant digits (exact round trip for doubles)."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def csv_text(header: list[str], rows, scenario_digest: str) -> str:
    buf = io.StringIO()
    buf.write(f"# scenario_hash={scenario_digest}\n# version={__version__}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def write_csv(path: str, header: list[str], rows, scenario_digest: str) -> str:
    text = csv_text(header, rows, scenario_digest)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


def json_text(payload: dict, scenario_digest: str) -> str:
    body = dict(_jsonable(payload))
    body["scenario_hash"] = scenario_digest
    body["version"] = __version__
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def write_json(path: str, payload: dict, scenario_digest: str) -> str:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json_text(payload, scenario_digest))
    return path


@dataclass
class RunManifest:
    """Everything needed to rerun a command: scenario hash, resolved settings and check results."""

    command: str
    scenario_hash: str
    scenario: dict
    settings: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    tool_version: str = __version__

    @property
    def ok(self) -> bool:
        return all(c.get("passed", True) for c in self.checks.values())

    def to_dict(self) -> dict:
        return _jsonable({"command": self.command, "scenario_hash": self.scenario_hash, "scenario": self.scenario,
                          "settings": self.settings, "checks": self.checks, "artifacts": self.artifacts,
                          "wall_clock_s": self.wall_clock_s, "tool_version": self.tool_version,
                          "all_passed": self.ok})

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, f"manifest_{self.command}.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        return path
