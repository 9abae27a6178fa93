"""Config-driven pipeline: validate -> formal -> borel1 -> accel -> borel2 -> sum -> verify.

Every stage reads what it needs from ``out_dir`` and writes its artifacts back, so a
later stage can be rerun on its own. Artifacts are deterministic (no timestamps,
sorted keys, fixed float formatting); wall-clock lives only in the manifest.
"""

from __future__ import annotations

import os

_threads = os.environ.get("QSUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .errors import (AlignmentError, DivisorDegenerate, GeometryViolation, NoAdmissibleDirection,
                     ParameterError, ParseError, QsumError, SchemaError, StageError)

log = logging.getLogger("qsum")

STAGES = ("validate", "formal", "borel1", "accel", "borel2", "sum", "verify")
REQUIRES = {"formal": "validate", "borel1": "validate", "accel": "borel1", "borel2": "accel",
            "sum": "borel2", "verify": "sum"}
STAGE_MARKER = {s: f"{s}.json" for s in STAGES}

REQUIRED = object()

PROBLEM_KEYS = {
    "q": float, "k1": int, "k2": int, "Q": list, "R_D1": list, "R_D2": list,
    "d_D1": int, "d_D2": int, "ell_terms": list, "forcing": list, "beta": float, "mu": float,
    "eps0": float, "beta_prime": float, "alpha": float, "nu": float, "rho": float, "r_T": float,
}
PROBLEM_OPTIONAL = {"delta": float}
ELL_KEYS = {"d", "delta", "Delta", "R", "C"}
FORCING_KEYS = {"kind", "profile", "pole", "period", "start", "weights"}

SCHEMA = {
    "grids": {
        "M_max": (float, 14.0), "n_m": (int, 113), "L": (int, 80), "r_max": (float, 1e8),
        "r_min": (float, 1e-14), "n_disc": (int, 0), "n_angles": (int, 8),
        "r2_min": (float, 1e-12), "r2_max": (float, 1e12),
        "psi_min": (float, 1e-22), "psi_max": (float, 1e18),
    },
    "covering": {
        "varsigma": (int, REQUIRED), "overlap_frac": (float, 0.2), "delta_tilde": (float, 0.1),
        "min_gap_deg": (float, 2.0),
    },
    "solver": {
        "tol": (float, 1e-8), "picard_tol": (float, 1e-13), "max_iter": (int, 200),
        "conv_tol": (float, 1e-8), "pi_tol": (float, 1e-16), "theta_tol": (float, 1e-16),
    },
    "verify": {
        "eps_magnitudes": (int, 12), "N_range": (list, [0, 8]), "N_recursion": (int, 12),
        "probes": (dict, {"t": [0.45, [0.3, 0.015]], "z": [0.0, [0.3, 0.1]]}),
        "residual_samples": (int, 10), "residual_tol": (float, 1e-4), "identity_tol": (float, 1e-4),
        "perturb": (float, 0.01), "envelope_samples": (int, 8), "seed": (int, 0),
    },
}
TOLERANCE_FIELDS = [("solver", k) for k in ("tol", "picard_tol", "conv_tol", "pi_tol", "theta_tol")] + \
    [("verify", "residual_tol"), ("verify", "identity_tol")]


# ---------------------------------------------------------------- config

class _UniqueKeyLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ParseError("duplicate key", line=key_node.start_mark.line + 1, field=str(key))
        seen.add(key)
    return loader.construct_mapping(node, deep=deep)


_UniqueKeyLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


@dataclass
class RunConfig:
    problem: dict
    grids: dict
    covering: dict
    solver: dict
    verify: dict
    out_dir: str = "qsum_out"

    def as_dict(self) -> dict:
        return {"problem": self.problem, "grids": self.grids, "covering": self.covering,
                "solver": self.solver, "verify": self.verify, "out_dir": self.out_dir}

    def digest(self) -> str:
        """sha256 of the resolved config; out_dir is excluded so relocated runs compare equal."""
        d = self.as_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def problem_dict(self) -> dict:
        p = copy.deepcopy(self.problem)
        p["delta_tilde"] = self.covering["delta_tilde"]
        return p


def _coerce(value, kind, where: str, errors: List[str]):
    if kind is float:
        if isinstance(value, bool):
            errors.append(f"{where}: expected a number, got {value!r}")
            return value
        try:
            return float(value)
        except (TypeError, ValueError):
            errors.append(f"{where}: expected a number, got {value!r}")
            return value
    if kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        errors.append(f"{where}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, kind):
        errors.append(f"{where}: expected a {kind.__name__}, got {type(value).__name__}")
    return value


def _check_problem(raw, errors: List[str]) -> dict:
    if not isinstance(raw, dict):
        errors.append("problem: expected a mapping")
        return {}
    out = {}
    for key in raw:
        if key not in PROBLEM_KEYS and key not in PROBLEM_OPTIONAL:
            errors.append(f"problem.{key}: unknown key")
    for key, kind in {**PROBLEM_KEYS, **PROBLEM_OPTIONAL}.items():
        if key not in raw:
            if key in PROBLEM_KEYS:
                errors.append(f"problem.{key}: missing required key")
            continue
        out[key] = _coerce(raw[key], kind, f"problem.{key}", errors)
    q = out.get("q")
    if isinstance(q, float) and q <= 1:
        errors.append("problem.q: q must exceed 1")
    k1, k2 = out.get("k1"), out.get("k2")
    if isinstance(k1, int) and isinstance(k2, int) and not (0 < k1 < k2):
        errors.append("problem.k1/k2: need 0 < k1 < k2")
    for i, e in enumerate(out.get("ell_terms") or []):
        if not isinstance(e, dict):
            errors.append(f"problem.ell_terms[{i}]: expected a mapping")
            continue
        for key in e:
            if key not in ELL_KEYS:
                errors.append(f"problem.ell_terms[{i}].{key}: unknown key")
        for key in ("d", "delta", "Delta", "R"):
            if key not in e:
                errors.append(f"problem.ell_terms[{i}].{key}: missing required key")
    for i, f in enumerate(out.get("forcing") or []):
        if not isinstance(f, dict):
            errors.append(f"problem.forcing[{i}]: expected a mapping")
            continue
        for key in f:
            if key not in FORCING_KEYS:
                errors.append(f"problem.forcing[{i}].{key}: unknown key")
        for key in ("kind", "profile"):
            if key not in f:
                errors.append(f"problem.forcing[{i}].{key}: missing required key")
    return out


def resolve_config(raw) -> RunConfig:
    """Schema-check a parsed mapping and fill defaults; all violations are reported at once."""
    if not isinstance(raw, dict):
        raise SchemaError("the config must be a mapping at top level")
    errors: List[str] = []
    known = {"problem", "out_dir", *SCHEMA}
    for key in raw:
        if key not in known:
            errors.append(f"{key}: unknown key")
    if "problem" not in raw:
        errors.append("problem: missing required section")
    problem = _check_problem(raw.get("problem", {}), errors) if "problem" in raw else {}
    sections = {}
    for name, fields in SCHEMA.items():
        given = raw.get(name) or {}
        if not isinstance(given, dict):
            errors.append(f"{name}: expected a mapping")
            given = {}
        for key in given:
            if key not in fields:
                errors.append(f"{name}.{key}: unknown key")
        sec = {}
        for key, (kind, default) in fields.items():
            if key in given:
                sec[key] = _coerce(given[key], kind, f"{name}.{key}", errors)
            elif default is REQUIRED:
                errors.append(f"{name}.{key}: missing required key")
            else:
                sec[key] = copy.deepcopy(default)
        sections[name] = sec
    for sec, key in TOLERANCE_FIELDS:
        v = sections[sec].get(key)
        if isinstance(v, float) and not v > 0:
            errors.append(f"{sec}.{key}: tolerances must be positive")
    dt = sections["covering"].get("delta_tilde")
    if isinstance(dt, float) and not 0 < dt < 1:
        errors.append("covering.delta_tilde: must lie in (0, 1)")
    nr = sections["verify"].get("N_range")
    if isinstance(nr, list) and not (len(nr) == 2 and all(isinstance(v, int) for v in nr) and 0 <= nr[0] <= nr[1]):
        errors.append("verify.N_range: expected [N_min, N_max] with 0 <= N_min <= N_max")
    probes = sections["verify"].get("probes")
    if isinstance(probes, dict) and set(probes) != {"t", "z"}:
        errors.append("verify.probes: expected exactly the keys t and z")
    out_dir = raw.get("out_dir", "qsum_out")
    if not isinstance(out_dir, str):
        errors.append("out_dir: expected a path string")
    if errors:
        raise SchemaError(errors)
    return RunConfig(problem, sections["grids"], sections["covering"], sections["solver"],
                     sections["verify"], out_dir)


def load_config(path) -> RunConfig:
    """Parse a YAML run config; ParseError carries the line, SchemaError lists every violation."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        raw = yaml.load(text, Loader=_UniqueKeyLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ParseError(str(exc.problem or exc), line=mark.line + 1 if mark else None) from exc
    except yaml.YAMLError as exc:
        raise ParseError(str(exc)) from exc
    if raw is None:
        raise ParseError("the config file is empty")
    return resolve_config(raw)


def bundled_config_path() -> Path:
    return Path(__file__).with_name("data") / "bundled.yaml"


# ---------------------------------------------------------------- persistence

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (complex, np.complexfloating)):
        return [_plain(obj.real), _plain(obj.imag)]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    return obj


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Store:
    """Artifact directory with deterministic writers."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def write_json(self, name: str, data) -> None:
        self.path(name).write_text(json.dumps(_plain(data), indent=1, sort_keys=True) + "\n")

    def read_json(self, name: str):
        return json.loads(self.path(name).read_text())

    def write_array(self, name: str, arr: np.ndarray) -> None:
        with open(self.path(name), "wb") as fh:
            np.save(fh, np.ascontiguousarray(arr), allow_pickle=False)

    def read_array(self, name: str) -> np.ndarray:
        return np.load(self.path(name), allow_pickle=False)

    def write_csv(self, name: str, header: str, rows: Sequence[Sequence]) -> None:
        lines = [header]
        for r in rows:
            lines.append(",".join(x if isinstance(x, str) else
                                  (str(x) if isinstance(x, (int, np.integer)) else f"{x:.17g}") for x in r))
        self.path(name).write_text("\n".join(lines) + "\n")

    def listing(self) -> List[dict]:
        out = []
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                out.append({"path": str(p.relative_to(self.root)), "sha256": sha256_file(p),
                            "bytes": p.stat().st_size})
        return out


# ---------------------------------------------------------------- pipeline context

def _complex_list(values) -> np.ndarray:
    from .problem import _complex
    return np.array([_complex(v) for v in values], dtype=complex)


@dataclass
class Context:
    config: RunConfig
    store: Store
    _spec: object = None
    _family: object = None

    @property
    def spec(self):
        if self._spec is None:
            from .grids import make_mgrid
            from .problem import build_spec
            g = self.config.grids
            mg = make_mgrid(float(self.config.problem["beta"]), float(self.config.problem["mu"]),
                            g["M_max"], g["n_m"])
            self._spec = build_spec(self.config.problem_dict(), mg)
        return self._spec

    @property
    def settings(self):
        from .synthesis import SolverSettings
        g, s = self.config.grids, self.config.solver
        return SolverSettings(L=g["L"], r1_min=g["r_min"], r1_max=g["r_max"], r2_min=g["r2_min"],
                              r2_max=g["r2_max"], psi_min=g["psi_min"], psi_max=g["psi_max"],
                              n_angles=g["n_angles"], tol=s["picard_tol"], max_iter=s["max_iter"],
                              conv_tol=s["conv_tol"], laplace_tol=s["tol"])

    @property
    def family(self):
        if self._family is None:
            from .geometry import AssociatedFamily
            self._family = AssociatedFamily.from_dict(self.store.read_json("family.json"))
        return self._family

    def probes(self):
        pr = self.config.verify["probes"]
        return _complex_list(pr["t"]), _complex_list(pr["z"])

    def ray(self, prefix: str, p: int):
        from .borelplane import RayData
        meta = self.store.read_json(f"{prefix}_p{p}.json")
        radii = self.store.read_array(f"{prefix}_p{p}_radii.npy")
        values = self.store.read_array(f"{prefix}_p{p}_values.npy")
        return RayData(meta["direction"], radii, values, meta["log_step"])

    def put_ray(self, prefix: str, p: int, ray, extra: Optional[dict] = None) -> None:
        self.store.write_array(f"{prefix}_p{p}_radii.npy", np.asarray(ray.radii, dtype=float))
        self.store.write_array(f"{prefix}_p{p}_values.npy", np.asarray(ray.values, dtype=complex))
        meta = {"direction": ray.direction, "log_step": ray.log_step}
        meta.update(extra or {})
        self.store.write_json(f"{prefix}_p{p}.json", meta)

    def solutions(self):
        from .synthesis import SectorialSolution
        fam = self.family
        out = []
        for p in range(fam.varsigma):
            out.append(SectorialSolution(self.spec, p, fam.directions[p], self.ray("borel2", p),
                                         self.ray("accel", p), fam, tol=self.config.solver["tol"],
                                         picard_tol=self.config.solver["picard_tol"]))
        return out


def _random_tests(nspec, grid, mgrid, rng, count: int = 3) -> List[np.ndarray]:
    """Test functions of unit weighted norm with random phases."""
    tw = nspec.tau_log_weight(grid.tau)
    mw = nspec.m_weight(mgrid.nodes)
    out = []
    for _ in range(count):
        phase = np.exp(2j * math.pi * rng.random((grid.size, mgrid.n)))
        amp = rng.random((grid.size, mgrid.n))
        out.append(amp * phase * np.exp(-tw)[:, None] / mw[None, :])
    return out


# ---------------------------------------------------------------- stages

def stage_validate(ctx: Context) -> dict:
    from .geometry import build_good_covering, choose_directions, offset_clearance
    from .problem import root_set, validate_assumptions
    from .qcore import QFrame, laplace_norm, pi_q, theta_eval, theta_integral
    spec = ctx.spec
    cfg = ctx.config
    report = validate_assumptions(spec)
    roots = {j: root_set(spec, j) for j in (1, 2)}
    kernels = []
    frame = spec.frame
    for k in sorted({frame.k1, frame.kappa, frame.k2}, key=float):
        qk = frame.qk(k)
        xs = [0.7 * np.exp(0.3j), 1.3 * np.exp(-1.1j), 0.45 * np.exp(2.0j), 1.9]
        worst = 0.0
        for x in xs:
            lhs = theta_eval(frame, k, qk * x, tol=cfg.solver["theta_tol"])
            rhs = qk * x * theta_eval(frame, k, x, tol=cfg.solver["theta_tol"])
            worst = max(worst, abs(lhs - rhs) / abs(rhs))
        norm = laplace_norm(frame, k)
        kernels.append({"k": str(k), "pi_q": pi_q(frame, k, tol=cfg.solver["pi_tol"]),
                        "laplace_norm": norm,
                        "laplace_norm_mismatch": abs(theta_integral(frame, k) - norm) / norm,
                        "theta_equation_residual": worst})
    cov = build_good_covering(cfg.covering["varsigma"], spec.eps0, cfg.covering["overlap_frac"])
    fam = choose_directions(spec, cov, roots, delta_tilde=cfg.covering["delta_tilde"],
                            min_gap=math.radians(cfg.covering["min_gap_deg"]))
    ctx._family = fam
    clearance = offset_clearance(fam, spec.rho, spec.delta)
    ctx.store.write_json("family.json", fam.as_dict())
    summary = {
        "assumptions": report.as_dict(),
        "roots": {str(j): {"r_QR": r.r_QR, "arcs": r.angular_range()} for j, r in roots.items()},
        "kernels": kernels,
        "level_flags": fam.level_flags,
        "min_margin_deg": math.degrees(min(fam.margins)),
        "alignment_L": spec.alignment_L(),
        "weight_offset": {"delta": spec.delta, "clearance": clearance},
    }
    ok = report.passed and all(k["theta_equation_residual"] < 1e-9 and k["laplace_norm_mismatch"] < 1e-10
                              for k in kernels)
    if clearance <= 0:
        raise StageError("validate", f"-delta={-spec.delta:g} touches the disc or a Borel sector",
                         "raise problem.delta above rho")
    if not report.passed:
        names = ", ".join(i.name for i in report.failures())
        raise StageError("validate", f"assumptions violated: {names}",
                         "adjust the problem data until every check has positive slack")
    return {"status": "pass" if ok else "fail", **summary}


def stage_formal(ctx: Context) -> dict:
    from .formal import eps_expansion, solve_recursion
    spec = ctx.spec
    v = ctx.config.verify
    N = max(v["N_range"][1], v["N_recursion"])
    coeffs = solve_recursion(spec, 0.0, N, ctx.config.solver["conv_tol"])
    coeffs.to_csv(ctx.store.path("formal_coeffs.csv"), spec.mgrid)
    coeffs.norms_csv(ctx.store.path("formal_norms.csv"))
    t, z = ctx.probes()
    exp = eps_expansion(spec, t, z, v["N_range"][1], ctx.config.solver["conv_tol"])
    for name in ("H", "Fh", "h_profiles", "f_profiles", "residuals"):
        ctx.store.write_array(f"expansion_{name}.npy", getattr(exp, name))
    return {"status": "pass", "N": N, "coefficient_norms": coeffs.norms,
            "expansion_order": v["N_range"][1], "expansion_residual": float(exp.residuals.max())}


def load_expansion(ctx: Context):
    from .formal import EpsExpansion
    t, z = ctx.probes()
    arr = {n: ctx.store.read_array(f"expansion_{n}.npy")
           for n in ("H", "Fh", "h_profiles", "f_profiles", "residuals")}
    return EpsExpansion(arr["H"], arr["Fh"], t, z, arr["h_profiles"], arr["f_profiles"],
                        arr["residuals"], ctx.spec.mgrid)


def stage_borel1(ctx: Context) -> dict:
    from .borelplane import build_phi, norm_spec, operator_bounds, ray_from_grid, smallness_report, solve_w_k1
    from .grids import make_taugrid
    from .synthesis import recursion_consistency
    spec, st = ctx.spec, ctx.settings
    st.check(spec)
    fam = ctx.family
    phi = build_phi(spec)
    nspec = norm_spec(spec, 1)
    rng = np.random.default_rng(ctx.config.verify["seed"])
    rows = []
    for p, d in enumerate(fam.directions):
        g = make_taugrid(d, spec.rho, st.r1_max, st.L, ctx.config.grids["n_disc"], q=spec.frame.q,
                         n_angles=st.n_angles, r_min=st.r1_min)
        w1 = solve_w_k1(spec, phi, 0.0, g, tol=st.tol, max_iter=st.max_iter, conv_tol=st.conv_tol)
        bounds = operator_bounds(spec, w1.operator, nspec, tests=_random_tests(nspec, g, spec.mgrid, rng))
        small = smallness_report(bounds)
        rec = recursion_consistency(spec, w1, ctx.config.verify["N_recursion"], st.conv_tol)
        ctx.put_ray("borel1", p, ray_from_grid(w1.w), {"picard": w1.sidecar()})
        rows.append({"p": p, "direction": d, "contraction_ratio": w1.contraction_ratio,
                     "iterations": w1.iterations, "norm": w1.norm, "smallness": small,
                     "recursion": rec})
        log.info("borel1 p=%d ratio=%.3g sum K=%.3g", p, w1.contraction_ratio, small["lipschitz_sum"])
    ok = all(r["contraction_ratio"] <= 0.5 and r["smallness"]["passed"] for r in rows)
    return {"status": "pass" if ok else "fail", "directions": rows}


def stage_accel(ctx: Context) -> dict:
    from .borelplane import RayData, accelerate_function, in_R_domain_array
    from .grids import make_sector_grid
    from .synthesis import accelerated_forcing
    spec, st = ctx.spec, ctx.settings
    fam = ctx.family
    rows = []
    for p, d in enumerate(fam.directions):
        g2 = make_sector_grid(d, st.r2_min, st.r2_max, st.L, spec.frame.q, rho=spec.rho)
        radii = np.abs(g2.tau)
        psi = accelerated_forcing(spec, d, radii, st)
        ctx.put_ray("accel", p, RayData(d, radii, psi, math.log(spec.frame.q) / st.L))
        # acceleration of the level-1 data on the bounded domain, for the identity check
        w1 = ctx.ray("borel1", p)
        nodes = np.nonzero((radii < spec.eps0 * spec.r_T)
                           & in_R_domain_array(g2.tau, d, spec.delta_tilde))[0]
        acc = accelerate_function(spec.frame, w1, g2.tau[nodes], tol=st.laplace_tol)
        ctx.store.write_array(f"accel_w1_p{p}_nodes.npy", nodes.astype(np.int64))
        ctx.store.write_array(f"accel_w1_p{p}_values.npy", acc)
        rows.append({"p": p, "direction": d, "n_identity_nodes": int(nodes.size),
                     "forcing_max": float(np.abs(psi).max())})
    return {"status": "pass", "directions": rows}


def stage_borel2(ctx: Context) -> dict:
    from .borelplane import (build_phi, norm_spec, operator_bounds, ray_from_grid, smallness_report,
                             solve_w_k2)
    from .grids import GridFunction, make_sector_grid
    from .synthesis import level2_interior
    spec, st = ctx.spec, ctx.settings
    fam = ctx.family
    phi = build_phi(spec)
    nspec = norm_spec(spec, 2)
    rng = np.random.default_rng(ctx.config.verify["seed"] + 1)
    tol = ctx.config.verify["identity_tol"]
    rows = []
    for p, d in enumerate(fam.directions):
        g2 = make_sector_grid(d, st.r2_min, st.r2_max, st.L, spec.frame.q, rho=spec.rho)
        psi = ctx.ray("accel", p)
        phi2 = phi.with_psi_k2(GridFunction(psi.values, g2, spec.mgrid, "borel_k2_domain"))
        interior = level2_interior(spec, g2, st.r2_max)
        w2 = solve_w_k2(spec, phi2, 0.0, g2, tol=st.tol, max_iter=st.max_iter, conv_tol=st.conv_tol,
                        interior=interior)
        bounds = operator_bounds(spec, w2.operator, nspec, interior=interior,
                                 tests=_random_tests(nspec, g2, spec.mgrid, rng))
        small = smallness_report(bounds)
        nodes = ctx.store.read_array(f"accel_w1_p{p}_nodes.npy")
        acc = ctx.store.read_array(f"accel_w1_p{p}_values.npy")
        b = w2.w.values[nodes]
        rel = np.abs(acc - b) / (1 + np.abs(b))
        ident = {"sup_rel_diff": float(rel.max()) if rel.size else 0.0, "n_nodes": int(nodes.size),
                 "tol": tol}
        ident["passed"] = ident["sup_rel_diff"] <= tol
        ctx.put_ray("borel2", p, ray_from_grid(w2.w), {"picard": w2.sidecar()})
        rows.append({"p": p, "direction": d, "contraction_ratio": w2.contraction_ratio,
                     "iterations": w2.iterations, "norm": w2.norm, "smallness": small,
                     "identity": ident})
        log.info("borel2 p=%d ratio=%.3g identity=%.2g", p, w2.contraction_ratio, ident["sup_rel_diff"])
    ok = all(r["contraction_ratio"] <= 0.5 and r["smallness"]["passed"] and r["identity"]["passed"]
             for r in rows)
    return {"status": "pass" if ok else "fail", "directions": rows}


def _eps_grid(ctx: Context) -> np.ndarray:
    from .asymptotics import eps_magnitudes
    spec = ctx.spec
    radius = min(s.radius for s in ctx.family.covering.sectors)
    return eps_magnitudes(radius, spec.frame.q, ctx.config.verify["eps_magnitudes"])


def stage_sum(ctx: Context) -> dict:
    sols = ctx.solutions()
    t, z = ctx.probes()
    mags = _eps_grid(ctx)[::3]
    rows = ["p,re_t,im_t,re_z,im_z,re_eps,im_eps,re_u,im_u,est_err"]
    for sol in sols:
        eps = mags * np.exp(1j * ctx.family.covering.sectors[sol.p].direction)
        rows.extend(sol.dump_rows(t, z, eps))
    ctx.store.path("sum_u.csv").write_text("\n".join(rows) + "\n")
    worst = max(float(r.rsplit(",", 1)[1]) for r in rows[1:])
    return {"status": "pass", "n_rows": len(rows) - 1, "max_error_estimate": worst}


def _residual_samples(ctx: Context, sol, count: int, rng) -> tuple:
    """Admissible T on direction p: |T| log-uniform inside the bounded domain, mild angular spread."""
    fam = ctx.family
    r_hi = 0.8 * ctx.spec.eps0 * ctx.spec.r_T
    T, m = [], []
    while len(T) < count:
        r = math.exp(rng.uniform(math.log(1e-4), math.log(r_hi)))
        a = sol.direction + rng.uniform(-0.3, 0.3)
        x = r * np.exp(1j * a)
        if fam.R_b_contains(sol.p, x)[0]:
            T.append(x)
            m.append(int(rng.integers(0, ctx.spec.mgrid.n)))
    return np.array(T), m


def stage_verify(ctx: Context) -> dict:
    from .asymptotics import (classify_levels, cocycle_differences, fit_flatness_order,
                              fit_log_quadratic, qgevrey_envelope_check)
    from .errors import InsufficientSignal
    from .synthesis import residual_check
    spec, cfg = ctx.spec, ctx.config
    v = cfg.verify
    fam = ctx.family
    sols = ctx.solutions()
    rng = np.random.default_rng(v["seed"])
    checks = {}

    T, m = _residual_samples(ctx, sols[0], v["residual_samples"], rng)
    res = residual_check(spec, sols[0], T, m, tol=v["residual_tol"])
    bad = residual_check(spec, sols[0], T, m, tol=v["residual_tol"], perturb=v["perturb"])
    checks["residual"] = {"max_relative_residual": res["max_relative_residual"], "tol": v["residual_tol"],
                          "perturbed_residual": bad["max_relative_residual"],
                          "passed": res["passed"] and bad["max_relative_residual"] >= 1e-3,
                          "samples": res["samples"]}

    t, z = ctx.probes()
    mags = _eps_grid(ctx)
    samples = cocycle_differences(sols, t, z, mags, fam.covering, fam.level_flags,
                                  (spec.frame.k1, spec.frame.k2))
    fits, flat_rows = [], []
    for c in samples:
        f = fit_flatness_order(c)
        entry = {"pair": c.p, **f.as_dict()}
        try:
            ff = fit_log_quadratic(np.abs(c.eps_samples), c.forcing_diffs, c.q, c.level_expected, c.noise)
            entry["forcing"] = ff.as_dict()
        except InsufficientSignal as exc:
            entry["forcing"] = {"note": f"bound holds trivially: {exc}"}
        fits.append(entry)
        flat_rows.extend(c.rows())
    ctx.store.path("flatness.csv").write_text("\n".join(["pair,eps_abs,diff,noise,forcing_diff"] + flat_rows) + "\n")
    levels = classify_levels(fam)
    checks["flatness"] = {"pairs": fits, "I1": levels["I1"], "I2": levels["I2"],
                          "passed": bool(levels["I1"]) and bool(levels["I2"]) and all(f["pass"] for f in fits)}

    exp = load_expansion(ctx)
    n_lo, n_hi = v["N_range"]
    eps = mags[: v["envelope_samples"]] * np.exp(1j * fam.covering.sectors[0].direction)
    env = qgevrey_envelope_check(sols[0], exp, spec.frame.k1, range(n_lo, n_hi + 1), eps)
    ctx.store.path("envelope.csv").write_text("\n".join(["N,eps,E_N,bound,slack"] + env.table()) + "\n")
    checks["envelope"] = {**env.as_dict(), "passed": env.passed}

    b1 = ctx.store.read_json("borel1.json")["summary"]["directions"]
    b2 = ctx.store.read_json("borel2.json")["summary"]["directions"]
    checks["contraction"] = {
        "max_ratio_level1": max(r["contraction_ratio"] for r in b1),
        "max_ratio_level2": max(r["contraction_ratio"] for r in b2),
        "min_slack_level1": min(r["smallness"]["contraction_slack"] for r in b1),
        "min_slack_level2": min(r["smallness"]["contraction_slack"] for r in b2),
    }
    checks["contraction"]["passed"] = all(r["contraction_ratio"] <= 0.5 and r["smallness"]["passed"]
                                          for r in b1 + b2)
    checks["operator_bounds"] = {"passed": all(t["holds"] for r in b1 + b2 for t in r["smallness"]["terms"])}
    checks["identity"] = {"max_sup_rel_diff": max(r["identity"]["sup_rel_diff"] for r in b2),
                          "passed": all(r["identity"]["passed"] for r in b2)}
    rec = b1[0]["recursion"]
    checks["recursion"] = {**rec, "passed": rec["sup_rel_diff"] <= 1e-5}
    ok = all(c["passed"] for c in checks.values())
    return {"status": "pass" if ok else "fail", "checks": checks}


STAGE_FUNCS = {"validate": stage_validate, "formal": stage_formal, "borel1": stage_borel1,
               "accel": stage_accel, "borel2": stage_borel2, "sum": stage_sum, "verify": stage_verify}

CONFIG_ERRORS = (SchemaError, ParseError, ParameterError, AlignmentError, GeometryViolation,
                 NoAdmissibleDirection, DivisorDegenerate)


# ---------------------------------------------------------------- orchestration

@dataclass
class RunManifest:
    config_hash: str
    stages: Dict[str, dict] = field(default_factory=dict)
    artifacts: List[dict] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        codes = [s.get("exit_code", 0) for s in self.stages.values()]
        return max(codes) if codes else 0

    def as_dict(self) -> dict:
        return {"config_hash": self.config_hash, "stages": self.stages, "artifacts": self.artifacts,
                "exit_code": self.exit_code}

    def without_clock(self) -> dict:
        d = copy.deepcopy(self.as_dict())
        for s in d["stages"].values():
            s.pop("wall_s", None)
        return d


def _order(stages) -> List[str]:
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise SchemaError([f"unknown stage {s!r}" for s in sorted(unknown)])
    return [s for s in STAGES if s in set(stages)]


def run_pipeline(config: RunConfig, stages: Sequence[str] = STAGES, out_dir=None) -> RunManifest:
    """Run the requested stages in pipeline order; stage errors end the run and are recorded."""
    store = Store(out_dir or config.out_dir)
    ctx = Context(config, store)
    store.write_json("config.resolved.json", config.as_dict())
    manifest = RunManifest(config.digest())
    if store.exists("manifest.json"):
        old = store.read_json("manifest.json")
        if old.get("config_hash") == manifest.config_hash:
            manifest.stages = old.get("stages", {})
    for name in _order(stages):
        need = REQUIRES.get(name)
        if need and not store.exists(STAGE_MARKER[need]):
            manifest.artifacts = store.listing()
            store.write_json("manifest.json", manifest.as_dict())
            raise StageError(name, f"requires {need} artifact", f"run the {need} stage first")
        log.info("stage %s", name)
        t0 = time.perf_counter()
        try:
            summary = STAGE_FUNCS[name](ctx)
        except QsumError as exc:
            code = 2 if isinstance(exc, CONFIG_ERRORS) or (
                isinstance(exc, StageError) and exc.stage == "validate") else 1
            manifest.stages[name] = {"status": "error", "error": str(exc), "exit_code": code,
                                     "wall_s": time.perf_counter() - t0}
            manifest.artifacts = store.listing()
            store.write_json("manifest.json", manifest.as_dict())
            if isinstance(exc, StageError):
                raise
            raise StageError(name, f"{type(exc).__name__}: {exc}", exc.hint) from exc
        store.write_json(STAGE_MARKER[name], {"stage": name, "summary": summary})
        manifest.stages[name] = {"status": summary["status"], "exit_code": 0 if summary["status"] == "pass" else 1,
                                 "wall_s": time.perf_counter() - t0}
    manifest.artifacts = store.listing()
    store.write_json("manifest.json", manifest.as_dict())
    return manifest


def _exit_code_for(exc: StageError) -> int:
    cause = exc.__cause__
    if exc.stage == "validate" or isinstance(cause, CONFIG_ERRORS) or "requires" in str(exc):
        return 2
    return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qsum", description="two-level q-Borel-Laplace summation pipeline")
    ap.add_argument("command", choices=list(STAGES) + ["all"])
    ap.add_argument("--config", default=None, help="YAML run config (default: bundled instance)")
    ap.add_argument("--out", default=None, help="artifact directory (overrides out_dir)")
    ap.add_argument("--tol", type=float, default=None, help="override solver.tol")
    ap.add_argument("--stages", default=None, help="comma-separated stage list (overrides command)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config or bundled_config_path())
        if args.tol is not None:
            if not args.tol > 0:
                raise SchemaError("--tol: tolerances must be positive")
            config.solver["tol"] = float(args.tol)
        if args.stages:
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        elif args.command == "all":
            stages = list(STAGES)
        else:
            stages = [args.command]
        limits = None
        if _threads:
            try:
                from threadpoolctl import threadpool_limits
                limits = threadpool_limits(int(_threads))
            except ImportError:
                pass
        manifest = run_pipeline(config, stages, args.out)
        del limits
    except (ParseError, SchemaError) as exc:
        print(f"qsum: configuration error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"qsum: {exc}", file=sys.stderr)
        return _exit_code_for(exc)
    out = Path(args.out or config.out_dir)
    for name, st in manifest.stages.items():
        print(f"{name:9s} {st['status']}")
    print(f"manifest: {out / 'manifest.json'}")
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
