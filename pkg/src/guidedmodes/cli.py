"""Command-line pipeline: mesh -> assemble -> solve -> verify -> report.

Every stage reads the artifacts of the previous one from the output directory
and writes its own; ``run`` chains all of them.  Outputs are deterministic:
fixed orderings, CSV numbers in %.17e, JSON with sorted keys.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import __version__
from .forms import assemble_forms, read_coo, write_coo
from .geometry import CrossSectionMesh, GeometryError, MaterialConfig, build_rect_with_inclusion
from .modal import (basis_decay, completeness_residual, gram_system, helmholtz_split_1, helmholtz_split_2,
                    norm_identities, orthogonality_residuals, smooth_target, split_fields,
                    verify_pairing_recursion)
from .pencil import (DEFAULT_CLUSTER_TOL, DEFAULT_RESIDUAL_TOL, ModeChain, PencilCoefficients,
                     default_exclusion_tol, jordan_chains, linearize, sort_key)
from .spectra import certificates, in_accumulation_interval, low_spectrum
from .waves import build_transversal, longitudinal_residual, maxwell_residuals, trace_residuals, write_field_csv

log = logging.getLogger("guidedmodes")

STAGES = ("mesh", "assemble", "solve", "verify", "report")
CHECKS = ("eigen", "maxwell", "trace", "longitudinal", "localization", "pairing", "gram", "norms",
          "decay", "splits", "completeness")
MATRIX_FILES = ("K.coo", "A1.coo", "A2.coo", "S.coo")
STAGE_MODULE = {"mesh": "geometry", "assemble": "forms", "solve": "pencil", "verify": "waves/spectra/modal",
                "report": "cli"}


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    outer: tuple = (math.pi, math.pi)                  # width, height of [0, w] x [0, h]
    inclusion: tuple = (math.pi / 4, math.pi / 4, math.pi / 2, math.pi / 2)
    eps1: float = 1.0                                  # outer region
    eps2: float = 4.0                                  # inclusion
    mesh_h: float = math.pi / 16
    residual_tol: float = DEFAULT_RESIDUAL_TOL
    cluster_tol: float = DEFAULT_CLUSTER_TOL
    exclusion_tol: float | None = None
    modes: int = 10
    method: str = "auto"
    residual_constant: float = 0.1                     # C in the C*h bounds
    trace_constant: float = 1.0
    roundoff_tol: float = 1e-8
    decay_slack: float = 0.05
    split_samples: int = 10
    completeness_threshold: float | None = None
    checks: tuple = CHECKS
    write_modes: bool = True
    output: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        kw = {}
        geo = d.pop("geometry", {})
        if "outer" in geo:
            kw["outer"] = tuple(float(x) for x in geo["outer"])
        if "inclusion" in geo:
            kw["inclusion"] = tuple(float(x) for x in geo["inclusion"])
        mats = d.pop("materials", {})
        for k in ("eps1", "eps2"):
            if k in mats:
                kw[k] = float(mats[k])
        solver = d.pop("solver", {})
        for k in ("residual_tol", "cluster_tol", "exclusion_tol", "modes", "method"):
            if k in solver:
                kw[k] = solver[k]
        diag = d.pop("diagnostics", {})
        for k in ("residual_constant", "trace_constant", "roundoff_tol", "decay_slack", "split_samples",
                  "completeness_threshold", "write_modes"):
            if k in diag:
                kw[k] = diag[k]
        if "checks" in diag:
            kw["checks"] = tuple(diag["checks"])
        for k in ("mesh_h", "output"):
            if k in d:
                kw[k] = d.pop(k)
        unknown = set(d) - {"comment"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "geometry": {"outer": list(self.outer), "inclusion": list(self.inclusion)},
            "materials": {"eps1": self.eps1, "eps2": self.eps2},
            "mesh_h": self.mesh_h,
            "solver": {"residual_tol": self.residual_tol, "cluster_tol": self.cluster_tol,
                       "exclusion_tol": self.exclusion_tol, "modes": self.modes, "method": self.method},
            "diagnostics": {"residual_constant": self.residual_constant, "trace_constant": self.trace_constant,
                            "roundoff_tol": self.roundoff_tol, "decay_slack": self.decay_slack,
                            "split_samples": self.split_samples,
                            "completeness_threshold": self.completeness_threshold,
                            "write_modes": self.write_modes, "checks": list(self.checks)},
            "output": self.output,
        }

    def validate(self):
        if len(self.outer) != 2 or len(self.inclusion) != 4:
            raise ValueError("geometry.outer needs [width, height] and geometry.inclusion [x0, y0, x1, y1]")
        for name in ("residual_tol", "cluster_tol", "residual_constant", "trace_constant", "roundoff_tol",
                     "mesh_h"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.exclusion_tol is not None and not self.exclusion_tol > 0:
            raise ValueError("exclusion_tol must be > 0")
        if int(self.modes) < 1:
            raise ValueError("solver.modes must be >= 1")
        bad = set(self.checks) - set(CHECKS)
        if bad:
            raise ValueError(f"unknown checks {sorted(bad)}; known: {list(CHECKS)}")
        MaterialConfig(self.eps1, self.eps2)

    @property
    def materials(self) -> MaterialConfig:
        return MaterialConfig(self.eps1, self.eps2)

    @property
    def outer_rect(self):
        return (0.0, 0.0, float(self.outer[0]), float(self.outer[1]))


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


# formatting helpers

def _f(x) -> str:
    return f"{float(x):.17e}"


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _clean(o):
    """Replace non-finite floats so that the JSON stays standard."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)):
        v = float(o)
        return v if math.isfinite(v) else str(v)
    if isinstance(o, complex):
        return [_clean(o.real), _clean(o.imag)]
    return o


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class DiagnosticsReport:
    """Named invariants with pass/fail verdicts plus free-form sections."""

    def __init__(self):
        self.sections = {}
        self.assertions = []

    def check(self, invariant: str, passed: bool, value=None, bound=None, detail=None):
        entry = {"invariant": invariant, "passed": bool(passed), "value": value, "bound": bound}
        if detail is not None:
            entry["detail"] = detail
        self.assertions.append(entry)
        return passed

    @property
    def failures(self):
        return [a for a in self.assertions if not a["passed"]]

    def to_dict(self):
        return {"assertions": self.assertions, "sections": self.sections,
                "n_failures": len(self.failures)}


# stages

def _require(out, names, stage):
    missing = [n for n in names if not os.path.exists(os.path.join(out, n))]
    if missing:
        raise StageError(stage, f"missing upstream artifacts: {', '.join(missing)}")


def stage_mesh(cfg: RunConfig, out: str):
    try:
        mesh = build_rect_with_inclusion(cfg.outer_rect, tuple(cfg.inclusion), float(cfg.mesh_h))
    except GeometryError as exc:
        raise StageError("mesh", f"geometry precondition failed: {exc}") from exc
    with open(os.path.join(out, "mesh.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(mesh.to_json())
    return mesh


def _load_mesh(out, stage):
    _require(out, ["mesh.json"], stage)
    with open(os.path.join(out, "mesh.json"), encoding="utf-8") as fh:
        return CrossSectionMesh.from_json(fh.read())


def stage_assemble(cfg: RunConfig, out: str):
    mesh = _load_mesh(out, "assemble")
    F = assemble_forms(mesh, cfg.materials)
    mdir = os.path.join(out, "matrices")
    os.makedirs(mdir, exist_ok=True)
    for name in ("K", "A1", "A2", "S"):
        write_coo(os.path.join(mdir, f"{name}.coo"), F.nodal[name])
    write_json(os.path.join(mdir, "meta.json"), {
        "n_nodes": mesh.n_nodes, "n_pi": F.n_pi, "n": F.n, "eliminated_node": F.eliminated_node,
        "eps1": cfg.eps1, "eps2": cfg.eps2, "layout": "nodal (Pi on interior nodes, Psi on all nodes)"})
    return F


def _load_forms(cfg: RunConfig, out: str, stage: str):
    mesh = _load_mesh(out, stage)
    _require(out, [os.path.join("matrices", n) for n in MATRIX_FILES], stage)
    F = assemble_forms(mesh, cfg.materials)
    nodal = {n: read_coo(os.path.join(out, "matrices", f"{n}.coo")) for n in ("K", "A1", "A2", "S")}
    for n, M in nodal.items():
        if M.shape != F.nodal[n].shape:
            raise StageError(stage, f"matrix {n}.coo has shape {M.shape}, expected {F.nodal[n].shape}")
    return mesh, replace(F, nodal=nodal)


def _flag(g, materials, exclusion_tol):
    if any(abs(complex(g) ** 2 - e) < exclusion_tol for e in (materials.eps1, materials.eps2)):
        return "degenerate"
    if in_accumulation_interval(g, materials):
        return "interval"
    return "kept"


def stage_solve(cfg: RunConfig, out: str):
    mesh, F = _load_forms(cfg, out, "solve")
    mats = cfg.materials
    pair = linearize(F)
    excl = cfg.exclusion_tol if cfg.exclusion_tol is not None else default_exclusion_tol(mats)
    low, found = low_spectrum(pair, mats, int(cfg.modes), tol=cfg.residual_tol, exclusion_tol=excl,
                              method=cfg.method, return_all=True)
    chains = jordan_chains(low, F, cluster_tol=cfg.cluster_tol, tol=cfg.residual_tol)
    # chain index per selected eigenvalue
    chain_of = {}
    for ci, c in enumerate(chains):
        for g in c.members:
            chain_of.setdefault(complex(g), ci)
    selected = {id(p) for p in low}
    rows = []
    for p in sorted(found, key=lambda p: sort_key(p.gamma)):
        flag = _flag(p.gamma, mats, excl)
        if flag == "kept" and id(p) not in selected:
            flag = "beyond"
        ci = chain_of.get(complex(p.gamma), -1) if id(p) in selected else -1
        cid = chains[ci].cluster_id if ci >= 0 else -1
        rows.append([_f(p.gamma.real), _f(p.gamma.imag), _f(p.residual), cid, ci, flag])
    _write_csv(os.path.join(out, "spectrum.csv"),
               ["gamma_re", "gamma_im", "residual", "cluster_id", "chain_index", "filtered_flag"], rows)
    crow = []
    for ci, c in enumerate(chains):
        for p, vec in enumerate(c.chain):
            for j, v in enumerate(vec):
                crow.append([ci, p, j, _f(v.real), _f(v.imag)])
    _write_csv(os.path.join(out, "chains.csv"), ["chain_index", "p", "dof", "re", "im"], crow)
    write_json(os.path.join(out, "chains.json"), [
        {"chain_index": ci, "gamma": [c.gamma.real, c.gamma.imag], "length": c.length,
         "residuals": [float(r) for r in c.residuals], "cluster_id": c.cluster_id,
         "algebraic_multiplicity": c.algebraic_multiplicity,
         "geometric_multiplicity": c.geometric_multiplicity, "truncated": c.truncated,
         "members": [[complex(g).real, complex(g).imag] for g in c.members]} for ci, c in enumerate(chains)])
    return chains


def _load_chains(out: str, F, stage: str):
    _require(out, ["chains.json", "chains.csv", "spectrum.csv"], stage)
    meta = _read_json(os.path.join(out, "chains.json"))
    data = np.loadtxt(os.path.join(out, "chains.csv"), delimiter=",", skiprows=1, ndmin=2)
    chains = []
    for m in meta:
        ci = m["chain_index"]
        vecs = []
        for p in range(m["length"]):
            sel = (data[:, 0] == ci) & (data[:, 1] == p)
            d = data[sel]
            v = np.zeros(F.n, complex)
            v[d[:, 2].astype(int)] = d[:, 3] + 1j * d[:, 4]
            vecs.append(v)
        chains.append(ModeChain(complex(*m["gamma"]), vecs, m["residuals"], m["cluster_id"],
                                m["algebraic_multiplicity"], m["geometric_multiplicity"], m["truncated"],
                                tuple(complex(*g) for g in m["members"])))
    spectrum_rows = []
    with open(os.path.join(out, "spectrum.csv"), encoding="ascii") as fh:
        for row in csv.DictReader(fh):
            spectrum_rows.append(row)
    return chains, spectrum_rows


def _max(vals):
    vals = [v for v in vals if v is not None]
    return float(max(vals)) if vals else 0.0


def stage_verify(cfg: RunConfig, out: str, only=None):
    mesh, F = _load_forms(cfg, out, "verify")
    chains, spectrum_rows = _load_chains(out, F, "verify")
    mats = cfg.materials
    h = float(cfg.mesh_h)
    C = cfg.residual_constant
    checks = [c for c in cfg.checks if only is None or c in only]
    rep = DiagnosticsReport()
    fields = [build_transversal(c, mesh, mats, F) for c in chains]

    if "eigen" in checks:
        coef = PencilCoefficients.from_forms(F)
        vals = [coef.residual(c.gamma, c.chain[0]) for c in chains]
        rep.sections["eigen"] = {"residuals": vals}
        rep.check("pencil.eigen_residual", _max(vals) <= cfg.residual_tol, _max(vals), cfg.residual_tol)
        chain_res = [r for c in chains for r in c.residuals]
        rep.check("pencil.chain_residual", _max(chain_res) <= cfg.residual_tol, _max(chain_res), cfg.residual_tol)

    if "maxwell" in checks:
        entries = [e for fs in fields for e in maxwell_residuals(fs, mesh, mats, F)]
        rep.sections["maxwell"] = entries
        exact = _max(max(e[k] for k in ("eq_a", "eq_b", "eq_d", "eq_e", "weak_first", "weak_second"))
                     for e in entries)
        smooth = _max(e["smooth_max"] for e in entries)
        rep.check("waves.maxwell_discrete", exact <= cfg.roundoff_tol, exact, cfg.roundoff_tol)
        rep.check("waves.maxwell_smooth", smooth <= C * h, smooth, C * h)

    if "trace" in checks:
        entries = [e for fs in fields for e in trace_residuals(fs, mesh, mats)]
        rep.sections["trace"] = entries
        outer = _max(max(e["E_tau_outer"], e["H_n_outer"]) for e in entries)
        rep.check("waves.outer_traces", outer <= cfg.trace_constant * h, outer, cfg.trace_constant * h)

    if "longitudinal" in checks:
        entries = [dict(e, chain=i) for i, fs in enumerate(fields) for e in longitudinal_residual(fs, mesh, mats, F)]
        rep.sections["longitudinal"] = entries
        worst = _max(v for e in entries for k, v in e.items()
                     if k.endswith(("region1", "region2")) and v is not None)
        rep.check("waves.longitudinal", worst <= cfg.roundoff_tol, worst, cfg.roundoff_tol)

    cert = None
    if "localization" in checks:
        gammas = [complex(float(r["gamma_re"]), float(r["gamma_im"])) for r in spectrum_rows
                  if r["filtered_flag"] != "degenerate"]
        cert = certificates(mats, F, gammas)
        write_json(os.path.join(out, "certificates.json"), cert)
        loc = cert["localization"]
        if loc.get("certified"):
            rep.check("spectra.localization", loc["n_violations"] == 0, loc["n_violations"], 0)

    if "pairing" in checks and len(fields) > 1:
        orth = orthogonality_residuals(fields, mesh, cfg.cluster_tol)
        rec = [float(verify_pairing_recursion(a, b, mesh).max()) for a in fields for b in fields]
        sesq = orthogonality_residuals(fields, mesh, cfg.cluster_tol, conjugate=True)
        worst = _max(o[4] for o in orth)
        rep.sections["pairing"] = {"bilinear_orthogonality_max": worst, "recursion_max": _max(rec),
                                   "sesquilinear_orthogonality_max": _max(o[4] for o in sesq)}
        rep.check("modal.orthogonality", worst <= C * h, worst, C * h)
        rep.check("modal.recursion", _max(rec) <= C * h, _max(rec), C * h)

    if "gram" in checks and fields:
        gs = gram_system(fields, mesh, cfg.cluster_tol)
        rows = []
        for k, b in enumerate(gs.blocks):
            for i, (ci, p) in enumerate(b.members):
                for j, (cj, q) in enumerate(b.members):
                    rows.append([k, ci, p, cj, q, _f(b.G[i, j].real), _f(b.G[i, j].imag),
                                 _f(b.cond), "" if b.identity_residual is None else _f(b.identity_residual)])
        _write_csv(os.path.join(out, "gram.csv"),
                   ["group", "chain_row", "p_row", "chain_col", "p_col", "G_re", "G_im", "cond", "GA_residual"],
                   rows)
        rep.sections["gram"] = {"blocks": len(gs.blocks), "unconditioned": sum(not b.conditioned for b in gs.blocks),
                                "max_identity_residual": gs.max_identity_residual,
                                "cross_group_max": gs.cross_residual}
        rep.check("modal.gram_identity", gs.max_identity_residual <= 1e-10, gs.max_identity_residual, 1e-10)

    if "norms" in checks:
        entries = [dict(norm_identities(fs[0], mesh, mats), chain=i) for i, fs in enumerate(fields)
                   if chains[i].algebraic_multiplicity == 1]
        rep.sections["norms"] = entries
        val = _max(e["value_residual"] for e in entries)
        en = _max(e["energy_residual"] for e in entries)
        rep.check("modal.norm_value", val <= 2 * C * h, val, 2 * C * h)
        rep.check("modal.norm_energy", en <= 2 * C * h, en, 2 * C * h)

    if "decay" in checks:
        simple = [fs[0] for i, fs in enumerate(fields) if chains[i].algebraic_multiplicity == 1]
        bd = basis_decay(simple, mesh, mats, slack=cfg.decay_slack)
        _write_csv(os.path.join(out, "decay.csv"), ["gamma_re", "gamma_im", "abs_gamma", "abs_N", "bound"],
                   [[_f(r["gamma"].real), _f(r["gamma"].imag), _f(r["abs_gamma"]), _f(r["abs_N"]), _f(r["bound"])]
                    for r in bd["rows"]])
        rep.sections["decay"] = {k: v for k, v in bd.items() if k != "rows"}
        if bd["asserted"]:
            rep.check("modal.decay_bound", bd["all_within_bound"],
                      _max(r["abs_N"] / r["bound"] for r in bd["rows"]), 1 + cfg.decay_slack)

    if "splits" in checks:
        first, second, ops = split_fields(mesh, mats)
        rng = np.random.default_rng(0)
        worst = [0.0, 0.0]
        for _ in range(int(cfg.split_samples)):
            f0 = np.zeros(mesh.n_nodes, complex)
            f0[ops.interior] = rng.standard_normal(len(ops.interior)) + 1j * rng.standard_normal(len(ops.interior))
            g0 = ops.zero_mean(rng.standard_normal(mesh.n_nodes) + 1j * rng.standard_normal(mesh.n_nodes))
            for k, (build, split) in enumerate(((first, helmholtz_split_1), (second, helmholtz_split_2))):
                f, g, _ = split(build(f0, g0), mesh, mats)
                err = max(np.linalg.norm(f - f0) / np.linalg.norm(f0), np.linalg.norm(g - g0) / np.linalg.norm(g0))
                worst[k] = max(worst[k], float(err))
        rep.sections["splits"] = {"first": worst[0], "second": worst[1]}
        rep.check("modal.split_first", worst[0] <= 1e-10, worst[0], 1e-10)
        rep.check("modal.split_second", worst[1] <= 1e-10, worst[1], 1e-10)

    if "completeness" in checks and fields:
        ordered = sorted(range(len(fields)), key=lambda i: (abs(chains[i].gamma), sort_key(chains[i].gamma)))
        members = [f for i in ordered for f in fields[i]]
        res, flags = completeness_residual(smooth_target(mesh, mats), members, mesh)
        _write_csv(os.path.join(out, "completeness.csv"), ["M", "residual"],
                   [[M, _f(r)] for M, r in enumerate(res)])
        rep.sections["completeness"] = {"final": float(res[-1]), "rank_flags": flags}
        mono = bool(np.all(np.diff(res) <= 1e-12))
        rep.check("modal.completeness_monotone", mono, float(np.max(np.diff(res))) if len(res) > 1 else 0.0, 1e-12)
        if cfg.completeness_threshold is not None:
            rep.check("modal.completeness_threshold", res[-1] <= cfg.completeness_threshold,
                      float(res[-1]), cfg.completeness_threshold)

    if cfg.write_modes and (only is None or "modes" in (only or ())):
        mdir = os.path.join(out, "modes")
        os.makedirs(mdir, exist_ok=True)
        for i, fs in enumerate(fields):
            for f in fs:
                write_field_csv(os.path.join(mdir, f"mode_{i:03d}_p{f.p}.csv"), f, mesh)

    write_json(os.path.join(out, "residuals.json"), rep.to_dict())
    return rep


def stage_report(cfg: RunConfig, out: str):
    _require(out, ["residuals.json"], "report")
    res = _read_json(os.path.join(out, "residuals.json"))
    cert = _read_json(os.path.join(out, "certificates.json")) if os.path.exists(
        os.path.join(out, "certificates.json")) else None
    lines = [f"guidedmodes {__version__} report", ""]
    lines.append(f"materials: eps1 = {cfg.eps1:g} (outer), eps2 = {cfg.eps2:g} (inclusion); h = {cfg.mesh_h:.6g}")
    if os.path.exists(os.path.join(out, "chains.json")):
        ch = _read_json(os.path.join(out, "chains.json"))
        lines.append(f"chains: {len(ch)}")
        for c in ch:
            g = complex(*c["gamma"])
            lines.append(f"  [{c['chain_index']:3d}] gamma = {g.real:+.10f} {g.imag:+.10f}i  length {c['length']}")
    lines.append("")
    lines.append("assertions:")
    for a in res["assertions"]:
        mark = "PASS" if a["passed"] else "FAIL"
        lines.append(f"  {mark}  {a['invariant']}: value {a['value']!s} bound {a['bound']!s}")
    if cert is not None:
        lines.append("")
        lines.append(f"condition (eps_max < 9 eps_min): {cert['condition43']}")
        lines.append(f"condition (Rayleigh quotient <= 1/2): {cert['condition44']}")
        loc = cert["localization"]
        lines.append(f"localization: {loc.get('status')}, violations {len(loc.get('violations', []))}")
    lines.append("")
    lines.append(f"failures: {res['n_failures']}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return text


def _manifest(out, status):
    files = []
    for root, _, names in os.walk(out):
        for n in names:
            rel = os.path.relpath(os.path.join(root, n), out)
            if rel != "manifest.json":
                files.append(rel.replace(os.sep, "/"))
    status["files"] = sorted(files)
    write_json(os.path.join(out, "manifest.json"), status)


def run(cfg: RunConfig, out: str | None = None, stages=STAGES, only=None) -> int:
    """Run the requested stages; returns the exit status (0 iff all enabled assertions pass)."""
    out = out or cfg.output
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "config.json"), cfg.to_dict())
    status = {"version": __version__, "stages": [], "error": None, "failures": []}
    code = 0
    funcs = {"mesh": stage_mesh, "assemble": stage_assemble, "solve": stage_solve,
             "verify": lambda c, o: stage_verify(c, o, only), "report": stage_report}
    for st in stages:
        t0 = time.perf_counter()
        try:
            result = funcs[st](cfg, out)
        except Exception as exc:  # surfaced with module and stage, partial outputs kept
            msg = str(exc) if isinstance(exc, StageError) else f"[{st}] {type(exc).__name__}: {exc}"
            status["error"] = {"stage": st, "module": STAGE_MODULE[st], "message": msg}
            log.error("%s (module %s)", msg, STAGE_MODULE[st])
            code = 2
            break
        log.info("stage %s done in %.2f s", st, time.perf_counter() - t0)
        status["stages"].append(st)
        if st == "verify":
            status["failures"] = [a["invariant"] for a in result.failures]
            for a in result.failures:
                log.error("assertion failed: %s (value %s, bound %s)", a["invariant"], a["value"], a["bound"])
            if result.failures:
                code = 1
    if code == 0 and "verify" not in stages and os.path.exists(os.path.join(out, "residuals.json")):
        failures = _read_json(os.path.join(out, "residuals.json"))["n_failures"]
        code = 1 if failures and "report" in stages else 0
    _manifest(out, status)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guidedmodes", description="Normal-wave modal solver and verification suite.")
    p.add_argument("command", nargs="?", choices=STAGES + ("run",), help="stage to run (default: run all)")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--stage", choices=STAGES + ("run",), help="same as the positional command")
    p.add_argument("--only", action="append", choices=CHECKS + ("modes",),
                   help="restrict verify to these checks (repeatable)")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    p.add_argument("--version", action="version", version=__version__)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError, GeometryError) as exc:
        log.error("[config] %s", exc)
        return 2
    if args.command and args.stage and args.command != args.stage:
        log.error("conflicting stage names %r and %r", args.command, args.stage)
        return 2
    cmd = args.command or args.stage or "run"
    stages = STAGES if cmd == "run" else (cmd,)
    code = run(cfg, args.out, stages, tuple(args.only) if args.only else None)
    if not args.quiet and "report" in stages and code != 2:
        with open(os.path.join(args.out or cfg.output, "summary.txt"), encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
    return code


if __name__ == "__main__":
    sys.exit(main())
