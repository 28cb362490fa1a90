"""Eigenwaves and associated waves built from longitudinal chains, and their checks.

Transversal components are piecewise constant (they come from gradients of P1
longitudinal fields).  With k2 = eps - gamma^2 in each region and primes
denoting the previous chain member (zero for p = 0):

    E1 = (i g/k2)(Pi_x - i E1') - (i/k2)(Psi_y - i H2')
    E2 = (i g/k2)(Pi_y - i E2') + (i/k2)(Psi_x - i H1')
    H1 = (i eps/k2)(Pi_y - i E2') + (i g/k2)(Psi_x - i H1')
    H2 = -(i eps/k2)(Pi_x - i E1') + (i g/k2)(Psi_y - i H2')

Rotated gradient: rot(f) = (f_y, -f_x).  Interface traces use the tangent
tau running counterclockwise around the inclusion, the normal nu pointing into
the inclusion, and jumps [u] = u(inclusion) - u(outer region).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import FormMatrices, triangle_gradients
from .geometry import CrossSectionMesh, MaterialConfig
from .pencil import ModeChain, default_exclusion_tol


class DegenerationError(ValueError):
    """k2 = eps - gamma^2 vanishes (to tolerance) in some region."""


@dataclass(frozen=True, eq=False)
class TransversalField:
    gamma: complex
    p: int
    E: np.ndarray          # (T, 2) complex, per triangle
    H: np.ndarray          # (T, 2) complex, per triangle
    Pi: np.ndarray         # (N,) nodal
    Psi: np.ndarray        # (N,) nodal
    ktilde2: tuple         # (eps1 - g^2, eps2 - g^2)

    @property
    def transversal(self) -> np.ndarray:
        """(T, 4) array (E1, E2, H1, H2)."""
        return np.concatenate([self.E, self.H], axis=1)

    def scaled(self, c) -> "TransversalField":
        return replace(self, E=c * self.E, H=c * self.H, Pi=c * self.Pi, Psi=c * self.Psi)


class _Geo:
    """Per-mesh cached geometric data."""

    def __init__(self, mesh: CrossSectionMesh):
        self.mesh = mesh
        self.area, self.grads = triangle_gradients(mesh.nodes[mesh.triangles])
        self.rot = np.stack([self.grads[..., 1], -self.grads[..., 0]], axis=-1)


_GEO_CACHE: dict = {}


def _geo(mesh) -> _Geo:
    g = _GEO_CACHE.get(id(mesh))
    if g is None or g.mesh is not mesh:
        g = _Geo(mesh)
        _GEO_CACHE.clear()
        _GEO_CACHE[id(mesh)] = g
    return g


def p1_gradient(values, mesh: CrossSectionMesh) -> np.ndarray:
    """Per-triangle gradient (T, 2) of a nodal P1 field."""
    g = _geo(mesh)
    return np.einsum("tk,tkd->td", np.asarray(values)[mesh.triangles], g.grads)


def transversal_step(Pi, Psi, gamma, mesh, materials, prev_E=None, prev_H=None, exclusion_tol=None):
    """One step of the recursion: nodal (Pi, Psi) plus previous fields -> (E, H)."""
    tol = default_exclusion_tol(materials) if exclusion_tol is None else exclusion_tol
    g = complex(gamma)
    k2 = (materials.eps1 - g * g, materials.eps2 - g * g)
    if min(abs(k2[0]), abs(k2[1])) < tol:
        raise DegenerationError(f"gamma^2 = {g * g:.6g} is a degeneration point (eps - gamma^2 ~ 0)")
    eps = materials.region_eps(mesh.tags)
    kt = np.where(mesh.tags == 2, k2[1], k2[0])
    gp = p1_gradient(Pi, mesh)
    gs = p1_gradient(Psi, mesh)
    T = mesh.n_triangles
    pE = np.zeros((T, 2), complex) if prev_E is None else prev_E
    pH = np.zeros((T, 2), complex) if prev_H is None else prev_H
    ax = gp[:, 0] - 1j * pE[:, 0]
    ay = gp[:, 1] - 1j * pE[:, 1]
    bx = gs[:, 0] - 1j * pH[:, 0]
    by = gs[:, 1] - 1j * pH[:, 1]
    E = np.column_stack([1j * g / kt * ax - 1j / kt * by, 1j * g / kt * ay + 1j / kt * bx])
    H = np.column_stack([1j * eps / kt * ay + 1j * g / kt * bx, -1j * eps / kt * ax + 1j * g / kt * by])
    return E, H, k2


def build_transversal(chain: ModeChain, mesh: CrossSectionMesh, materials: MaterialConfig,
                      matrices: FormMatrices, exclusion_tol=None):
    """TransversalField for every member p = 0..m of a chain."""
    out = []
    pE = pH = None
    for p, f in enumerate(chain.chain):
        Pi, Psi = matrices.expand(f)
        E, H, k2 = transversal_step(Pi, Psi, chain.gamma, mesh, materials, pE, pH, exclusion_tol)
        out.append(TransversalField(complex(chain.gamma), p, E, H, Pi, Psi, k2))
        pE, pH = E, H
    return out


def solve_first_order_system(Pi, Psi, gamma, mesh, materials, prev_E=None, prev_H=None):
    """Oracle: solve the four algebraic first-order equations per triangle for (E, H).

    Unknown order (E1, E2, H1, H2); rows are
        Psi_y - i g H2 - i eps E1 = i H2'
        i g H1 - Psi_x - i eps E2 = -i H1'
        Pi_y - i g E2 + i H1      = i E2'
        i g E1 - Pi_x + i H2      = -i E1'
    """
    g = complex(gamma)
    eps = materials.region_eps(mesh.tags).astype(complex)
    gp = p1_gradient(Pi, mesh)
    gs = p1_gradient(Psi, mesh)
    T = mesh.n_triangles
    pE = np.zeros((T, 2), complex) if prev_E is None else prev_E
    pH = np.zeros((T, 2), complex) if prev_H is None else prev_H
    A = np.zeros((T, 4, 4), complex)
    A[:, 0, 0] = -1j * eps
    A[:, 0, 3] = -1j * g
    A[:, 1, 1] = -1j * eps
    A[:, 1, 2] = 1j * g
    A[:, 2, 1] = -1j * g
    A[:, 2, 2] = 1j
    A[:, 3, 0] = 1j * g
    A[:, 3, 3] = 1j
    rhs = np.column_stack([1j * pH[:, 1] - gs[:, 1], -1j * pH[:, 0] + gs[:, 0],
                           1j * pE[:, 1] - gp[:, 1], -1j * pE[:, 0] + gp[:, 0]])
    x = np.linalg.solve(A, rhs[..., None])[..., 0]
    return x[:, :2], x[:, 2:]


def field_energy(field: TransversalField, mesh, materials) -> float:
    """Integral of eps|E_t|^2 + |H_t|^2 + eps|Pi|^2 + |Psi|^2."""
    g = _geo(mesh)
    eps = materials.region_eps(mesh.tags)
    trans = np.sum(g.area * (eps * np.sum(np.abs(field.E) ** 2, axis=1) + np.sum(np.abs(field.H) ** 2, axis=1)))
    tri = mesh.triangles

    def sq(u):
        v = u[tri]
        return g.area / 12.0 * (np.sum(np.abs(v) ** 2, axis=1) + np.abs(v.sum(axis=1)) ** 2)

    return float(trans + np.sum(eps * sq(field.Pi) + sq(field.Psi)))


def transversal_energy(field: TransversalField, mesh, materials) -> float:
    g = _geo(mesh)
    eps = materials.region_eps(mesh.tags)
    return float(np.sum(g.area * (eps * np.sum(np.abs(field.E) ** 2, axis=1)
                                  + np.sum(np.abs(field.H) ** 2, axis=1))))


def _scatter(mesh, per_vertex):
    """Sum (T, 3) per-vertex contributions into a nodal vector."""
    return np.bincount(mesh.triangles.ravel(), weights=per_vertex.real.ravel(), minlength=mesh.n_nodes) + \
        1j * np.bincount(mesh.triangles.ravel(), weights=per_vertex.imag.ravel(), minlength=mesh.n_nodes)


def weak_identity_vectors(field: TransversalField, prev: TransversalField | None, mesh, materials,
                          matrices: FormMatrices):
    """Residuals of the two weak identities against every P1 hat function.

    Returns dict of nodal residual vectors:
      'curl_E'  : i int E.rot(g) - int Psi g              (all nodes g)
      'curl_H'  : -i int H.rot(f) - int eps Pi f          (interior nodes f)
      'div_E'   : -i int eps E.grad f - g int eps Pi f - int eps Pi' f   (interior f)
      'div_H'   : -i int H.grad g - g int Psi g - int Psi' g              (all g)
    'curl_E' and 'curl_H' are the (g, 0) and (0, f) parts of the first identity,
    'div_E' and 'div_H' those of the second.
    """
    geo = _geo(mesh)
    eps = materials.region_eps(mesh.tags)
    gam = field.gamma
    Meps = matrices.mass_region[0] * materials.eps1 + matrices.mass_region[1] * materials.eps2
    M = matrices.mass
    Erot = np.einsum("td,tkd->tk", field.E, geo.rot) * geo.area[:, None]
    Hrot = np.einsum("td,tkd->tk", field.H, geo.rot) * geo.area[:, None]
    Egrad = np.einsum("td,tkd->tk", field.E, geo.grads) * (geo.area * eps)[:, None]
    Hgrad = np.einsum("td,tkd->tk", field.H, geo.grads) * geo.area[:, None]
    pPi = np.zeros_like(field.Pi) if prev is None else prev.Pi
    pPsi = np.zeros_like(field.Psi) if prev is None else prev.Psi
    interior = matrices.dofs.pi_nodes
    return {
        "curl_E": 1j * _scatter(mesh, Erot) - M @ field.Psi,
        "curl_H": (-1j * _scatter(mesh, Hrot) - Meps @ field.Pi)[interior],
        "div_E": (-1j * _scatter(mesh, Egrad) - gam * (Meps @ field.Pi) - Meps @ pPi)[interior],
        "div_H": -1j * _scatter(mesh, Hgrad) - gam * (M @ field.Psi) - M @ pPsi,
    }


class _DualNorm:
    """Norm sqrt(r^H M^{-1} r) of functionals on a subset of P1 hats."""

    def __init__(self, M, idx=None):
        Ms = M if idx is None else M[idx][:, idx]
        self.lu = spla.splu(sp.csc_matrix(Ms))

    def __call__(self, r):
        r = np.asarray(r, dtype=complex)
        x = self.lu.solve(r.real) + 1j * self.lu.solve(r.imag)
        return float(np.sqrt(abs(np.vdot(r, x))))


def _dual_norms(matrices):
    cache = matrices.__dict__.setdefault("_dual_norm_cache", {})
    if "all" not in cache:
        cache["all"] = _DualNorm(matrices.mass)
        cache["interior"] = _DualNorm(matrices.mass, matrices.dofs.pi_nodes)
    return cache["all"], cache["interior"]


def maxwell_residuals(fields, mesh: CrossSectionMesh, materials: MaterialConfig, matrices: FormMatrices,
                      smooth_tests: bool = True):
    """Energy-normalized residuals of the componentwise first-order system and the weak identities.

    Algebraic equations (piecewise constant) are measured in L2; curl equations
    and the two weak identities in the L2-dual norm over P1 hats.  With
    ``smooth_tests`` the weak identities are also tested against smooth sine and
    cosine functions, which sees the discretization error.
    """
    geo = _geo(mesh)
    nall, nint = _dual_norms(matrices)
    eps = materials.region_eps(mesh.tags)
    report = []
    prev = None
    for f in fields:
        g = f.gamma
        scale = np.sqrt(field_energy(f, mesh, materials))
        gp = p1_gradient(f.Pi, mesh)
        gs = p1_gradient(f.Psi, mesh)
        pE = np.zeros_like(f.E) if prev is None else prev.E
        pH = np.zeros_like(f.H) if prev is None else prev.H
        E1, E2 = f.E[:, 0], f.E[:, 1]
        H1, H2 = f.H[:, 0], f.H[:, 1]
        alg = {
            "eq_a": gs[:, 1] - 1j * g * H2 - 1j * eps * E1 - 1j * pH[:, 1],
            "eq_b": 1j * g * H1 - gs[:, 0] - 1j * eps * E2 + 1j * pH[:, 0],
            "eq_d": gp[:, 1] - 1j * g * E2 + 1j * H1 - 1j * pE[:, 1],
            "eq_e": 1j * g * E1 - gp[:, 0] + 1j * H2 + 1j * pE[:, 0],
        }
        entry = {"gamma": [g.real, g.imag], "p": f.p, "scale": scale}
        for k, v in alg.items():
            entry[k] = float(np.sqrt(np.sum(geo.area * np.abs(v) ** 2)) / scale)
        w = weak_identity_vectors(f, prev, mesh, materials, matrices)
        entry["curl_E"] = nall(w["curl_E"]) / scale
        entry["curl_H"] = nint(w["curl_H"]) / scale
        entry["weak_first"] = float(np.hypot(entry["curl_E"], entry["curl_H"]))
        entry["weak_second"] = float(np.hypot(nint(w["div_E"]), nall(w["div_H"])) / scale)
        if smooth_tests:
            entry.update(smooth_weak_residuals(f, prev, mesh, materials))
        report.append(entry)
        prev = f
    return report


# Dunavant degree-5 rule on the reference triangle (barycentric points, weights sum to 1)
_Q5_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)
_a, _b = 0.059715871789770, 0.470142064105115
_c, _d = 0.797426985353087, 0.101286507323456
_Q5_B = np.array([[1 / 3, 1 / 3, 1 / 3], [_a, _b, _b], [_b, _a, _b], [_b, _b, _a],
                  [_c, _d, _d], [_d, _c, _d], [_d, _d, _c]])


def smooth_test_functions(mesh: CrossSectionMesh, order: int = 3):
    """Sine products (zero on the boundary) and zero-mean cosine products on the rectangle.

    Returns a list of (kind, value(x, y), grad(x, y), h1_norm) with kind 'f' or 'g'.
    """
    x0, y0, x1, y1 = mesh.outer
    W, Hh = x1 - x0, y1 - y0
    tests = []
    for a in range(0, order + 1):
        for b in range(0, order + 1):
            ka, kb = a * np.pi / W, b * np.pi / Hh
            if a >= 1 and b >= 1:
                def val(x, y, ka=ka, kb=kb):
                    return np.sin(ka * (x - x0)) * np.sin(kb * (y - y0))

                def grad(x, y, ka=ka, kb=kb):
                    return (ka * np.cos(ka * (x - x0)) * np.sin(kb * (y - y0)),
                            kb * np.sin(ka * (x - x0)) * np.cos(kb * (y - y0)))
                tests.append(("f", val, grad, np.sqrt(W * Hh / 4 * (1 + ka * ka + kb * kb))))
            if (a, b) != (0, 0):
                def val(x, y, ka=ka, kb=kb):
                    return np.cos(ka * (x - x0)) * np.cos(kb * (y - y0))

                def grad(x, y, ka=ka, kb=kb):
                    return (-ka * np.sin(ka * (x - x0)) * np.cos(kb * (y - y0)),
                            -kb * np.cos(ka * (x - x0)) * np.sin(kb * (y - y0)))
                c = (2 if a == 0 else 1) * (2 if b == 0 else 1)
                tests.append(("g", val, grad, np.sqrt(W * Hh / 4 * c * (1 + ka * ka + kb * kb))))
    return tests


def smooth_weak_residuals(field: TransversalField, prev: TransversalField | None, mesh, materials):
    """Max relative residual of the weak identities against smooth test functions.

    Relative to ||test||_H1 * sqrt(field energy).  These do not vanish at the
    discrete level and decrease under refinement.
    """
    geo = _geo(mesh)
    pts = np.einsum("qk,tkd->tqd", _Q5_B, mesh.nodes[mesh.triangles])
    wq = geo.area[:, None] * _Q5_W[None, :]
    eps = materials.region_eps(mesh.tags)[:, None]
    tri = mesh.triangles

    def at_q(u):
        return np.einsum("qk,tk->tq", _Q5_B, u[tri])

    Pi_q, Psi_q = at_q(field.Pi), at_q(field.Psi)
    pPi_q = at_q(prev.Pi) if prev is not None else 0.0
    pPsi_q = at_q(prev.Psi) if prev is not None else 0.0
    E, H = field.E[:, None, :], field.H[:, None, :]
    scale = np.sqrt(field_energy(field, mesh, materials))
    worst = {"smooth_curl_E": 0.0, "smooth_curl_H": 0.0, "smooth_div_E": 0.0, "smooth_div_H": 0.0}
    X, Y = pts[..., 0], pts[..., 1]
    for kind, val, grad, nrm in smooth_test_functions(mesh):
        v = val(X, Y)
        gx, gy = grad(X, Y)
        if kind == "g":
            # i int E.rot(g) - int Psi g ;  -i int H.grad g - gamma int Psi g - int Psi' g
            curl = np.sum(wq * (1j * (E[..., 0] * gy - E[..., 1] * gx) - Psi_q * v))
            div = np.sum(wq * (-1j * (H[..., 0] * gx + H[..., 1] * gy) - field.gamma * Psi_q * v - pPsi_q * v))
            worst["smooth_curl_E"] = max(worst["smooth_curl_E"], abs(curl) / (nrm * scale))
            worst["smooth_div_H"] = max(worst["smooth_div_H"], abs(div) / (nrm * scale))
        else:
            curl = np.sum(wq * (-1j * (H[..., 0] * gy - H[..., 1] * gx) - eps * Pi_q * v))
            div = np.sum(wq * (-1j * eps * (E[..., 0] * gx + E[..., 1] * gy)
                               - field.gamma * eps * Pi_q * v - eps * pPi_q * v))
            worst["smooth_curl_H"] = max(worst["smooth_curl_H"], abs(curl) / (nrm * scale))
            worst["smooth_div_E"] = max(worst["smooth_div_E"], abs(div) / (nrm * scale))
    worst["smooth_max"] = max(worst.values())
    return {k: float(v) for k, v in worst.items()}


def _edge_triangles(mesh):
    owners = {}
    for t, (a, b, c) in enumerate(mesh.triangles.tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            owners.setdefault((min(u, v), max(u, v)), []).append(t)
    return owners


def trace_residuals(fields, mesh: CrossSectionMesh, materials: MaterialConfig):
    """Edge RMS of boundary and interface conditions, divided by the field RMS.

    Outer boundary: E_tau and H_n.  Interface: jumps of E_tau and H_tau and the
    two jump identities [eps] E_tau = -i [dPsi/dnu], [eps] H_tau = i [eps dPi/dnu],
    with E_tau, H_tau taken as the two-sided average.  In the homogeneous case
    the jump identities are skipped and flagged.
    """
    geo = _geo(mesh)
    owners = _edge_triangles(mesh)
    P = mesh.nodes
    area_total = float(geo.area.sum())

    def edge_frame(edges):
        d = P[edges[:, 1]] - P[edges[:, 0]]
        ln = np.linalg.norm(d, axis=1)
        tau = d / ln[:, None]
        left = np.column_stack([-tau[:, 1], tau[:, 0]])
        return ln, tau, left

    lb, tb, leftb = edge_frame(mesh.outer_edges)
    tb_tri = np.array([owners[(min(a, b), max(a, b))][0] for a, b in mesh.outer_edges.tolist()])
    li, ti, nui = edge_frame(mesh.interface_edges)
    pairs = [owners[(min(a, b), max(a, b))] for a, b in mesh.interface_edges.tolist()]
    t_in = np.array([p[0] if mesh.tags[p[0]] == 2 else p[1] for p in pairs])
    t_out = np.array([p[1] if mesh.tags[p[0]] == 2 else p[0] for p in pairs])
    homog = materials.homogeneous
    deps = materials.eps2 - materials.eps1

    def rms(vals, lengths):
        return float(np.sqrt(np.sum(lengths * np.abs(vals) ** 2) / np.sum(lengths)))

    report = []
    for f in fields:
        eps = materials.region_eps(mesh.tags)
        field_rms = np.sqrt(np.sum(geo.area * (eps * np.sum(np.abs(f.E) ** 2, axis=1)
                                               + np.sum(np.abs(f.H) ** 2, axis=1))) / area_total)
        outward = -leftb  # outer edges run counterclockwise, so the left normal points inside
        entry = {"gamma": [f.gamma.real, f.gamma.imag], "p": f.p}
        entry["E_tau_outer"] = rms(np.sum(f.E[tb_tri] * tb, axis=1), lb) / field_rms
        entry["H_n_outer"] = rms(np.sum(f.H[tb_tri] * outward, axis=1), lb) / field_rms
        Et_in, Et_out = np.sum(f.E[t_in] * ti, axis=1), np.sum(f.E[t_out] * ti, axis=1)
        Ht_in, Ht_out = np.sum(f.H[t_in] * ti, axis=1), np.sum(f.H[t_out] * ti, axis=1)
        entry["E_tau_jump"] = rms(Et_in - Et_out, li) / field_rms
        entry["H_tau_jump"] = rms(Ht_in - Ht_out, li) / field_rms
        if homog:
            entry["scalar_case"] = True
            entry["E_jump_identity"] = None
            entry["H_jump_identity"] = None
        else:
            gpi, gpsi = p1_gradient(f.Pi, mesh), p1_gradient(f.Psi, mesh)
            dpsi = np.sum((gpsi[t_in] - gpsi[t_out]) * nui, axis=1)
            dpi = np.sum((materials.eps2 * gpi[t_in] - materials.eps1 * gpi[t_out]) * nui, axis=1)
            entry["scalar_case"] = False
            entry["E_jump_identity"] = rms(deps * 0.5 * (Et_in + Et_out) + 1j * dpsi, li) / (abs(deps) * field_rms)
            entry["H_jump_identity"] = rms(deps * 0.5 * (Ht_in + Ht_out) - 1j * dpi, li) / (abs(deps) * field_rms)
        report.append(entry)
    return report


def _region_test_nodes(mesh, tag, exclude_boundary):
    """Nodes all of whose triangles lie in region ``tag``."""
    bad = np.zeros(mesh.n_nodes, dtype=bool)
    bad[mesh.triangles[mesh.tags != tag].ravel()] = True
    if exclude_boundary:
        bad[mesh.boundary_nodes()] = True
    used = np.zeros(mesh.n_nodes, dtype=bool)
    used[mesh.triangles[mesh.tags == tag].ravel()] = True
    return np.flatnonzero(used & ~bad)


def longitudinal_vectors(chain_fields, mesh, materials, matrices: FormMatrices):
    """Raw weak residual vectors of Delta u_p + k2 u_p - 2 g u_{p-1} - u_{p-2} per region.

    Returns a list (per p) of dicts {('Pi'|'Psi', region): (residual, term_scale)}.
    Test functions: hats of nodes surrounded by one region (Pi: also off the
    outer boundary).
    """
    out = []
    for p, f in enumerate(chain_fields):
        g = f.gamma
        d = {}
        for j, tag in enumerate((1, 2)):
            Kj, Mj = matrices.stiffness_region[j], matrices.mass_region[j]
            k2 = f.ktilde2[j]
            for name, attr, excl in (("Pi", "Pi", True), ("Psi", "Psi", False)):
                idx = _region_test_nodes(mesh, tag, excl)
                u = [getattr(chain_fields[p - q], attr) if p - q >= 0 else None for q in (0, 1, 2)]
                terms = [-(Kj @ u[0]), k2 * (Mj @ u[0])]
                if u[1] is not None:
                    terms.append(-2 * g * (Mj @ u[1]))
                if u[2] is not None:
                    terms.append(-(Mj @ u[2]))
                terms = [t[idx] for t in terms]
                d[(name, tag)] = (sum(terms), terms, idx)
        out.append(d)
    return out


def longitudinal_residual(chain_fields, mesh, materials, matrices: FormMatrices):
    """Weak Helmholtz-chain residuals per region (dual L2 norm over the test hats).

    Relative values divide by (1 + max |k2|) * sqrt(integral of eps|Pi_p|^2 + |Psi_p|^2),
    a global size of the chain member, so symmetric modes that vanish near the
    test nodes do not produce 0/0 ratios.
    """
    raw = longitudinal_vectors(chain_fields, mesh, materials, matrices)
    Meps = matrices.mass_region[0] * materials.eps1 + matrices.mass_region[1] * materials.eps2
    report = []
    for p, d in enumerate(raw):
        f = chain_fields[p]
        size = np.sqrt(abs(np.vdot(f.Pi, Meps @ f.Pi) + np.vdot(f.Psi, matrices.mass @ f.Psi)))
        den = (1 + max(abs(k) for k in f.ktilde2)) * size
        entry = {"p": p}
        for (name, tag), (res, terms, idx) in d.items():
            key = f"{name}_region{tag}"
            if len(idx) == 0:
                entry[key] = None
                continue
            absval = _DualNorm(matrices.mass_region[tag - 1], idx)(res)
            entry[key] = absval / den if den > 0 else 0.0
            entry[key + "_abs"] = absval
        report.append(entry)
    return report


def principal_angles(fields_a, fields_b, mesh) -> np.ndarray:
    """Principal angles between the spans of two lists of transversal fields (area weighted)."""
    w = np.sqrt(_geo(mesh).area)[:, None]

    def basis(fs):
        X = np.column_stack([(f.transversal * w).ravel() for f in fs])
        q, _ = np.linalg.qr(X)
        return q

    s = np.linalg.svd(basis(fields_a).conj().T @ basis(fields_b), compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))


def write_field_csv(path, field: TransversalField, mesh: CrossSectionMesh) -> None:
    """Centroid coordinates and the six complex components (Pi, Psi averaged to centroids)."""
    c = mesh.centroids()
    Pi = field.Pi[mesh.triangles].mean(axis=1)
    Psi = field.Psi[mesh.triangles].mean(axis=1)
    comps = [("E1", field.E[:, 0]), ("E2", field.E[:, 1]), ("E3", Pi),
             ("H1", field.H[:, 0]), ("H2", field.H[:, 1]), ("H3", Psi)]
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["x", "y"]
        for name, _ in comps:
            head += [f"{name}_re", f"{name}_im"]
        w.writerow(head)
        for t in range(mesh.n_triangles):
            row = [f"{c[t, 0]:.17e}", f"{c[t, 1]:.17e}"]
            for _, v in comps:
                row += [f"{v[t].real:.17e}", f"{v[t].imag:.17e}"]
            w.writerow(row)
