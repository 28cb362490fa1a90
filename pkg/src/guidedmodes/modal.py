"""Pairings, biorthogonalization, norm identities, decompositions and completeness.

Transversal fields are piecewise constant, stored as (T, 4) arrays
(E1, E2, H1, H2).  The conjugate wave of V = (E, H) is W = (H2, -H1, -E2, E1).

Two pairings are exposed.  The sesquilinear one integrates V . conj(W); the
bilinear one integrates V . W.  For the discrete waves the bilinear pairing
satisfies the chain recursion

    (g_n - g_m) <V_n^p, W_m^q> = <V_n^p, W_m^(q-1)> - <V_n^(p-1), W_m^q>

exactly (up to roundoff); the sesquilinear pairing satisfies the same identity
with g_m replaced by conj(g_m).  Orthogonality across distinct eigenvalues and
the Gram systems therefore use the bilinear pairing by default.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import triangle_gradients
from .geometry import CrossSectionMesh, MaterialConfig
from .pencil import DEFAULT_CLUSTER_TOL, cluster_eigenvalues, sort_key
from .waves import TransversalField, field_energy, transversal_energy

GRAM_COND_LIMIT = 1e8


class ModalError(ValueError):
    pass


def _as_array(V) -> np.ndarray:
    if isinstance(V, TransversalField):
        return V.transversal
    V = np.asarray(V)
    if V.ndim != 2 or V.shape[1] != 4:
        raise ModalError(f"expected a (T, 4) transversal field, got shape {V.shape}")
    return V


def _areas(mesh: CrossSectionMesh) -> np.ndarray:
    return np.abs(mesh.signed_areas())


def conjugate_wave(V) -> np.ndarray:
    """W = (H2, -H1, -E2, E1) for V = (E1, E2, H1, H2)."""
    V = _as_array(V)
    return np.column_stack([V[:, 3], -V[:, 2], -V[:, 1], V[:, 0]])


def pairing(V, W, mesh: CrossSectionMesh, conjugate: bool = True) -> complex:
    """Integral of V . conj(W) (or V . W with ``conjugate=False``) over the cross-section."""
    V, W = _as_array(V), _as_array(W)
    if V.shape != W.shape or V.shape[0] != mesh.n_triangles:
        raise ModalError("fields do not live on the same mesh")
    Wc = np.conj(W) if conjugate else W
    return complex(np.sum(_areas(mesh) * np.sum(V * Wc, axis=1)))


def l2_norm(V, mesh: CrossSectionMesh) -> float:
    V = _as_array(V)
    return float(np.sqrt(np.sum(_areas(mesh) * np.sum(np.abs(V) ** 2, axis=1))))


def verify_pairing_recursion(fields_n, fields_m, mesh: CrossSectionMesh, conjugate: bool = False):
    """Residuals of the chain recursion for all (p, q); returns a (P, Q) array.

    Each entry is normalized by ||V_n^p|| ||W_m^q||.  ``fields_n`` and
    ``fields_m`` are chain lists of TransversalField (p = 0..m).
    """
    gn = complex(fields_n[0].gamma)
    gm = complex(fields_m[0].gamma)
    if conjugate:
        gm = np.conj(gm)
    V = [f.transversal for f in fields_n]
    W = [conjugate_wave(f) for f in fields_m]
    P = np.array([[pairing(v, w, mesh, conjugate) for w in W] for v in V])
    nv = [l2_norm(v, mesh) for v in V]
    nw = [l2_norm(w, mesh) for w in W]
    out = np.zeros(P.shape)
    for p in range(P.shape[0]):
        for q in range(P.shape[1]):
            rhs = (P[p, q - 1] if q > 0 else 0) - (P[p - 1, q] if p > 0 else 0)
            out[p, q] = abs((gn - gm) * P[p, q] - rhs) / (nv[p] * nw[q])
    return out


def orthogonality_residuals(chain_fields, mesh: CrossSectionMesh, cluster_tol: float = DEFAULT_CLUSTER_TOL,
                            conjugate: bool = False):
    """Normalized |<V_n^p, W_m^q>| for every pair of chains with distinct eigenvalues.

    ``chain_fields`` is a list of chains (lists of TransversalField).  Returns a
    list of (n, m, p, q, value) tuples.
    """
    out = []
    for a, fa in enumerate(chain_fields):
        for b, fb in enumerate(chain_fields):
            ga, gb = complex(fa[0].gamma), complex(fb[0].gamma)
            if abs(ga - gb) <= cluster_tol * (1 + max(abs(ga), abs(gb))):
                continue
            for va in fa:
                V = va.transversal
                for wb in fb:
                    W = conjugate_wave(wb)
                    val = abs(pairing(V, W, mesh, conjugate)) / (l2_norm(V, mesh) * l2_norm(W, mesh))
                    out.append((a, b, va.p, wb.p, float(val)))
    return out


@dataclass
class GramBlock:
    gamma: complex
    chain_indices: list            # original numbering (index set A)
    members: list                  # (chain index, p) for each row/column
    G: np.ndarray
    A: np.ndarray | None
    cond: float
    identity_residual: float | None
    conditioned: bool


@dataclass
class GramSystem:
    blocks: list
    group_of_chain: dict = field(default_factory=dict)   # chain index -> renumbered group index
    cross_residual: float = 0.0                          # max normalized pairing across groups
    N: list = field(default_factory=list)                # (chain index, gamma, N_n) for simple chains

    @property
    def max_identity_residual(self) -> float:
        vals = [b.identity_residual for b in self.blocks if b.conditioned]
        return max(vals) if vals else 0.0


def biorthogonalize(V_list, W_list, mesh: CrossSectionMesh, conjugate: bool = False,
                    cond_limit: float = GRAM_COND_LIMIT):
    """Gram matrix G_pq = <v_p, w_q>, A = G^{-1} and the residual ||G A - I||_max.

    The biorthogonal family is u_q = sum_p conj(A_pq) w_p for the sesquilinear
    pairing (sum_p A_pq w_p for the bilinear one).  Blocks above the conditioning
    gate get A = None and are reported as not conditioned.
    """
    r = len(V_list)
    if r != len(W_list) or r == 0:
        raise ModalError("groups must be nonempty and of equal size")
    G = np.array([[pairing(v, w, mesh, conjugate) for w in W_list] for v in V_list], dtype=complex)
    s = np.linalg.svd(G, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    if not np.isfinite(cond) or cond > cond_limit:
        return G, None, cond, None
    A = np.linalg.solve(G, np.eye(r))
    res = float(np.max(np.abs(G @ A - np.eye(r))))
    return G, A, cond, res


def dual_family(W_list, A, conjugate: bool = False):
    """u_q from the conjugate waves and the coefficient matrix A."""
    W = np.stack([_as_array(w) for w in W_list])
    coef = np.conj(A) if conjugate else A
    return np.einsum("pq,ptk->qtk", coef, W)


def gram_system(chain_fields, mesh: CrossSectionMesh, cluster_tol: float = DEFAULT_CLUSTER_TOL,
                conjugate: bool = False, cond_limit: float = GRAM_COND_LIMIT) -> GramSystem:
    """Group chains by distinct eigenvalue and biorthogonalize each group."""
    gammas = [complex(c[0].gamma) for c in chain_fields]
    labels = cluster_eigenvalues(gammas, cluster_tol) if gammas else []
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    order = sorted(groups, key=lambda l: sort_key(np.mean([gammas[i] for i in groups[l]])))
    blocks, group_of = [], {}
    for k, lab in enumerate(order):
        idx = groups[lab]
        members = [(i, f.p) for i in idx for f in chain_fields[i]]
        V = [chain_fields[i][p].transversal for i, p in members]
        W = [conjugate_wave(chain_fields[i][p]) for i, p in members]
        G, A, cond, res = biorthogonalize(V, W, mesh, conjugate, cond_limit)
        blocks.append(GramBlock(complex(np.mean([gammas[i] for i in idx])), idx, members,
                                G, A, cond, res, A is not None))
        for i in idx:
            group_of[i] = k
    cross = 0.0
    for n, m, p, q, val in orthogonality_residuals(chain_fields, mesh, cluster_tol, conjugate):
        if group_of[n] != group_of[m]:
            cross = max(cross, val)
    N = []
    for i, c in enumerate(chain_fields):
        if len(c) == 1 and len(groups[labels[i]]) == 1:
            N.append((i, gammas[i], normalization_number(c[0], mesh)))
    return GramSystem(blocks, group_of, cross, N)


def normalization_number(V, mesh: CrossSectionMesh) -> complex:
    """N = <V, W> / ||V||^2 with the bilinear pairing."""
    return pairing(V, conjugate_wave(V), mesh, conjugate=False) / l2_norm(V, mesh) ** 2


def _p1_integral(u, v, mesh, weight=None):
    """Integral of u*v (no conjugation) for P1 nodal u, v with piecewise-constant weight."""
    area = _areas(mesh)
    U, W = u[mesh.triangles], v[mesh.triangles]
    local = area / 12.0 * (np.sum(U * W, axis=1) + U.sum(axis=1) * W.sum(axis=1))
    if weight is not None:
        local = local * weight
    return complex(np.sum(local))


def norm_identities(field: TransversalField, mesh: CrossSectionMesh, materials: MaterialConfig,
                    real_tol: float = 1e-12) -> dict:
    """Relative residuals of the value formula for <V, W> and of the energy balance.

    value formula: <V, W> = -(1/g)(int eps E.E + H.H + int eps Pi^2 + Psi^2),
    unconjugated squares, bilinear pairing.  Skipped when g = 0.
    energy balance: int eps|E|^2 + |H|^2 = int eps|Pi|^2 + |Psi|^2, only for
    non-real g.
    """
    g = complex(field.gamma)
    eps = materials.region_eps(mesh.tags)
    area = _areas(mesh)
    out = {"gamma": [g.real, g.imag], "value_checked": False, "energy_checked": False,
           "value_residual": None, "energy_residual": None}
    if abs(g) > 0:
        lhs = pairing(field, conjugate_wave(field), mesh, conjugate=False)
        trans = np.sum(area * (eps * np.sum(field.E ** 2, axis=1) + np.sum(field.H ** 2, axis=1)))
        longi = _p1_integral(field.Pi, field.Pi, mesh, eps) + _p1_integral(field.Psi, field.Psi, mesh)
        rhs = -(trans + longi) / g
        scale = field_energy(field, mesh, materials) / abs(g)
        out.update(value_checked=True, value_residual=float(abs(lhs - rhs) / scale),
                   value_lhs=[lhs.real, lhs.imag], value_rhs=[rhs.real, rhs.imag])
    else:
        out["value_skipped"] = "gamma = 0"
    if abs(g.imag) > real_tol * (1 + abs(g)):
        et = transversal_energy(field, mesh, materials)
        el = field_energy(field, mesh, materials) - et
        out.update(energy_checked=True, energy_residual=float(abs(et - el) / max(et, el)),
                   energy_transversal=et, energy_longitudinal=el)
    return out


def basis_decay(simple_fields, mesh: CrossSectionMesh, materials: MaterialConfig, slack: float = 0.05):
    """Table of |N_n| against the bound 2 eps_max / |g_n| for simple non-real modes.

    ``simple_fields`` is a list of eigenwaves (p = 0).  Real eigenvalues are
    dropped; rows are sorted by |g|.  The homogeneous case is reported but never
    asserted (``asserted`` is False).
    """
    rows = []
    for f in simple_fields:
        g = complex(f.gamma)
        if abs(g.imag) <= 1e-12 * (1 + abs(g)):
            continue
        N = normalization_number(f, mesh)
        bound = 2 * materials.eps_max / abs(g)
        rows.append({"gamma": g, "abs_gamma": abs(g), "N": N, "abs_N": abs(N), "bound": bound,
                     "within_bound": bool(abs(N) <= bound * (1 + slack))})
    rows.sort(key=lambda r: (r["abs_gamma"], sort_key(r["gamma"])))
    absN = np.array([r["abs_N"] for r in rows])
    bounds = np.array([r["bound"] for r in rows])
    return {
        "rows": rows,
        "asserted": not materials.homogeneous,
        "all_within_bound": bool(all(r["within_bound"] for r in rows)),
        "bound_monotone": bool(np.all(np.diff(bounds) <= 0)),
        "N_monotone": bool(np.all(np.diff(absN) <= 0)),
        "partner_norms": [1.0 / r["abs_N"] if r["abs_N"] > 0 else np.inf for r in rows],
    }


# Helmholtz-type decompositions of piecewise-constant 2-vector fields

class _SplitOperators:
    def __init__(self, mesh: CrossSectionMesh, materials: MaterialConfig):
        self.mesh = mesh
        self.area, self.grads = triangle_gradients(mesh.nodes[mesh.triangles])
        self.area = np.abs(self.area)
        self.rot = np.stack([self.grads[..., 1], -self.grads[..., 0]], axis=-1)
        self.eps = materials.region_eps(mesh.tags)
        n = mesh.n_nodes
        tri = mesh.triangles
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        loc = np.einsum("tid,tjd->tij", self.grads, self.grads) * self.area[:, None, None]
        self.stiff = sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(n, n))
        self.stiff_eps = sp.csr_matrix(((loc * self.eps[:, None, None]).ravel(), (rows, cols)), shape=(n, n))
        bnd = set(mesh.boundary_nodes().tolist())
        self.interior = np.array([i for i in range(n) if i not in bnd], dtype=int)
        self.mass_lumped = np.bincount(tri.ravel(), weights=np.repeat(self.area / 3, 3), minlength=n)
        # zero-mean space: drop the node of largest lumped mass, as in the pencil constraint
        self.drop = int(np.argmax(self.mass_lumped))
        self.keep = np.delete(np.arange(n), self.drop)

    def gradient(self, f):
        return np.einsum("tk,tkd->td", f[self.mesh.triangles], self.grads)

    def rotated(self, f):
        return np.einsum("tk,tkd->td", f[self.mesh.triangles], self.rot)

    def load(self, u, basis):
        loc = np.einsum("td,tkd->tk", u, basis) * self.area[:, None]
        tri = self.mesh.triangles.ravel()
        return np.bincount(tri, weights=loc.real.ravel(), minlength=self.mesh.n_nodes) + \
            1j * np.bincount(tri, weights=loc.imag.ravel(), minlength=self.mesh.n_nodes)

    def dirichlet_solve(self, A, b):
        if len(self.interior) == 0:
            raise ModalError("no interior nodes for the Dirichlet part")
        idx = self.interior
        lu = spla.splu(sp.csc_matrix(A[idx][:, idx]))
        x = np.zeros(self.mesh.n_nodes, complex)
        x[idx] = lu.solve(b[idx].real) + 1j * lu.solve(b[idx].imag)
        return x

    def neumann_solve(self, b):
        """Zero-mean solution of the pure Neumann stiffness problem."""
        idx = self.keep
        lu = spla.splu(sp.csc_matrix(self.stiff[idx][:, idx]))
        x = np.zeros(self.mesh.n_nodes, complex)
        x[idx] = lu.solve(b[idx].real) + 1j * lu.solve(b[idx].imag)
        return self.zero_mean(x)

    def zero_mean(self, x):
        m = self.mass_lumped
        return x - (m @ x) / m.sum()

    def norm(self, u):
        return float(np.sqrt(np.sum(self.area * np.sum(np.abs(u) ** 2, axis=1))))


def _split_ops(mesh, materials):
    cache = mesh.__dict__.setdefault("_split_cache", {})
    key = (materials.eps1, materials.eps2)
    if key not in cache:
        cache[key] = _SplitOperators(mesh, materials)
    return cache[key]


def helmholtz_split_1(u, mesh: CrossSectionMesh, materials: MaterialConfig):
    """u = eps grad f + rot g with f zero on the outer boundary and g of zero mean.

    f from int eps grad f . grad phi = int u . grad phi over interior hats; g from
    int grad g . grad h = int (u - eps grad f) . rot h over all hats.  Returns
    (f, g, relative reconstruction residual).
    """
    ops = _split_ops(mesh, materials)
    u = np.asarray(u, dtype=complex)
    f = ops.dirichlet_solve(ops.stiff_eps, ops.load(u, ops.grads))
    v = u - ops.eps[:, None] * ops.gradient(f)
    g = ops.neumann_solve(ops.load(v, ops.rot))
    rec = ops.eps[:, None] * ops.gradient(f) + ops.rotated(g)
    nu = ops.norm(u)
    return f, g, ops.norm(u - rec) / nu if nu > 0 else 0.0


def helmholtz_split_2(u, mesh: CrossSectionMesh, materials: MaterialConfig):
    """u = rot f + grad g with f zero on the outer boundary and g of zero mean."""
    ops = _split_ops(mesh, materials)
    u = np.asarray(u, dtype=complex)
    f = ops.dirichlet_solve(ops.stiff, ops.load(u, ops.rot))
    v = u - ops.rotated(f)
    g = ops.neumann_solve(ops.load(v, ops.grads))
    rec = ops.rotated(f) + ops.gradient(g)
    nu = ops.norm(u)
    return f, g, ops.norm(u - rec) / nu if nu > 0 else 0.0


def split_fields(mesh: CrossSectionMesh, materials: MaterialConfig):
    """Callables building the two manufactured fields from nodal (f, g)."""
    ops = _split_ops(mesh, materials)
    first = lambda f, g: ops.eps[:, None] * ops.gradient(f) + ops.rotated(g)   # noqa: E731
    second = lambda f, g: ops.rotated(f) + ops.gradient(g)                     # noqa: E731
    return first, second, ops


def decompose_target(target, mesh: CrossSectionMesh, materials: MaterialConfig):
    """Split the E slot with the first decomposition and the H slot with the second.

    Returns the two reconstruction residuals.
    """
    t = _as_array(target)
    _, _, r1 = helmholtz_split_1(t[:, :2], mesh, materials)
    _, _, r2 = helmholtz_split_2(t[:, 2:], mesh, materials)
    return r1, r2


def completeness_residual(target, fields, mesh: CrossSectionMesh, rank_tol: float = 1e-10):
    """Least-squares residual of ``target`` against the first M fields, for M = 0..len(fields).

    The L2 inner product is area weighted.  Returns (residuals, rank_flags) where
    residuals[M] is the relative residual using fields[:M] and rank_flags lists
    the indices whose addition was numerically dependent on the preceding span.
    """
    w = np.sqrt(_areas(mesh))[:, None]
    t = (_as_array(target) * w).ravel()
    tn = np.linalg.norm(t)
    if tn == 0:
        raise ModalError("target has zero norm")
    Q = []
    flags = []
    res = [1.0]
    r = t.astype(complex)
    for k, f in enumerate(fields):
        v = (_as_array(f) * w).ravel().astype(complex)
        vn = np.linalg.norm(v)
        for _ in range(2):  # reorthogonalize once
            for q in Q:
                v = v - q * np.vdot(q, v)
        if vn == 0 or np.linalg.norm(v) <= rank_tol * vn:
            flags.append(k)
        else:
            q = v / np.linalg.norm(v)
            Q.append(q)
            r = r - q * np.vdot(q, r)
        res.append(float(np.linalg.norm(r) / tn))
    return np.array(res), flags


def smooth_target(mesh: CrossSectionMesh, materials: MaterialConfig) -> np.ndarray:
    """Fixed smooth 4-vector target assembled from the two decompositions.

    E slot: eps grad f2 - rot g1, H slot: rot f1 + grad g2, with f1 = f2 the
    interpolant of sin(pi X) sin(pi Y) and g1 = g2 that of cos(pi X) cos(pi Y)
    (X, Y scaled to [0, 1] on the outer rectangle), so the target lies in the
    discrete space spanned by transversal fields.
    """
    x0, y0, x1, y1 = mesh.outer
    X = (mesh.nodes[:, 0] - x0) / (x1 - x0)
    Y = (mesh.nodes[:, 1] - y0) / (y1 - y0)
    f = np.sin(np.pi * X) * np.sin(np.pi * Y)
    g = np.cos(np.pi * X) * np.cos(np.pi * Y)
    ops = _split_ops(mesh, materials)
    g = ops.zero_mean(g)
    E = ops.eps[:, None] * ops.gradient(f) - ops.rotated(g)
    H = ops.rotated(f) + ops.gradient(g)
    return np.concatenate([E, H], axis=1).astype(complex)
