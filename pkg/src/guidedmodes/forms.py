"""P1 assembly of the quadratic forms behind the quartic pencil.

The unknown is the pair of longitudinal components (Pi, Psi).  Pi lives on the
interior nodes (zero on the outer boundary) and Psi on all nodes restricted to
zero mean.  The constrained unknown vector is ``f = [pi_interior, psi_reduced]``
with ``Psi = Z @ psi_reduced``.

The interface form is

    s(Pi, Psi) = integral over the interface of (dPi/dtau conj(Psi) - dPsi/dtau conj(Pi))

with the tangent tau chosen so that the outer region lies on its left, i.e. the
interface is walked clockwise around the inclusion.  Interface edges are stored
counterclockwise, so the stored orientation enters with a minus sign.  This
choice makes

    s = integral over the outer region of (Pi_y conj(Psi_x) - Pi_x conj(Psi_y)
                                           + Psi_x conj(Pi_y) - Psi_y conj(Pi_x))

which is what the transversal-field recursion needs.  Reversing the stored
orientation flips the sign of S.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .geometry import CrossSectionMesh, DofMaps, GeometryError, MaterialConfig, classify_dofs

_GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))
_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def p1_element_matrices(coords):
    """Stiffness and mass matrices of one P1 triangle with vertex rows ``coords``."""
    coords = np.asarray(coords, dtype=float)
    area, grads = triangle_gradients(coords[None])
    stiff = area[0] * grads[0] @ grads[0].T
    return stiff, area[0] * _MASS_REF


def triangle_gradients(pts):
    """Areas (T,) and barycentric gradients (T, 3, 2) of triangles ``pts`` (T, 3, 2)."""
    x, y = pts[..., 0], pts[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    grads = np.stack([b, c], axis=2) / area2[:, None, None]
    return 0.5 * area2, grads


def _assemble(mesh, local, weights=None):
    """Sum per-triangle 3x3 blocks ``local`` (T,3,3) into an N x N CSR matrix."""
    tri = mesh.triangles
    if weights is not None:
        local = local * np.asarray(weights)[:, None, None]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def interface_tangent_matrix(mesh: CrossSectionMesh) -> sp.csr_matrix:
    """T[i, j] = integral over the interface of phi_i dphi_j/dtau, tau along the stored edges.

    The tangential slope of a P1 trace is constant per edge; the partner factor is
    linear and integrated with 2-point Gauss (exact).
    """
    a, b = mesh.interface_edges[:, 0], mesh.interface_edges[:, 1]
    rows, cols, vals = [], [], []
    # on edge a->b of length l: dphi_a/dtau = -1/l, dphi_b/dtau = +1/l; phi values at Gauss points
    for t in _GAUSS2:
        w = 0.5  # Gauss weight times l, divided by l from the slope
        for i, phi_i in ((a, 1 - t), (b, t)):
            for j, slope in ((a, -1.0), (b, 1.0)):
                rows.append(i)
                cols.append(j)
                vals.append(np.full(len(a), w * phi_i * slope))
    n = mesh.n_nodes
    T = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    T = T.tocsr()
    T.eliminate_zeros()
    return T


@dataclass(frozen=True, eq=False)
class FormMatrices:
    """Pencil coefficient matrices on the constrained space.

    The matrices are stored on the "nodal" space (interior Pi values, all Psi
    values) together with the restriction ``R = blockdiag(I, Z)``; the
    constrained K, A1, A2, S are formed on first access as ``R^T X R``.  The
    nodal storage stays sparse, whereas the zero-mean basis adds a dense rank-one
    part to the constrained Psi blocks.
    """

    materials: MaterialConfig
    dofs: DofMaps
    nodal: dict                   # 'K', 'A1', 'A2', 'S' on the (n_pi + N) nodal space
    mean_vector: np.ndarray       # nodal lumped masses: integral of Psi = mean_vector @ Psi
    P: sp.csr_matrix              # N x n_pi, inserts interior values into nodal vectors
    Z: sp.csr_matrix              # N x (N-1), zero-mean basis for Psi
    eliminated_node: int          # Psi node expressed through the others
    mass: sp.csr_matrix           # nodal P1 mass
    stiffness: sp.csr_matrix      # nodal P1 stiffness
    mass_region: tuple            # nodal mass restricted to region 1, region 2
    stiffness_region: tuple       # nodal stiffness restricted to region 1, region 2
    tangent: sp.csr_matrix        # interface_tangent_matrix of the mesh

    @cached_property
    def R(self) -> sp.csr_matrix:
        return sp.block_diag([sp.identity(self.n_pi, format="csr"), self.Z], format="csr")

    def _constrained(self, name):
        X = (self.R.T @ self.nodal[name] @ self.R).tocsr()
        X.sum_duplicates()
        X.sort_indices()
        return X

    @cached_property
    def K(self) -> sp.csr_matrix:
        return self._constrained("K")

    @cached_property
    def A1(self) -> sp.csr_matrix:
        return self._constrained("A1")

    @cached_property
    def A2(self) -> sp.csr_matrix:
        return self._constrained("A2")

    @cached_property
    def S(self) -> sp.csr_matrix:
        return self._constrained("S")

    @property
    def n(self) -> int:
        return self.n_pi + self.Z.shape[1]

    @property
    def n_pi(self) -> int:
        return self.P.shape[1]

    @property
    def constraint(self) -> np.ndarray:
        """Nodal-space vector c with null(R^T) = span(c)."""
        return np.concatenate([np.zeros(self.n_pi), self.mean_vector])

    def expand(self, f):
        """Constrained vector(s) -> nodal (Pi, Psi) on all nodes.  Works on (n,) or (n, k)."""
        f = np.asarray(f)
        return self.P @ f[: self.n_pi], self.Z @ f[self.n_pi:]

    def restrict(self, pi_nodal, psi_nodal):
        """Nodal (Pi, Psi) -> constrained vector; Psi is shifted to zero mean first."""
        pi_nodal = np.asarray(pi_nodal)
        psi_nodal = np.asarray(psi_nodal)
        m = self.mean_vector
        psi0 = psi_nodal - np.multiply.outer(np.ones(len(m)), (m @ psi_nodal) / m.sum())
        keep = np.delete(np.arange(len(m)), self.eliminated_node)
        return np.concatenate([pi_nodal[self.dofs.pi_nodes], psi0[keep]], axis=0)

    def coefficients(self):
        """(C0, C1, C2, C4) with L(g) = g^4 C4 + g^2 C2 + g C1 + C0 (constrained)."""
        return tuple(self._constrained_coef(j) for j in (0, 1, 2, 4))

    def nodal_coefficients(self):
        e1, e2 = self.materials.eps1, self.materials.eps2
        N = self.nodal
        return ((e1 * e2 * (N["K"] - N["A2"])).tocsr(), ((e1 - e2) * N["S"]).tocsr(),
                (N["A1"] - (e1 + e2) * N["K"]).tocsr(), N["K"])

    def _constrained_coef(self, j):
        e1, e2 = self.materials.eps1, self.materials.eps2
        if j == 0:
            return (e1 * e2 * (self.K - self.A2)).tocsr()
        if j == 1:
            return ((e1 - e2) * self.S).tocsr()
        if j == 2:
            return (self.A1 - (e1 + e2) * self.K).tocsr()
        return self.K

    def a1_prime(self):
        """A1' from ((e1+e2)/2) A1 - e1 e2 A2 = ((e1-e2)/2) A1'; None when e1 == e2."""
        e1, e2 = self.materials.eps1, self.materials.eps2
        if e1 == e2:
            return None
        return (((e1 + e2) / 2) * self.A1 - e1 * e2 * self.A2) / ((e1 - e2) / 2)


def assemble_forms(mesh: CrossSectionMesh, materials: MaterialConfig) -> FormMatrices:
    mesh.validate()
    if not isinstance(materials, MaterialConfig):
        raise GeometryError("materials must be a MaterialConfig")
    dofs = classify_dofs(mesh)
    n = mesh.n_nodes
    area, grads = triangle_gradients(mesh.nodes[mesh.triangles])
    kloc = area[:, None, None] * grads @ grads.transpose(0, 2, 1)
    mloc = area[:, None, None] * _MASS_REF[None]
    in1 = (mesh.tags == 1).astype(float)
    in2 = (mesh.tags == 2).astype(float)
    Kst = (_assemble(mesh, kloc, in1), _assemble(mesh, kloc, in2))
    Ms = (_assemble(mesh, mloc, in1), _assemble(mesh, mloc, in2))
    M = Ms[0] + Ms[1]
    Kfull = Kst[0] + Kst[1]
    e1, e2 = materials.eps1, materials.eps2

    m = np.asarray(M.sum(axis=1)).ravel()
    # eliminate the node with the largest lumped mass (first one on ties)
    r = int(np.argmax(m))
    keep = np.delete(np.arange(n), r)
    zr = np.arange(n - 1)
    Z = sp.coo_matrix((np.concatenate([np.ones(n - 1), -m[keep] / m[r]]),
                       (np.concatenate([keep, np.full(n - 1, r)]), np.concatenate([zr, zr]))),
                      shape=(n, n - 1)).tocsr()
    npi = dofs.n_pi
    P = sp.coo_matrix((np.ones(npi), (dofs.pi_nodes, np.arange(npi))), shape=(n, npi)).tocsr()

    T = interface_tangent_matrix(mesh)
    # S = [[0, T], [-T, 0]] in the (Pi, Psi) blocks; see the module docstring for the sign
    S = sp.bmat([[None, P.T @ T], [-(T @ P), None]], format="csr")

    def block(pi_part, psi_part):
        return sp.block_diag([P.T @ pi_part @ P, psi_part], format="csr")

    nodal = {
        "K": block(e1 * Ms[0] + e2 * Ms[1], M),
        "A1": block(e1 * Kst[0] + e2 * Kst[1], Kfull),
        "A2": block(Kfull, Kst[0] / e1 + Kst[1] / e2),
        "S": S,
    }
    for mat in nodal.values():
        mat.sum_duplicates()
        mat.eliminate_zeros()
        mat.sort_indices()
    return FormMatrices(materials, dofs, nodal, m, P, Z, r, M, Kfull, Ms, Kst, T)


@dataclass(frozen=True)
class ScalarFormValues:
    k: float
    a1_region: tuple     # (a^(1), a^(2)): integral over region j of eps_j |grad Pi|^2 + |grad Psi|^2
    s: float
    a2_weighted: float   # integral of |grad Pi|^2 + |grad Psi|^2 / eps
    grad_pi_region: tuple    # integral over region j of |grad Pi|^2
    grad_psi_region: tuple   # integral over region j of |grad Psi|^2

    @property
    def theta(self) -> float:
        if not self.k > 0:
            raise ValueError("theta undefined for a zero field (k = 0)")
        return self.a2_weighted / self.k - 1.0

    def f_value(self, gamma, materials: MaterialConfig):
        """(a1 + g s)/(e1 - g^2) + (a2 - g s)/(e2 - g^2), the scalar symbol of the pencil."""
        g = np.asarray(gamma)
        a1, a2 = self.a1_region
        return (a1 + g * self.s) / (materials.eps1 - g * g) + (a2 - g * self.s) / (materials.eps2 - g * g)

    def quartic_coefficients(self, materials: MaterialConfig):
        """Coefficients (highest first) of the cleared quartic equal to f^H L(g) f."""
        e1, e2 = materials.eps1, materials.eps2
        a1, a2 = self.a1_region
        k = self.k
        return np.array([k, 0.0, a1 + a2 - (e1 + e2) * k, (e1 - e2) * self.s,
                         e1 * e2 * k - e2 * a1 - e1 * a2])


def _nodal_pair(fields, matrices: FormMatrices):
    if isinstance(fields, tuple):
        pi, psi = fields
        return np.asarray(pi), np.asarray(psi)
    return matrices.expand(np.asarray(fields))


def scalar_forms(fields, matrices: FormMatrices, mesh: CrossSectionMesh,
                 materials: MaterialConfig | None = None) -> ScalarFormValues:
    """Evaluate k, a^(j), s, a_2 by direct elementwise integration.

    ``fields`` is a constrained vector or a nodal tuple (Pi, Psi).
    """
    materials = materials or matrices.materials
    pi, psi = _nodal_pair(fields, matrices)
    tri = mesh.triangles
    area, grads = triangle_gradients(mesh.nodes[tri])
    gpi = np.einsum("tk,tkd->td", pi[tri], grads)
    gpsi = np.einsum("tk,tkd->td", psi[tri], grads)

    def sq_int(u):  # integral of |u|^2 for linear u on each triangle
        v = u[tri]
        return area / 12.0 * (np.sum(np.abs(v) ** 2, axis=1) + np.abs(v.sum(axis=1)) ** 2)

    eps = materials.region_eps(mesh.tags)
    k = float(np.sum(eps * sq_int(pi) + sq_int(psi)))
    dpi = area * np.sum(np.abs(gpi) ** 2, axis=1)
    dpsi = area * np.sum(np.abs(gpsi) ** 2, axis=1)
    regions = [mesh.tags == 1, mesh.tags == 2]
    gp = tuple(float(dpi[r].sum()) for r in regions)
    gs = tuple(float(dpsi[r].sum()) for r in regions)
    a_reg = (materials.eps1 * gp[0] + gs[0], materials.eps2 * gp[1] + gs[1])
    a2w = gp[0] + gp[1] + gs[0] / materials.eps1 + gs[1] / materials.eps2

    # interface term, walked with the outer region on the left (reverse of stored edges)
    a, b = mesh.interface_edges[:, 1], mesh.interface_edges[:, 0]
    s = 0.0 + 0.0j
    for t in _GAUSS2:
        pi_q = (1 - t) * pi[a] + t * pi[b]
        psi_q = (1 - t) * psi[a] + t * psi[b]
        # slope times edge length cancels the 1/length of the derivative
        s += 0.5 * np.sum((pi[b] - pi[a]) * np.conj(psi_q) - (psi[b] - psi[a]) * np.conj(pi_q))
    return ScalarFormValues(k, a_reg, float(s.real), a2w, gp, gs)


def pencil_value(gamma, matrices: FormMatrices, materials: MaterialConfig | None = None, derivative: int = 0):
    """Sparse L(gamma), or its ``derivative``-th derivative in gamma."""
    if materials is not None and materials != matrices.materials:
        raise ValueError("matrices were assembled for different materials; reassemble")
    C0, C1, C2, C4 = matrices.coefficients()
    g = complex(gamma)
    if derivative == 0:
        return (g ** 4 * C4 + g ** 2 * C2 + g * C1 + C0).tocsr()
    if derivative == 1:
        return (4 * g ** 3 * C4 + 2 * g * C2 + C1).tocsr()
    if derivative == 2:
        return (12 * g ** 2 * C4 + 2 * C2).tocsr()
    if derivative == 3:
        return (24 * g * C4).tocsr()
    if derivative == 4:
        return (24 * C4).tocsr()
    return sp.csr_matrix(C4.shape)


def area_s_oracle(fields, matrices: FormMatrices, mesh: CrossSectionMesh) -> float:
    """s written as an area integral over the outer region (independent route)."""
    pi, psi = _nodal_pair(fields, matrices)
    tri = mesh.triangles
    area, grads = triangle_gradients(mesh.nodes[tri])
    gpi = np.einsum("tk,tkd->td", pi[tri], grads)
    gpsi = np.einsum("tk,tkd->td", psi[tri], grads)
    r = mesh.tags == 1
    val = (gpi[:, 1] * np.conj(gpsi[:, 0]) - gpi[:, 0] * np.conj(gpsi[:, 1])
           + gpsi[:, 0] * np.conj(gpi[:, 1]) - gpsi[:, 1] * np.conj(gpi[:, 0]))
    return float(np.sum(area[r] * val[r]).real)


def write_coo(path, mat) -> None:
    """Write a sparse matrix as 'row col value' lines (0-based), rows sorted."""
    c = sp.coo_matrix(mat)
    order = np.lexsort((c.col, c.row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# {c.shape[0]} {c.shape[1]} {c.nnz}\n")
        for i, j, v in zip(c.row[order], c.col[order], c.data[order]):
            fh.write(f"{i} {j} {v:.17e}\n")


def read_coo(path) -> sp.csr_matrix:
    with open(path, encoding="ascii") as fh:
        head = fh.readline().split()
        shape = (int(head[1]), int(head[2]))
        data = np.loadtxt(fh, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix(shape)
    return sp.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=shape).tocsr()
