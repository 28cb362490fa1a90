"""Quartic eigenvalue problem L(g) f = 0 by companion linearization.

L(g) = g^4 C4 + g^2 C2 + g C1 + C0 with C4 = K.  Two solvers:

* dense: Cholesky of K turns the first companion pair into a standard
  eigenproblem of size 4n, solved with LAPACK (all 4n eigenvalues);
* windowed: shift-invert Arnoldi on disks of the complex plane, using only a
  sparse LU of L(center).  Used when 4n is too large for the dense route.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import MaterialConfig

DEFAULT_RESIDUAL_TOL = 1e-8
DEFAULT_CLUSTER_TOL = 1e-6
DEFAULT_EXCLUSION_TOL = 1e-8


class PencilError(RuntimeError):
    """Raised when the linearization or a chain solve cannot proceed."""


class PencilCoefficients:
    """Coefficients of L(g) = g^4 C4 + g^2 C2 + g C1 + C0 (there is no cubic term).

    The coefficients are kept on a sparse "nodal" space of size m together with a
    restriction R (m x n); the pencil acts on the constrained space as
    R^T C_j R.  ``constraint`` spans the null space of R^T (None if R is square),
    and ``rows`` picks the constrained vector out of a nodal one in range(R).
    """

    def __init__(self, nodal, R=None, constraint=None, rows=None, materials=None):
        self.nodal = tuple(sp.csr_matrix(c) for c in nodal)
        m = self.nodal[3].shape[0]
        self.R = sp.identity(m, format="csr") if R is None else sp.csr_matrix(R)
        self.constraint = None if constraint is None else np.asarray(constraint, dtype=float)
        self.rows = np.arange(m) if rows is None else np.asarray(rows)
        self.materials = materials
        self._explicit = None

    @property
    def n(self) -> int:
        return self.R.shape[1]

    @classmethod
    def from_forms(cls, matrices) -> "PencilCoefficients":
        if isinstance(matrices, cls):
            return matrices
        keep = np.delete(np.arange(matrices.Z.shape[0]), matrices.eliminated_node)
        rows = np.concatenate([np.arange(matrices.n_pi), matrices.n_pi + keep])
        return cls(matrices.nodal_coefficients(), matrices.R, matrices.constraint, rows, matrices.materials)

    @classmethod
    def from_scalars(cls, K, A1, A2, S, materials: MaterialConfig) -> "PencilCoefficients":
        """Unconstrained pencil built directly from K, A1, A2, S (matrices or numbers)."""
        e1, e2 = materials.eps1, materials.eps2
        K, A1, A2, S = (sp.csr_matrix(x) if sp.issparse(x) else
                        sp.csr_matrix(np.atleast_2d(np.asarray(x, dtype=float))) for x in (K, A1, A2, S))
        return cls((e1 * e2 * (K - A2), (e1 - e2) * S, A1 - (e1 + e2) * K, K), materials=materials)

    @property
    def explicit(self):
        """Constrained (C0, C1, C2, C4) as sparse matrices (formed once)."""
        if self._explicit is None:
            RT = self.R.T.tocsr()
            out = []
            for c in self.nodal:
                x = (RT @ c @ self.R).tocsr()
                x.sum_duplicates()
                out.append(x)
            self._explicit = tuple(out)
        return self._explicit

    @property
    def C0(self):
        return self.explicit[0]

    @property
    def C1(self):
        return self.explicit[1]

    @property
    def C2(self):
        return self.explicit[2]

    @property
    def C4(self):
        return self.explicit[3]

    @staticmethod
    def _weights(gamma, derivative):
        g = complex(gamma)
        w = []
        for j in (0, 1, 2, 4):
            if j < derivative:
                w.append(0.0)
            else:
                w.append(math.factorial(j) / math.factorial(j - derivative) * g ** (j - derivative))
        return w

    def value(self, gamma, derivative: int = 0):
        """Explicit constrained L^(derivative)(gamma)."""
        out = sp.csr_matrix(self.C4.shape, dtype=complex)
        for w, c in zip(self._weights(gamma, derivative), self.explicit):
            if w != 0:
                out = out + w * c
        return out.tocsr()

    def nodal_value(self, gamma, derivative: int = 0):
        out = sp.csr_matrix(self.nodal[3].shape, dtype=complex)
        for w, c in zip(self._weights(gamma, derivative), self.nodal):
            if w != 0:
                out = out + w * c
        return out.tocsr()

    def apply(self, j: int, x):
        """R^T C_j R x for j in (0, 1, 2, 4)."""
        c = self.nodal[(0, 1, 2, None, 3)[j]]
        return self.R.T @ (c @ (self.R @ x))

    def apply_value(self, gamma, x, derivative: int = 0):
        y = self.R @ x
        acc = 0
        for w, c in zip(self._weights(gamma, derivative), self.nodal):
            if w != 0:
                acc = acc + w * (c @ y)
        return self.R.T @ acc

    def embed(self, b):
        """Nodal vector bt with R^T bt = b."""
        bt = np.zeros((self.R.shape[0],) + np.shape(b)[1:], dtype=np.result_type(b, complex))
        bt[self.rows] = b
        return bt

    def factor(self, sigma, refine: int = 2):
        """Solver for L(sigma) x = b via a sparse LU of the bordered nodal system.

        A couple of steps of iterative refinement recover the accuracy lost to
        the dense border row.
        """
        Ln = self.nodal_value(sigma)
        if self.constraint is None:
            lu = spla.splu(Ln.tocsc())
            base = lu.solve
        else:
            scale = abs(Ln).sum(axis=1).max() / np.abs(self.constraint).max()
            c = sp.csr_matrix(scale * self.constraint[:, None])
            lu = spla.splu(sp.bmat([[Ln, -c], [c.T, None]], format="csc"))
            m = Ln.shape[0]
            rows = self.rows

            def base(b):
                return lu.solve(np.concatenate([self.embed(b), np.zeros(1)]))[:m][rows]

        def solve(b):
            x = base(b)
            for _ in range(refine):
                x = x + base(b - self.apply_value(sigma, x))
            return x

        return solve

    def norms(self):
        """Infinity norms of the nodal C0, C1, C2, C4 (for residual scaling)."""
        return tuple(float(abs(m).sum(axis=1).max()) if m.nnz else 0.0 for m in self.nodal)

    def residual(self, gamma, vec) -> float:
        """Backward-error style residual ||L(g) f|| / (||f|| sum_j |g|^j ||C_j||)."""
        g = abs(gamma)
        n0, n1, n2, n4 = self.norms()
        scale = n0 + g * n1 + g * g * n2 + g ** 4 * n4
        if scale == 0:  # g = 0 with C0 = 0
            scale = max(n0, n1, n2, n4)
        r = self.apply_value(gamma, vec)
        return float(np.linalg.norm(r, np.inf) / (np.linalg.norm(vec, np.inf) * scale))


class CompanionPair:
    """4n x 4n pair (A, B) with det(A - g B) = det L(g) up to a constant.

    A and B are formed on first access; the windowed solver never needs them.
    """

    def __init__(self, coefficients: PencilCoefficients, variant: str = "first"):
        if variant not in ("first", "second"):
            raise ValueError("variant must be 'first' or 'second'")
        self.coefficients = coefficients
        self.variant = variant
        self._AB = None

    @property
    def n(self) -> int:
        return self.coefficients.n

    def _build(self):
        if self._AB is None:
            n = self.n
            C0, C1, C2, K = self.coefficients.explicit
            I = sp.identity(n, format="csr")
            first = [[None, I, None, None], [None, None, I, None], [None, None, None, I],
                     [-C0, -C1, -C2, sp.csr_matrix((n, n))]]
            A = sp.bmat(first, format="csr")
            if self.variant == "second":
                A = A.T.tocsr()
            B = sp.block_diag([I, I, I, K], format="csr")
            self._AB = (A, B)
        return self._AB

    @property
    def A(self) -> sp.csr_matrix:
        return self._build()[0]

    @property
    def B(self) -> sp.csr_matrix:
        return self._build()[1]


def linearize(matrices, materials: MaterialConfig | None = None, variant: str = "first") -> CompanionPair:
    """Companion pair for the quartic pencil.

    ``first``: z = [f, g f, g^2 f, g^3 f], identity blocks on the superdiagonal.
    ``second``: the transposed arrangement, identities on the subdiagonal; f sits
    in the last block of its eigenvectors (up to the K factor).
    """
    coef = PencilCoefficients.from_forms(matrices)
    if materials is not None and coef.materials is not None and materials != coef.materials:
        raise PencilError("materials do not match the assembled matrices")
    diag = coef.nodal[3].diagonal()
    if np.any(diag <= 0):
        raise PencilError("leading coefficient K is not positive definite (non-positive diagonal)")
    return CompanionPair(coef, variant)


@dataclass(frozen=True, eq=False)
class EigenPair:
    gamma: complex
    vector: np.ndarray        # constrained longitudinal vector, ||f||_K = 1
    residual: float
    converged: bool = True


def sort_key(gamma: complex):
    """(|Im|, |Re|, Re, Im) rounded to 10 significant digits; parts below 1e-10 (1+|g|) count as 0."""
    gamma = complex(gamma)
    small = 1e-10 * (1 + abs(gamma))

    def r(x):
        return 0.0 if abs(x) <= small else float(f"{x:.9e}")
    return (r(abs(gamma.imag)), r(abs(gamma.real)), r(gamma.real), r(gamma.imag))


def normalize_vector(vec, K) -> np.ndarray:
    """Scale to unit K-norm and make the largest-magnitude entry real positive."""
    v = np.asarray(vec, dtype=complex)
    nrm = math.sqrt(abs(np.vdot(v, K @ v).real))
    if nrm == 0:
        return v
    v = v / nrm
    i = int(np.argmax(np.abs(v)))
    return v * (abs(v[i]) / v[i])


def _dense_eigs(pair: CompanionPair):
    coef = pair.coefficients
    n = coef.n
    K = coef.C4.toarray()
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        w = np.linalg.eigvalsh(K)
        raise PencilError(f"K is numerically singular or indefinite: eigenvalues in "
                          f"[{w.min():.3e}, {w.max():.3e}]") from exc

    def reduce(C):
        X = sla.solve_triangular(L, C.toarray(), lower=True)
        return sla.solve_triangular(L, X.T, lower=True).T

    H = np.zeros((4 * n, 4 * n))
    for j in range(3):
        H[j * n:(j + 1) * n, (j + 1) * n:(j + 2) * n] = np.eye(n)
    for j, C in enumerate((coef.C0, coef.C1, coef.C2)):
        H[3 * n:, j * n:(j + 1) * n] = -reduce(C)
    if pair.variant == "second":
        H = H.T
    w, V = np.linalg.eig(H)
    blk = V[:n] if pair.variant == "first" else V[3 * n:]
    phi = sla.solve_triangular(L.T, blk, lower=False)
    return w, phi


def _shift_invert_operator(coef: PencilCoefficients, sigma: complex):
    """y -> (A - sigma B)^{-1} B y for the first companion pair, via one solve with L(sigma)."""
    n = coef.n
    solve = coef.factor(sigma)
    s = sigma

    def matvec(y):
        y = np.asarray(y).ravel()
        y1, y2, y3, y4 = y[:n], y[n:2 * n], y[2 * n:3 * n], y[3 * n:]
        w = s * s * y1 + s * y2 + y3
        rhs = -(coef.apply(4, y4 + s * w) + coef.apply(1, y1) + coef.apply(2, s * y1 + y2))
        x1 = solve(rhs)
        x2 = s * x1 + y1
        x3 = s * x2 + y2
        x4 = s * x3 + y3
        return np.concatenate([x1, x2, x3, x4])

    return spla.LinearOperator((4 * n, 4 * n), matvec=matvec, dtype=complex)


def _window_eigs(coef: PencilCoefficients, center: complex, radius: float, k0: int = 6, seed: int = 7):
    n = coef.n
    op = _shift_invert_operator(coef, center)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(4 * n) + 1j * rng.standard_normal(4 * n)
    k = min(k0, 4 * n - 2)
    while True:
        ncv = min(4 * n, max(2 * k + 1, k + 20))
        nu, Z = spla.eigs(op, k=k, which="LM", v0=v0, ncv=ncv, tol=1e-13, maxiter=20000)
        gam = center + 1.0 / nu
        if np.max(np.abs(gam - center)) > radius or k >= 4 * n - 2:
            break
        k = min(2 * k, 4 * n - 2)
    inside = np.abs(gam - center) <= radius
    return gam[inside], Z[:n, inside]


def solve_spectrum(pair: CompanionPair, window=None, tol: float = DEFAULT_RESIDUAL_TOL,
                   method: str = "auto", dense_limit: int = 4400):
    """Eigenpairs of the pencil, sorted by |Im g| then |Re g|.

    ``window`` is None (whole spectrum, dense) or a sequence of disks
    ``(center, radius)``; an eigenvalue is reported once, under the first disk that
    holds it.  ``method`` is 'dense', 'sparse' or 'auto' (dense when 4n <= dense_limit).
    """
    coef = pair.coefficients
    n = coef.n
    disks = None if window is None else [(complex(c), float(r)) for c, r in window]
    if method == "auto":
        method = "dense" if (disks is None or 4 * n <= dense_limit) else "sparse"
    if method == "dense":
        w, phi = _dense_eigs(pair)
        if disks is not None:
            keep = np.zeros(len(w), dtype=bool)
            for c, r in disks:
                keep |= np.abs(w - c) <= r
            w, phi = w[keep], phi[:, keep]
    elif method == "sparse":
        if disks is None:
            raise ValueError("the sparse solver needs a window")
        ws, phis = [], []
        for i, (c, r) in enumerate(disks):
            g, f = _window_eigs(coef, c, r)
            earlier = np.zeros(len(g), dtype=bool)
            for c2, r2 in disks[:i]:
                earlier |= np.abs(g - c2) <= r2
            ws.append(g[~earlier])
            phis.append(f[:, ~earlier])
        w = np.concatenate(ws) if ws else np.zeros(0, complex)
        phi = np.concatenate(phis, axis=1) if phis else np.zeros((n, 0), complex)
    else:
        raise ValueError("method must be 'dense', 'sparse' or 'auto'")

    out = []
    for j in range(len(w)):
        g = complex(w[j])
        v = normalize_vector(phi[:, j], coef.C4)
        res = coef.residual(g, v)
        out.append(EigenPair(g, v, res, bool(res <= tol)))
    out.sort(key=lambda p: sort_key(p.gamma))
    return out


def default_exclusion_tol(materials: MaterialConfig) -> float:
    return DEFAULT_EXCLUSION_TOL * (1 + materials.eps_max)


def filter_degenerate(eigenpairs, materials: MaterialConfig, exclusion_tol: float | None = None):
    """Split pairs into (retained, removed); removed iff |g^2 - eps_i| < exclusion_tol."""
    tol = default_exclusion_tol(materials) if exclusion_tol is None else exclusion_tol
    kept, removed = [], []
    for p in eigenpairs:
        g2 = p.gamma * p.gamma
        if min(abs(g2 - materials.eps1), abs(g2 - materials.eps2)) < tol:
            removed.append(p)
        else:
            kept.append(p)
    return kept, removed


@dataclass(eq=False)
class ModeChain:
    gamma: complex
    chain: list                   # constrained vectors phi_0..phi_m
    residuals: list               # relative residual of each chain equation
    cluster_id: int
    algebraic_multiplicity: int
    geometric_multiplicity: int
    truncated: bool = False
    members: tuple = field(default_factory=tuple)   # computed eigenvalues of the cluster

    @property
    def length(self) -> int:
        return len(self.chain)


def cluster_eigenvalues(gammas, cluster_tol: float = DEFAULT_CLUSTER_TOL):
    """Single-linkage clusters with |g_i - g_j| < cluster_tol (1 + |g|); returns label list."""
    g = np.asarray(gammas, dtype=complex)
    parent = list(range(len(g)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    order = np.argsort(g.real, kind="stable")
    for a in range(len(order)):
        i = order[a]
        for b in range(a + 1, len(order)):
            j = order[b]
            lim = cluster_tol * (1 + max(abs(g[i]), abs(g[j])))
            if g[j].real - g[i].real >= lim:
                break
            if abs(g[i] - g[j]) < lim:
                parent[find(j)] = find(i)
    roots = [find(i) for i in range(len(g))]
    labels, out = {}, []
    for r in roots:
        labels.setdefault(r, len(labels))
        out.append(labels[r])
    return out


def _chain_rhs(coef, gamma, chain):
    p = len(chain)
    rhs = np.zeros(coef.n, dtype=complex)
    for q in range(1, p + 1):
        rhs -= (coef.value(gamma, q) @ chain[p - q]) / math.factorial(q)
    return rhs


def _chain_residual(coef, gamma, chain) -> float:
    """Relative residual of sum_q L^(q)(g)/q! phi_{p-q} = 0 for the last member."""
    p = len(chain) - 1
    total = np.zeros(coef.n, dtype=complex)
    scale = 0.0
    for q in range(0, p + 1):
        term = (coef.value(gamma, q) @ chain[p - q]) / math.factorial(q)
        total += term
        scale += np.linalg.norm(term)
    scale = max(scale, np.linalg.norm(coef.C4 @ chain[0]))
    return float(np.linalg.norm(total) / scale)


def jordan_chains(eigenpairs, matrices, cluster_tol: float = DEFAULT_CLUSTER_TOL,
                  tol: float = DEFAULT_RESIDUAL_TOL, rank_tol: float = 1e-5):
    """Group eigenpairs into clusters and return one ModeChain per Jordan chain."""
    coef = PencilCoefficients.from_forms(matrices)
    pairs = list(eigenpairs)
    labels = cluster_eigenvalues([p.gamma for p in pairs], cluster_tol)
    groups = {}
    for lab, p in zip(labels, pairs):
        groups.setdefault(lab, []).append(p)
    chains = []
    for cid, lab in enumerate(sorted(groups, key=lambda l: sort_key(np.mean([p.gamma for p in groups[l]])))):
        members = groups[lab]
        a = len(members)
        gamma = complex(np.mean([p.gamma for p in members]))
        V = np.column_stack([p.vector for p in members])
        U, sv, _ = np.linalg.svd(V, full_matrices=False)
        g = int(np.sum(sv > rank_tol * sv[0]))
        X = U[:, :g]
        base = dict(cluster_id=cid, algebraic_multiplicity=a, geometric_multiplicity=g,
                    members=tuple(p.gamma for p in members))
        if g == a:
            for p in members:
                chains.append(ModeChain(gamma if a > 1 else p.gamma, [p.vector],
                                        [coef.residual(gamma if a > 1 else p.gamma, p.vector)], **base))
            continue
        chains.extend(_defective_chains(coef, gamma, X, a, tol, base))
    return chains


def _defective_chains(coef, gamma, X, a, tol, base):
    """Chains for a cluster whose eigenspace X (orthonormal columns) is too small."""
    n, g = X.shape
    L = coef.value(gamma)
    Q = X.T @ (coef.value(gamma, 1) @ X)
    _, qs, qvh = np.linalg.svd(Q)
    n0, n1, n2, n4 = coef.norms()
    ag = abs(gamma)
    qscale = n1 + 2 * ag * n2 + 4 * ag ** 3 * n4   # size of L'(g), independent of the chain
    null = int(np.sum(qs <= 1e-6 * qscale))
    # directions in the eigenspace that admit an associated vector come last in V^H
    coeffs = qvh.conj().T
    starts = [X @ coeffs[:, i] for i in range(g)]
    long_starts = set(range(g - null, g))
    border = sp.bmat([[L, sp.csr_matrix(X.conj())], [sp.csr_matrix(X.conj().T), None]], format="csc")
    lu = spla.splu(border)
    budget = a - g
    out = []
    for i, phi0 in enumerate(starts):
        phi0 = normalize_vector(phi0, coef.C4)
        chain = [phi0]
        res = [coef.residual(gamma, phi0)]
        truncated = False
        while i in long_starts and budget > 0:
            rhs = _chain_rhs(coef, gamma, chain)
            sol = lu.solve(np.concatenate([rhs, np.zeros(g, dtype=complex)]))
            cand = chain + [sol[:n]]
            r = _chain_residual(coef, gamma, cand)
            if not np.isfinite(r) or r > tol:
                truncated = True
                break
            chain, res = cand, res + [r]
            budget -= 1
        out.append(ModeChain(gamma, chain, res, truncated=truncated, **base))
    if budget > 0:
        for c in out:
            c.truncated = True
    return out
