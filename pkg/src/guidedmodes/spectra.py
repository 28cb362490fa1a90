"""Scalar quartic of the pencil, localization regions and their certificates.

For a field f, f^H L(g) f = (e1 - g^2)(e2 - g^2)(k - f(g)) with

    f(g) = (a1 + g s)/(e1 - g^2) + (a2 - g s)/(e2 - g^2),

so every eigenvalue of the pencil is a root of the cleared quartic of its own
eigenvector.  When eps_max < 9 eps_min and the Rayleigh quotient
(eps|Pi|^2 + |Psi|^2) / (|grad Pi|^2 + |grad Psi|^2/eps) never exceeds 1/2,
each such quartic has one root in [-sqrt(eps_max), -sqrt(eps_min)], one in
[sqrt(eps_min), sqrt(eps_max)] and two outside the disks |g -+ p| < r_tilde,
p = (sqrt(eps_min) + sqrt(eps_max))/2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linear_sum_assignment

from .forms import FormMatrices, ScalarFormValues
from .geometry import MaterialConfig
from .pencil import filter_degenerate, solve_spectrum, sort_key

REAL_TOL = 1e-8


class SpectraError(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    holds: bool
    margin: float
    value: float | None = None

    def to_dict(self, value_name="value"):
        d = {"holds": self.holds, "margin": self.margin}
        if self.value is not None:
            d[value_name] = self.value
        return d


def check_condition_43(materials: MaterialConfig) -> Verdict:
    """eps_max < 9 eps_min, margin 9 eps_min - eps_max."""
    margin = 9.0 * materials.eps_min - materials.eps_max
    return Verdict(bool(margin > 0), float(margin))


def _constrained_dense(matrices: FormMatrices):
    return matrices.K.toarray(), matrices.A2.toarray()


def check_condition_44(matrices: FormMatrices, dense_limit: int = 2500) -> Verdict:
    """mu* = max f^H K f / f^H A2 f over the constrained space; holds iff mu* <= 1/2.

    Small problems use a dense symmetric solve on the constrained matrices.
    Larger ones use the block structure: the Pi block is a Dirichlet problem on
    interior nodes and the Psi block a Neumann problem whose zero-mean space is
    the mass-orthogonal complement of constants, so mu* is the reciprocal of the
    smallest relevant eigenvalue of each block.
    """
    if matrices.n <= dense_limit:
        K, A2 = _constrained_dense(matrices)
        lam = sla.eigh(A2, K, eigvals_only=True)
        if lam[0] <= 1e-12 * abs(lam[-1]):
            raise SpectraError("A2 is singular on the constrained space")
        mu = 1.0 / lam[0]
    else:
        mu = max(_mu_pi(matrices), _mu_psi(matrices))
    return Verdict(bool(mu <= 0.5), float(0.5 - mu), float(mu))


def _smallest_gen(A, M, k=1):
    n = A.shape[0]
    shift = -1e-3 * abs(A.diagonal()).max() / max(abs(M.diagonal()).max(), 1e-300)
    v0 = np.random.default_rng(7).standard_normal(n)
    vals = spla.eigsh(sp.csc_matrix(A), k=k, M=sp.csc_matrix(M), sigma=shift, which="LM",
                      v0=v0, return_eigenvectors=False)
    return np.sort(vals)


def _mu_pi(matrices):
    N = matrices.nodal
    npi = matrices.n_pi
    lam = _smallest_gen(N["A2"][:npi, :npi], N["K"][:npi, :npi])[0]
    if lam <= 0:
        raise SpectraError("A2 is singular on the Pi block")
    return 1.0 / lam


def _mu_psi(matrices):
    N = matrices.nodal
    npi = matrices.n_pi
    Kpsi = N["K"][npi:, npi:]
    Apsi = N["A2"][npi:, npi:]
    lam = _smallest_gen(Apsi, Kpsi, k=2)
    if lam[1] <= 1e-10 * abs(Apsi.diagonal()).max():
        raise SpectraError("A2 is singular on the zero-mean Psi space")
    return 1.0 / lam[1]


@dataclass(frozen=True)
class LocalizationRegions:
    """Intervals I-, I+ and disks sigma-+ of radius r around -+p_mid; sigma_1 is the rest."""

    eps_min: float
    eps_max: float
    r_tilde: float

    def __post_init__(self):
        if not self.r_tilde > self.half_gap:
            raise SpectraError(f"r_tilde = {self.r_tilde} must exceed (sqrt(eps_max)-sqrt(eps_min))/2 "
                               f"= {self.half_gap}")

    @classmethod
    def from_materials(cls, materials: MaterialConfig, r_tilde: float | None = None):
        r_t = analytic_r_tilde(materials) if r_tilde is None else r_tilde
        if r_t is None:
            raise SpectraError("no admissible r_tilde: eps_max >= 9 eps_min")
        return cls(materials.eps_min, materials.eps_max, float(r_t))

    @property
    def half_gap(self) -> float:
        return (math.sqrt(self.eps_max) - math.sqrt(self.eps_min)) / 2

    @property
    def p(self) -> float:
        return (math.sqrt(self.eps_min) + math.sqrt(self.eps_max)) / 2

    @property
    def delta_tilde(self) -> float:
        return self.r_tilde - self.half_gap

    @property
    def delta0(self) -> float:
        return self.delta_tilde / 2

    @property
    def r(self) -> float:
        return self.half_gap + self.delta0

    @property
    def I_plus(self):
        return (math.sqrt(self.eps_min), math.sqrt(self.eps_max))

    @property
    def I_minus(self):
        return (-math.sqrt(self.eps_max), -math.sqrt(self.eps_min))

    def in_interval(self, g, tol: float = REAL_TOL) -> bool:
        g = complex(g)
        if abs(g.imag) > tol * (1 + abs(g)):
            return False
        x, t = abs(g.real), tol * (1 + abs(g))
        return self.I_plus[0] - t <= x <= self.I_plus[1] + t

    def disk_distance(self, g) -> float:
        """Distance from g to the nearer disk center -+p."""
        g = complex(g)
        return min(abs(g - self.p), abs(g + self.p))

    def region(self, g) -> str:
        g = complex(g)
        if abs(g - self.p) < self.r:
            return "sigma_plus"
        if abs(g + self.p) < self.r:
            return "sigma_minus"
        if abs(g - self.p) == self.r or abs(g + self.p) == self.r:
            return "contour"
        return "sigma_1"

    def check_invariants(self) -> bool:
        a, b = self.I_plus
        return bool(self.r < self.r_tilde and b - self.p < self.r and self.p - a < self.r)

    def to_dict(self):
        return {"eps_min": self.eps_min, "eps_max": self.eps_max, "p": self.p, "r": self.r,
                "r_tilde": self.r_tilde, "delta_tilde": self.delta_tilde, "delta0": self.delta0,
                "I_minus": list(self.I_minus), "I_plus": list(self.I_plus)}


def analytic_r_tilde(materials: MaterialConfig):
    """Lower bound for |g_{3,4} -+ p| valid for every field when the two conditions hold.

    With theta >= 1, |g1 g2| <= eps_max and |g1 + g2| <= d = sqrt(eps_max) - sqrt(eps_min),
    the completion roots satisfy |g_{3,4} -+ p|^2 >= 2 eps_min - d^2/4.  Returns None
    when this does not exceed d/2.
    """
    d = math.sqrt(materials.eps_max) - math.sqrt(materials.eps_min)
    val = 2 * materials.eps_min - d * d / 4
    if val <= (d / 2) ** 2:
        return None
    return math.sqrt(val)


@dataclass
class QuarticRoots:
    roots: np.ndarray                 # all four, sorted by sort_key
    gamma_minus: complex | None       # root in I-
    gamma_plus: complex | None        # root in I+
    others: list                      # remaining roots
    pattern: bool                     # exactly one root in each interval
    far_from_disks: bool | None = None
    min_disk_distance: float | None = None


def scalar_quartic_roots(values: ScalarFormValues, materials: MaterialConfig, r_tilde: float | None = None,
                         certified: bool = False, tol: float = REAL_TOL) -> QuarticRoots:
    """Roots of the cleared quartic via its companion matrix, classified by interval."""
    if not values.k > 0:
        raise SpectraError("k must be positive (zero field)")
    coef = values.quartic_coefficients(materials)
    roots = np.roots(coef / coef[0]).astype(complex)
    roots = np.array(sorted(roots, key=sort_key))
    regions = LocalizationRegions(materials.eps_min, materials.eps_max,
                                  r_tilde if r_tilde is not None else np.inf)
    lo, hi = regions.I_plus
    minus, plus, others = [], [], []
    for g in roots:
        t = tol * (1 + abs(g))
        if abs(g.imag) <= t and lo - t <= g.real <= hi + t:
            plus.append(complex(g.real))
        elif abs(g.imag) <= t and -hi - t <= g.real <= -lo + t:
            minus.append(complex(g.real))
        else:
            others.append(complex(g))
    pattern = len(minus) == 1 and len(plus) == 1
    out = QuarticRoots(roots, minus[0] if len(minus) == 1 else None, plus[0] if len(plus) == 1 else None,
                       others, pattern)
    if others:
        out.min_disk_distance = float(min(regions.disk_distance(g) for g in others))
    if r_tilde is not None and others:
        out.far_from_disks = bool(out.min_disk_distance > r_tilde)
    if certified:
        if not pattern:
            raise SpectraError(f"certified quartic without one root per interval: {roots}")
        if out.far_from_disks is False:
            raise SpectraError(f"certified quartic with a completion root inside the r_tilde disks: {roots}")
    return out


def viete_completion(gamma1, gamma2, theta, materials: MaterialConfig):
    """Remaining two roots from the interval roots; returns (g3, g4, flagged).

    g_{3,4} = -(g1+g2)/2 +- (i/2) sqrt(4 e1 e2 theta/|g1 g2| - (g1+g2)^2).  A negative
    radicand is still evaluated (the roots come out real) and flagged.
    """
    g1, g2 = float(np.real(gamma1)), float(np.real(gamma2))
    if g1 * g2 == 0:
        raise SpectraError("gamma1 * gamma2 must be nonzero")
    e1, e2 = materials.eps1, materials.eps2
    rad = 4 * e1 * e2 * theta / abs(g1 * g2) - (g1 + g2) ** 2
    root = np.sqrt(complex(rad))
    c = -(g1 + g2) / 2
    return complex(c + 0.5j * root), complex(c - 0.5j * root), bool(rad < 0)


def f_lower_bound_margin(values: ScalarFormValues, materials: MaterialConfig, samples: int = 401):
    """min over a dense sample of (-sqrt(eps_min), sqrt(eps_min)) of f(g) - a2/2, relative to a2."""
    a = math.sqrt(materials.eps_min)
    g = np.linspace(-a, a, samples + 2)[1:-1]
    f = values.f_value(g, materials)
    return float(np.min(f - values.a2_weighted / 2) / max(values.a2_weighted, 1e-300))


def inequality_margins(values: ScalarFormValues, materials: MaterialConfig) -> dict:
    """Relative margins (>= 0 when the inequality holds) of the region estimates.

    'cauchy_j': 4 int|grad Pi|^2 int|grad Psi|^2 - s^2 over region j
    'region_j': a^(j) - sqrt(eps_j)|s|
    Each is divided by the natural scale of its left-hand side.
    """
    out = {}
    eps = (materials.eps1, materials.eps2)
    for j in range(2):
        P, Q = values.grad_pi_region[j], values.grad_psi_region[j]
        scale = max(4 * P * Q, values.s ** 2, 1e-300)
        out[f"cauchy_{j + 1}"] = (4 * P * Q - values.s ** 2) / scale
        a = values.a1_region[j]
        scale = max(a, math.sqrt(eps[j]) * abs(values.s), 1e-300)
        out[f"region_{j + 1}"] = (a - math.sqrt(eps[j]) * abs(values.s)) / scale
    return out


def random_fields(matrices: FormMatrices, count: int, seed: int = 0, smooth_fraction: float = 0.5,
                  max_passes: int = 8):
    """Random complex constrained vectors.

    A fraction of them is smoothed by a random number (1..max_passes) of inverse
    iterations x <- (K + A2)^{-1} K x, which pushes them toward the fields of
    smallest Rayleigh quotient.
    """
    rng = np.random.default_rng(seed)
    n = matrices.n
    K = matrices.nodal["K"]
    A = matrices.nodal["A2"]
    R = matrices.R
    lu = None
    out = []
    for _ in range(count):
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        if rng.random() < smooth_fraction:
            if lu is None:
                lu = spla.splu(sp.csc_matrix(R.T @ (K + A) @ R))
            for _ in range(int(rng.integers(1, max_passes + 1))):
                b = R.T @ (K @ (R @ x))
                x = lu.solve(b.real) + 1j * lu.solve(b.imag)
                x /= np.linalg.norm(x)
        out.append(x)
    return out


def empirical_r_tilde(values_list, materials: MaterialConfig, factor: float = 0.9):
    """factor * min over fields of the distance of the completion roots to -+p_mid."""
    dmin = np.inf
    for v in values_list:
        q = scalar_quartic_roots(v, materials)
        if q.min_disk_distance is not None:
            dmin = min(dmin, q.min_disk_distance)
    return float(factor * dmin)


def verify_localization(gammas, regions: LocalizationRegions, cond43: Verdict, cond44: Verdict,
                        tol: float = REAL_TOL) -> dict:
    """Report eigenvalues outside I- u I+ u sigma_1 and real eigenvalues in (-sqrt(eps_min), sqrt(eps_min))."""
    certified = bool(cond43.holds and cond44.holds)
    report = {"certified": certified, "status": "certified" if certified else "not certified",
              "regions": regions.to_dict(), "violations": [], "count": len(gammas)}
    a = math.sqrt(regions.eps_min)
    for g in gammas:
        g = complex(g)
        t = tol * (1 + abs(g))
        where = regions.region(g)
        if where != "sigma_1" and not regions.in_interval(g, tol):
            report["violations"].append({"gamma": [g.real, g.imag], "kind": "disk",
                                         "margin": float(regions.disk_distance(g) - regions.r)})
        if abs(g.imag) <= t and abs(g.real) < a - t:
            report["violations"].append({"gamma": [g.real, g.imag], "kind": "real_core",
                                         "margin": float(abs(g.real) - a)})
    report["n_violations"] = len(report["violations"])
    report["passed"] = (report["n_violations"] == 0) if certified else None
    return report


def certificates(materials: MaterialConfig, matrices: FormMatrices, gammas, r_tilde: float | None = None) -> dict:
    """Certificate JSON payload: both conditions and the localization verdict."""
    c43 = check_condition_43(materials)
    c44 = check_condition_44(matrices)
    out = {"condition43": c43.to_dict(), "condition44": c44.to_dict("mu_star")}
    try:
        regions = LocalizationRegions.from_materials(materials, r_tilde)
    except SpectraError as exc:
        out["localization"] = {"certified": False, "status": "not certified", "reason": str(exc),
                               "violations": []}
        return out
    out["localization"] = verify_localization(gammas, regions, c43, c44)
    return out


# Spectrum selection near the origin

def in_accumulation_interval(g, materials: MaterialConfig, tol: float = REAL_TOL) -> bool:
    g = complex(g)
    t = tol * (1 + abs(g))
    lo, hi = math.sqrt(materials.eps_min), math.sqrt(materials.eps_max)
    return abs(g.imag) <= t and lo - t <= abs(g.real) <= hi + t


def select_low_modes(eigenpairs, materials: MaterialConfig, count: int, exclusion_tol: float | None = None):
    """First ``count`` eigenpairs in sort order, skipping real ones in I- u I+ and degenerate ones."""
    kept, _ = filter_degenerate(eigenpairs, materials, exclusion_tol)
    kept = [p for p in kept if not in_accumulation_interval(p.gamma, materials)]
    kept.sort(key=lambda p: sort_key(p.gamma))
    return kept[:count]


def axis_disks(materials: MaterialConfig, height: float, shrink: float = 0.95):
    """Equal disks centered on the imaginary axis, all avoiding I- u I+.

    Radius rho = shrink * sqrt(eps_min); centers 0, +-i rho, +-2i rho, ...  Neighbouring
    disks overlap, so the strip |Re g| <= (sqrt(3)/2) rho is covered up to the last
    center.  Returns (disks, covered_height, strip_half_width).
    """
    rho = shrink * math.sqrt(materials.eps_min)
    disks = [(0j, rho)]
    c = 0.0
    while c < height:
        c += rho
        disks.append((1j * c, rho))
        disks.append((-1j * c, rho))
    return disks, c, math.sqrt(3) / 2 * rho


def low_spectrum(pair, materials: MaterialConfig, count: int, tol: float = 1e-8,
                 exclusion_tol: float | None = None, method: str = "auto", max_height: float = 50.0,
                 return_all: bool = False):
    """The ``count`` lowest eigenpairs (sort order, accumulation intervals excluded).

    Dense solves return everything.  Sparse solves use a growing chain of disks
    along the imaginary axis and accept the result once ``count`` modes lie below
    the covered height; eigenvalues far from the axis (outside the covered strip
    and the disks) are not searched for.  With ``return_all`` the pair
    (selected, every converged eigenpair found) is returned.
    """
    if method == "dense" or (method == "auto" and 4 * pair.n <= 4400):
        allp = solve_spectrum(pair, tol=tol, method="dense")
        low = select_low_modes(allp, materials, count, exclusion_tol)
        return (low, allp) if return_all else low
    height = 2.0
    while True:
        disks, covered, _ = axis_disks(materials, height)
        found = solve_spectrum(pair, window=disks, tol=tol, method="sparse")
        low = select_low_modes(found, materials, 10 ** 9, exclusion_tol)
        inside = [p for p in low if abs(p.gamma.imag) <= covered]
        if len(inside) >= count:
            return (inside[:count], found) if return_all else inside[:count]
        if height >= max_height:
            raise SpectraError(f"could not locate {count} low modes below |Im g| = {max_height}")
        height = min(2 * height, max_height)


def match_eigenvalues(reference, candidates):
    """Assignment of candidates to reference eigenvalues minimizing total distance.

    Returns (ref_index, cand_index) arrays.
    """
    a = np.asarray(reference, dtype=complex)
    b = np.asarray(candidates, dtype=complex)
    cost = np.abs(a[:, None] - b[None, :])
    return linear_sum_assignment(cost)
