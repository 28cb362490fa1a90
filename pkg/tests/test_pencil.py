import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from guidedmodes.forms import scalar_forms
from guidedmodes.geometry import MaterialConfig
from guidedmodes.pencil import (CompanionPair, EigenPair, PencilCoefficients, cluster_eigenvalues,
                                default_exclusion_tol, filter_degenerate, jordan_chains, linearize, solve_spectrum,
                                sort_key)
from guidedmodes.spectra import low_spectrum, match_eigenvalues

MATS = MaterialConfig(1.0, 4.0)


def scalar_pencil(K, A1, A2, S, mats=MATS):
    return CompanionPair(PencilCoefficients.from_scalars(K, A1, A2, S, mats))


def quartic_roots(K, A1, A2, S, mats=MATS):
    e1, e2 = mats.eps1, mats.eps2
    return np.roots([K, 0.0, A1 - (e1 + e2) * K, (e1 - e2) * S, e1 * e2 * (K - A2)])


@settings(max_examples=40, deadline=None)
@given(K=st.floats(0.2, 3.0), A1=st.floats(0.0, 10.0), A2=st.floats(0.0, 10.0), S=st.floats(-3.0, 3.0))
def test_scalar_toy_matches_quartic_roots(K, A1, A2, S):
    got = np.array([p.gamma for p in solve_spectrum(scalar_pencil(K, A1, A2, S), method="dense")])
    ref = quartic_roots(K, A1, A2, S)
    assert len(got) == 4
    r, c = match_eigenvalues(ref, got)
    assert np.max(np.abs(ref[r] - got[c])) <= 1e-6 * (1 + np.max(np.abs(ref)))


def test_double_root_gives_chain_of_length_two():
    # (g - 1/2)^2 (g^2 + g + 2): K = 1, A1 = q + 17/4, A2 = 1 - q/16, S = (q - 1/4)/3 with q = 2
    q = 2.0
    pair = scalar_pencil(1.0, q + 4.25, 1 - q / 16, (q - 0.25) / 3)
    eig = solve_spectrum(pair, method="dense", tol=1e-6)
    near = [p for p in eig if abs(p.gamma - 0.5) < 1e-4]
    assert len(near) == 2
    chains = jordan_chains(near, pair.coefficients, tol=1e-6)
    assert len(chains) == 1
    c = chains[0]
    assert c.length == 2 and c.algebraic_multiplicity == 2 and c.geometric_multiplicity == 1
    assert max(c.residuals) <= 1e-6


def test_simple_eigenvalue_chain_length_one(filled8):
    chains = filled8.chains(10)
    for c in chains:
        assert c.length == 1 and not c.truncated
        assert c.residuals[0] <= 1e-8


def test_spectrum_size_symmetry_and_residuals(filled8):
    eig = filled8.spectrum()
    n = filled8.forms.n
    assert len(eig) == 4 * n
    kept, removed = filter_degenerate(eig, filled8.materials)
    g = np.array([p.gamma for p in kept])
    for image in (-g, np.conj(g)):
        r, c = match_eigenvalues(g, image)
        assert np.max(np.abs(g[r] - image[c])) <= 1e-6 * (1 + np.abs(g).max())
    assert max(p.residual for p in kept) <= 1e-8


def test_rayleigh_identity_for_eigenpairs(filled8):
    F, mesh, mats = filled8.forms, filled8.mesh, filled8.materials
    for c in filled8.chains(10):
        f = c.chain[0]
        v = scalar_forms(f, F, mesh)
        g = c.gamma
        rhs = (mats.eps1 - g * g) * (mats.eps2 - g * g) * (v.k - v.f_value(g, mats))
        scale = abs(mats.eps1 * mats.eps2) * (v.k + sum(v.a1_region) + v.a2_weighted)
        assert abs(rhs) <= 1e-8 * scale


def test_homogeneous_square_oracle(empty8):
    # coarse mesh (h = pi/8): second-order error of a few percent
    low = low_spectrum(empty8.pair, empty8.materials, 8)
    lam = np.sort((1 - np.array([p.gamma for p in low]) ** 2).real)
    assert np.allclose(lam[:4], 1.0, rtol=0.05) and np.allclose(lam[4:], 2.0, rtol=0.05)
    gam = np.array([p.gamma for p in low])
    assert np.sum(np.abs(gam - 1j) < 0.05) == 2 and np.sum(np.abs(gam + 1j) < 0.05) == 2


def test_variant_independence(filled8):
    a = linearize(filled8.forms, variant="first")
    b = linearize(filled8.forms, variant="second")
    wa = sla.eigvals(a.A.toarray(), b=a.B.toarray())
    wb = sla.eigvals(b.A.toarray(), b=b.B.toarray())
    r, c = match_eigenvalues(wa, wb)
    small = np.abs(wa[r]) < 5
    assert np.max(np.abs(wa[r] - wb[c])[small]) < 1e-6


def test_companion_b_bounded_below(filled8):
    pair = linearize(filled8.forms)
    smin = np.linalg.svd(pair.B.toarray(), compute_uv=False).min()
    kmin = np.linalg.eigvalsh(filled8.forms.K.toarray()).min()
    assert smin >= min(1.0, kmin) * (1 - 1e-10)


def test_sparse_matches_dense(filled8):
    dense = low_spectrum(filled8.pair, filled8.materials, 10, method="dense")
    sparse = low_spectrum(filled8.pair, filled8.materials, 10, method="sparse")
    a = np.array([p.gamma for p in dense])
    b = np.array([p.gamma for p in sparse])
    assert np.max(np.abs(a - b)) < 1e-8


def test_filter_degenerate_rule():
    mats = MaterialConfig(1.0, 4.0)
    v = np.ones(1)
    pairs = [EigenPair(1.0 + 0j, v, 0.0), EigenPair(2.0 + 1e-12j, v, 0.0), EigenPair(1j, v, 0.0)]
    kept, removed = filter_degenerate(pairs, mats)
    assert [p.gamma for p in kept] == [1j]
    assert len(removed) == 2
    tol = default_exclusion_tol(mats)
    edge = math.sqrt(1.0 + tol)   # |g^2 - eps1| == tol exactly is kept (strict rule)
    kept, _ = filter_degenerate([EigenPair(complex(edge), v, 0.0)], mats, exclusion_tol=abs(edge ** 2 - 1.0))
    assert len(kept) == 1


def test_linearize_rejects_bad_leading_coefficient():
    from guidedmodes.pencil import PencilError
    with pytest.raises(PencilError):
        linearize(PencilCoefficients.from_scalars(-1.0, 1.0, 1.0, 0.0, MATS))


def test_clusters_and_sort_key():
    labels = cluster_eigenvalues([1.0, 1.0 + 1e-9, 2.0, 1j])
    assert labels[0] == labels[1] and len(set(labels)) == 3
    g = [0.5j, -0.5j, 0.3, -0.3, 1 + 1e-18j]
    s = sorted(g, key=sort_key)
    assert s[:2] == [-0.3, 0.3]
    assert s[2] == 1 + 1e-18j
