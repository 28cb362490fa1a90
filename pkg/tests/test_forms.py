import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from guidedmodes.forms import (area_s_oracle, assemble_forms, p1_element_matrices, pencil_value, read_coo,
                               scalar_forms, write_coo)
from guidedmodes.geometry import MaterialConfig, build_rect_with_inclusion
from guidedmodes.spectra import inequality_margins

from conftest import INCLUSION, PI, SQUARE, random_vector


def test_reference_triangle_stiffness():
    K, _ = p1_element_matrices(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_symmetry_and_definiteness(filled8):
    F = filled8.forms
    for name in ("K", "A1", "A2", "S"):
        X = F.nodal[name]
        assert abs(X - X.T).max() <= 1e-13 * abs(X).max()
    K = F.K.toarray()
    assert np.linalg.eigvalsh(K).min() > 0
    for name in ("A1", "A2"):
        assert np.linalg.eigvalsh(getattr(F, name).toarray()).min() > -1e-10
    # S couples the Pi and Psi blocks only
    S = F.nodal["S"].toarray()
    npi = F.n_pi
    assert not S[:npi, :npi].any() and not S[npi:, npi:].any()


def test_constant_psi_in_stiffness_kernel(filled8):
    F = filled8.forms
    N = filled8.mesh.n_nodes
    x = np.concatenate([np.zeros(F.n_pi), np.ones(N)])
    assert np.abs(F.nodal["A1"] @ x).max() < 1e-12
    assert np.abs(F.nodal["A2"] @ x).max() < 1e-12


def test_homogeneous_forms(empty8, rng):
    F = empty8.forms
    assert abs(F.A1 - F.A2).max() < 1e-13
    C0, C1, C2, C4 = F.coefficients()
    assert abs(C1).max() == 0
    f = random_vector(rng, F.n)
    v = scalar_forms(f, F, empty8.mesh)
    assert math.isclose(sum(v.a1_region), v.a2_weighted, rel_tol=1e-12)


def test_a1_prime_regionwise_oracle(filled8):
    # region by region: Pi block eps1 K_1 - eps2 K_2, Psi block K_1 - K_2
    F = filled8.forms
    K1, K2 = F.stiffness_region
    nodal = sp.block_diag([F.P.T @ (1.0 * K1 - 4.0 * K2) @ F.P, K1 - K2])
    oracle = F.R.T @ nodal @ F.R
    Ap = F.a1_prime()
    assert abs(Ap - oracle).max() < 1e-12 * abs(oracle).max()
    assert abs(Ap - Ap.T).max() < 1e-12 * abs(oracle).max()


def test_quadratic_forms_match_direct_integration(filled8, rng):
    F, mesh = filled8.forms, filled8.mesh
    for _ in range(20):
        f = random_vector(rng, F.n)
        v = scalar_forms(f, F, mesh)
        assert math.isclose(v.k, np.vdot(f, F.K @ f).real, rel_tol=1e-12)
        assert math.isclose(sum(v.a1_region), np.vdot(f, F.A1 @ f).real, rel_tol=1e-12)
        assert math.isclose(v.a2_weighted, np.vdot(f, F.A2 @ f).real, rel_tol=1e-12)
        q = np.vdot(f, F.S @ f)
        assert abs(q.imag) < 1e-12 * abs(F.S).max() * np.vdot(f, f).real
        assert abs(v.s - q.real) <= 1e-12 * max(1.0, abs(q))


def test_s_from_area_oracle(filled8, rng):
    F, mesh = filled8.forms, filled8.mesh
    f = random_vector(rng, F.n)
    assert math.isclose(scalar_forms(f, F, mesh).s, area_s_oracle(f, F, mesh), rel_tol=1e-10, abs_tol=1e-12)


def test_s_vanishes_without_pi(filled8, rng):
    F, mesh = filled8.forms, filled8.mesh
    pi = np.zeros(mesh.n_nodes)
    psi = rng.standard_normal(mesh.n_nodes)
    assert abs(scalar_forms((pi, psi - psi.mean()), F, mesh).s) < 1e-14


def test_orientation_flip_changes_sign_of_s(filled8):
    mesh = filled8.mesh
    F2 = assemble_forms(mesh.with_reversed_interface(), filled8.materials)
    assert abs(F2.nodal["S"] + filled8.forms.nodal["S"]).max() < 1e-14


def test_pencil_value_at_zero(filled8):
    F = filled8.forms
    L0 = pencil_value(0.0, F)
    assert abs(L0 - 4.0 * (F.K - F.A2)).max() < 1e-12


def test_rayleigh_identity_random_gamma(filled8, rng):
    F, mesh, mats = filled8.forms, filled8.mesh, filled8.materials
    for _ in range(10):
        f = random_vector(rng, F.n)
        g = complex(*rng.uniform(-2, 2, 2))
        v = scalar_forms(f, F, mesh)
        lhs = np.vdot(f, pencil_value(g, F) @ f)
        rhs = (mats.eps1 - g * g) * (mats.eps2 - g * g) * (v.k - v.f_value(g, mats))
        assert abs(lhs - rhs) <= 1e-10 * abs(rhs)
        assert np.allclose(np.polyval(v.quartic_coefficients(mats), g), lhs, rtol=1e-10)


def test_spectral_symmetry_of_pencil(filled8, rng):
    """(g, (Pi, Psi)) -> (-g, (Pi, -Psi)) maps L(g) onto a congruent matrix."""
    F = filled8.forms
    D = sp.diags(np.concatenate([np.ones(F.n_pi), -np.ones(F.n - F.n_pi)]))
    g = 0.7 + 0.3j
    assert abs(D @ pencil_value(g, F) @ D - pencil_value(-g, F)).max() < 1e-12


def test_coo_roundtrip(tmp_path, filled8):
    X = filled8.forms.nodal["S"]
    write_coo(tmp_path / "S.coo", X)
    Y = read_coo(tmp_path / "S.coo")
    assert Y.shape == X.shape and abs(X - Y).max() == 0


def test_rejects_low_permittivity():
    with pytest.raises(ValueError):
        MaterialConfig(1.0, 0.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), e2=st.floats(1.0, 8.0), smooth=st.booleans())
def test_inequalities_hold_for_random_fields(seed, e2, smooth):
    mesh = _coarse_mesh()
    F = assemble_forms(mesh, MaterialConfig(1.0, e2))
    rng = np.random.default_rng(seed)
    f = random_vector(rng, F.n)
    if smooth:
        f = np.linalg.solve((F.K + F.A2).toarray(), F.K @ f)
    v = scalar_forms(f, F, mesh)
    assert v.k > 0 and min(v.a1_region) >= 0
    m = inequality_margins(v, F.materials)
    assert min(m.values()) >= -1e-12


_MESH = {}


def _coarse_mesh():
    if "m" not in _MESH:
        _MESH["m"] = build_rect_with_inclusion(SQUARE, INCLUSION, PI / 8)
    return _MESH["m"]
