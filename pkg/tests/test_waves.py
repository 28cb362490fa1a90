import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guidedmodes.waves import (DegenerationError, TransversalField, build_transversal, field_energy,
                               longitudinal_residual, longitudinal_vectors, maxwell_residuals, principal_angles,
                               solve_first_order_system, trace_residuals, transversal_step, write_field_csv)

from conftest import PI, Setup, SQUARE, INCLUSION, random_vector


def tm_chain(setup):
    """A low mode of the homogeneous square whose Psi part vanishes."""
    for c, fs in zip(setup.chains(8), setup.fields(8)):
        f = fs[0]
        if np.abs(f.Psi).max() < 1e-8 * np.abs(f.Pi).max() and abs(c.gamma.imag) > 0.5:
            return c, fs
    raise AssertionError("no TM mode among the low modes")


def test_recursion_matches_first_order_solve(filled8, rng):
    mesh, mats = filled8.mesh, filled8.materials
    Pi, Psi = random_vector(rng, mesh.n_nodes), random_vector(rng, mesh.n_nodes)
    pE = random_vector(rng, 2 * mesh.n_triangles).reshape(-1, 2)
    pH = random_vector(rng, 2 * mesh.n_triangles).reshape(-1, 2)
    g = 0.3 + 1.1j
    for prev in ((None, None), (pE, pH)):
        E, H, _ = transversal_step(Pi, Psi, g, mesh, mats, *prev)
        E2, H2 = solve_first_order_system(Pi, Psi, g, mesh, mats, *prev)
        assert np.allclose(E, E2, atol=1e-10 * np.abs(E).max())
        assert np.allclose(H, H2, atol=1e-10 * np.abs(H).max())


def test_zero_previous_fields_reproduce_base_case(filled8, rng):
    mesh, mats = filled8.mesh, filled8.materials
    Pi, Psi = random_vector(rng, mesh.n_nodes), random_vector(rng, mesh.n_nodes)
    z = np.zeros((mesh.n_triangles, 2), complex)
    a = transversal_step(Pi, Psi, 0.7j, mesh, mats)
    b = transversal_step(Pi, Psi, 0.7j, mesh, mats, z, z)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@settings(max_examples=20, deadline=None)
@given(re=st.floats(-3, 3), im=st.floats(-3, 3))
def test_linearity_in_the_longitudinal_data(re, im):
    s = _setup()
    c = s.chains(4)[0]
    f = build_transversal(c, s.mesh, s.materials, s.forms)[0]
    scale = complex(re, im)
    E, H, _ = transversal_step(scale * f.Pi, scale * f.Psi, f.gamma, s.mesh, s.materials)
    assert np.allclose(E, scale * f.E, atol=1e-12 * (1 + abs(scale)) * np.abs(f.E).max())
    assert np.allclose(H, scale * f.H, atol=1e-12 * (1 + abs(scale)) * np.abs(f.H).max())


def test_degeneration_refused(filled8, rng):
    mesh = filled8.mesh
    Pi = random_vector(rng, mesh.n_nodes)
    with pytest.raises(DegenerationError):
        transversal_step(Pi, Pi, 1.0, mesh, filled8.materials)
    with pytest.raises(DegenerationError):
        transversal_step(Pi, Pi, -2.0, mesh, filled8.materials)


def test_tm_mode_against_closed_form():
    s = Setup(SQUARE, INCLUSION, PI / 16, (1.0, 1.0))
    c, fs = tm_chain(s)
    f = fs[0]
    g = c.gamma
    xc = s.mesh.centroids()
    # normalize the discrete Pi against sin x sin y at the nodes
    X, Y = s.mesh.nodes[:, 0], s.mesh.nodes[:, 1]
    ref_pi = np.sin(X) * np.sin(Y)
    a = np.vdot(ref_pi, f.Pi) / np.vdot(ref_pi, ref_pi)
    E1 = 1j * g / (1 - g * g) * np.cos(xc[:, 0]) * np.sin(xc[:, 1])
    err = np.abs(f.E[:, 0] / a - E1).max() / np.abs(E1).max()
    assert abs(abs(g) - 1) < 0.01
    assert err < 0.1


def test_maxwell_residuals_of_discrete_modes(filled8):
    entries = [e for fs in filled8.fields(6) for e in maxwell_residuals(fs, filled8.mesh, filled8.materials,
                                                                          filled8.forms)]
    for e in entries:
        for k in ("eq_a", "eq_b", "eq_d", "eq_e", "weak_first", "weak_second"):
            assert e[k] < 1e-9
        assert e["smooth_max"] < 0.1 * filled8.h


def test_trace_residuals(empty8, filled8):
    c, fs = tm_chain(empty8)
    e = trace_residuals(fs, empty8.mesh, empty8.materials)[0]
    assert e["H_n_outer"] < 1e-12
    assert e["scalar_case"] and e["E_jump_identity"] is None
    for e in trace_residuals([f for fs in filled8.fields(6) for f in fs], filled8.mesh, filled8.materials):
        assert not e["scalar_case"]
        assert e["E_tau_outer"] < filled8.h and e["H_n_outer"] < filled8.h
        assert np.isfinite(e["E_jump_identity"]) and np.isfinite(e["H_jump_identity"])


def test_longitudinal_residual_simple_modes(filled8):
    for fs in filled8.fields(6):
        for e in longitudinal_residual(fs, filled8.mesh, filled8.materials, filled8.forms):
            vals = [v for k, v in e.items() if k.endswith(("region1", "region2")) and v is not None]
            assert vals and max(vals) < 1e-10


def test_longitudinal_chain_coupling_term(filled8, rng):
    mesh, mats, F = filled8.mesh, filled8.materials, filled8.forms
    g = 0.4 + 0.9j
    k2 = (mats.eps1 - g * g, mats.eps2 - g * g)
    z = np.zeros((mesh.n_triangles, 2))

    def fld(p, Pi, Psi):
        return TransversalField(g, p, z, z, Pi, Psi, k2)

    P0, S0 = random_vector(rng, mesh.n_nodes), random_vector(rng, mesh.n_nodes)
    P1, S1 = random_vector(rng, mesh.n_nodes), random_vector(rng, mesh.n_nodes)
    full = longitudinal_vectors([fld(0, P0, S0), fld(1, P1, S1)], mesh, mats, F)[1]
    cut = longitudinal_vectors([fld(0, 0 * P0, 0 * S0), fld(1, P1, S1)], mesh, mats, F)[1]
    for (name, tag), (res, _, idx) in full.items():
        u0 = P0 if name == "Pi" else S0
        diff = res - cut[(name, tag)][0]
        assert np.allclose(diff, -2 * g * (F.mass_region[tag - 1] @ u0)[idx], atol=1e-12)


def test_principal_angles_and_energy(filled8):
    fs = [f for c in filled8.fields(4) for f in c]
    assert np.allclose(principal_angles(fs, fs, filled8.mesh), 0, atol=1e-6)
    assert all(field_energy(f, filled8.mesh, filled8.materials) > 0 for f in fs)


def test_field_csv(tmp_path, filled8):
    f = filled8.fields(2)[0][0]
    write_field_csv(tmp_path / "m.csv", f, filled8.mesh)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0][:4] == ["x", "y", "E1_re", "E1_im"] and len(rows[0]) == 14
    assert len(rows) == filled8.mesh.n_triangles + 1
    assert float(rows[1][2]) == f.E[0, 0].real


_S = {}


def _setup():
    if "s" not in _S:
        _S["s"] = Setup(SQUARE, INCLUSION, PI / 8, (1.0, 4.0))
    return _S["s"]
