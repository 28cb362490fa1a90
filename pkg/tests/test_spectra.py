import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guidedmodes.forms import ScalarFormValues, assemble_forms, scalar_forms
from guidedmodes.geometry import MaterialConfig, build_rect_with_inclusion
from guidedmodes.spectra import (LocalizationRegions, SpectraError, analytic_r_tilde, axis_disks, certificates,
                                 check_condition_43, check_condition_44, empirical_r_tilde, f_lower_bound_margin,
                                 in_accumulation_interval, random_fields, scalar_quartic_roots, verify_localization,
                                 viete_completion)

from conftest import PI


def small_square(h, eps, side=PI / 2):
    mesh = build_rect_with_inclusion((0, 0, side, side), (side / 4, side / 4, side / 2, side / 2), h)
    return mesh, assemble_forms(mesh, MaterialConfig(*eps))


@pytest.fixture(scope="module")
def certified():
    mesh, F = small_square(PI / 16, (1.0, 2.0))
    return mesh, F


def test_condition_43_examples():
    v = check_condition_43(MaterialConfig(1, 4))
    assert v.holds and v.margin == 5
    assert not check_condition_43(MaterialConfig(1, 9)).holds
    assert check_condition_43(MaterialConfig(2, 17.9)).holds


def test_condition_44_rectangle_oracle():
    _, F = small_square(PI / 16, (1.0, 1.0), side=PI)
    v = check_condition_44(F)
    assert not v.holds and abs(v.value - 1.0) < 0.02
    _, F = small_square(PI / 32, (1.0, 1.0), side=PI / 2)
    v = check_condition_44(F)
    assert v.holds and abs(v.value - 0.25) < 0.005


def test_condition_44_scales_with_domain_squared():
    _, Fa = small_square(PI / 16, (1.0, 2.0), side=PI)
    _, Fb = small_square(PI / 32, (1.0, 2.0), side=PI / 2)
    assert math.isclose(check_condition_44(Fa).value / 4, check_condition_44(Fb).value, rel_tol=1e-10)


def test_condition_44_dense_and_sparse_agree(certified):
    _, F = certified
    assert math.isclose(check_condition_44(F).value, check_condition_44(F, dense_limit=0).value, rel_tol=1e-8)


def test_regions_invariants():
    r = LocalizationRegions.from_materials(MaterialConfig(1, 2))
    assert r.check_invariants()
    assert r.region(r.p) == "sigma_plus" and r.region(-r.p) == "sigma_minus" and r.region(5j) == "sigma_1"
    with pytest.raises(SpectraError):
        LocalizationRegions(1.0, 4.0, 0.4)
    assert analytic_r_tilde(MaterialConfig(1, 9)) is None


def test_viete_symmetric_example():
    g3, g4, flagged = viete_completion(-1.0, 1.0, 1.0, MaterialConfig(1, 4))
    assert not flagged
    assert sorted([g3, g4], key=lambda z: z.imag) == [-2j, 2j]
    with pytest.raises(SpectraError):
        viete_completion(0.0, 1.0, 1.0, MaterialConfig(1, 4))
    _, _, flagged = viete_completion(-1.0, 3.0, 0.1, MaterialConfig(1, 4))
    assert flagged


def test_homogeneous_quartic_pattern():
    v = ScalarFormValues(k=2.0, a1_region=(1.0, 2.0), s=0.0, a2_weighted=3.0, grad_pi_region=(1, 1),
                         grad_psi_region=(1, 1))
    q = scalar_quartic_roots(v, MaterialConfig(2.0, 2.0))
    g2 = np.sort((q.roots ** 2).real)
    assert np.allclose(g2, [2 - 3 / 2, 2 - 3 / 2, 2, 2], atol=1e-7)


def test_zero_field_rejected():
    v = ScalarFormValues(k=0.0, a1_region=(0.0, 0.0), s=0.0, a2_weighted=0.0, grad_pi_region=(0, 0),
                         grad_psi_region=(0, 0))
    with pytest.raises(SpectraError):
        scalar_quartic_roots(v, MaterialConfig(1, 2))
    with pytest.raises(ValueError):
        v.theta


def test_random_fields_root_pattern(certified):
    mesh, F = certified
    mats = F.materials
    assert check_condition_44(F).holds
    vals = [scalar_forms(f, F, mesh) for f in random_fields(F, 60, seed=3)]
    rt = empirical_r_tilde(vals, mats)
    assert rt > LocalizationRegions.from_materials(mats).half_gap
    for v in vals:
        assert v.theta >= 1
        q = scalar_quartic_roots(v, mats, r_tilde=rt, certified=True)
        assert q.pattern and q.far_from_disks
        assert f_lower_bound_margin(v, mats) > 0


def test_root_continuity(certified, rng=np.random.default_rng(5)):
    mesh, F = certified
    mats = F.materials
    for f in random_fields(F, 10, seed=9):
        a = scalar_quartic_roots(scalar_forms(f, F, mesh), mats).roots
        df = 1e-8 * np.linalg.norm(f) * (rng.standard_normal(f.size) + 1j * rng.standard_normal(f.size))
        b = scalar_quartic_roots(scalar_forms(f + df / np.sqrt(f.size), F, mesh), mats).roots
        assert np.abs(np.sort_complex(a) - np.sort_complex(b)).max() < 1e-3


def test_localization_gating(filled8):
    mats, F = filled8.materials, filled8.forms
    rep = certificates(mats, F, [p.gamma for p in filled8.spectrum()])
    assert not rep["condition44"]["holds"]
    assert rep["localization"]["status"] == "not certified"


def test_localization_flags_violations():
    mats = MaterialConfig(1, 2)
    reg = LocalizationRegions.from_materials(mats)
    yes = check_condition_43(mats)
    c44 = type(yes)(True, 0.1, 0.4)
    rep = verify_localization([0.5, 1.2, 3j, reg.p + 0.3j], reg, yes, c44)
    # 0.5 is inside the disk around +p and in the real core; p + 0.3i is in the disk
    assert rep["certified"] and rep["n_violations"] == 3
    kinds = sorted(v["kind"] for v in rep["violations"])
    assert kinds == ["disk", "disk", "real_core"]


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(1.0, 8.0), x=st.floats(-4, 4))
def test_accumulation_interval_membership(eps, x):
    mats = MaterialConfig(1.0, eps)
    inside = 1.0 <= abs(x) <= math.sqrt(eps)
    if abs(abs(x) - 1.0) > 1e-6 and abs(abs(x) - math.sqrt(eps)) > 1e-6:
        assert in_accumulation_interval(x, mats) == inside
    assert not in_accumulation_interval(complex(x, 0.1), mats)


def test_axis_disks_avoid_intervals():
    mats = MaterialConfig(1.0, 4.0)
    disks, covered, strip = axis_disks(mats, 3.0)
    assert covered >= 3.0 and strip > 0
    for c, r in disks:
        assert abs(c.real) == 0 and r < 1.0
