import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guidedmodes.geometry import (CrossSectionMesh, GeometryError, MaterialConfig, build_rect_with_inclusion,
                                  classify_dofs, validate_mesh)

PI = math.pi
OUTER = (0.0, 0.0, PI, PI)
INC = (PI / 4, PI / 4, PI / 2, PI / 2)


def test_invariants_and_single_interface_loop():
    m = build_rect_with_inclusion(OUTER, INC, PI / 16)
    validate_mesh(m)
    assert np.all(m.signed_areas() > 0)
    assert set(np.unique(m.tags)) == {1, 2}
    # the interface is one closed loop: every node has degree two
    deg = np.bincount(m.interface_edges.ravel(), minlength=m.n_nodes)
    assert set(deg[deg > 0]) == {2}
    assert m.interface_orientation() == 1
    assert np.isclose(m.signed_areas().sum(), PI * PI, rtol=1e-13)
    assert np.isclose(m.region_area(2), (PI / 4) ** 2, rtol=1e-13)


def test_outer_edges_on_boundary():
    m = build_rect_with_inclusion(OUTER, INC, PI / 8)
    p = m.nodes[m.outer_edges.ravel()]
    on = (np.isclose(p[:, 0], 0) | np.isclose(p[:, 0], PI) | np.isclose(p[:, 1], 0) | np.isclose(p[:, 1], PI))
    assert on.all()


def test_node_count_grows_fourfold():
    n8 = build_rect_with_inclusion(OUTER, INC, PI / 8).n_nodes
    n16 = build_rect_with_inclusion(OUTER, INC, PI / 16).n_nodes
    assert n8 == 9 ** 2 and n16 == 17 ** 2
    assert 3.5 < n16 / n8 < 4.0


@pytest.mark.parametrize("inclusion", [OUTER, (0.0, 1.0, 2.0, 2.0), (1.0, 1.0, 4.0, 2.0)])
def test_rejects_non_interior_inclusion(inclusion):
    with pytest.raises(GeometryError, match="interface must be closed and interior"):
        build_rect_with_inclusion(OUTER, inclusion, PI / 8)


def test_rejects_empty_inclusion():
    with pytest.raises(GeometryError):
        build_rect_with_inclusion(OUTER, (2.0, 2.0, 1.0, 3.0), PI / 8)


def test_rejects_coarse_h():
    with pytest.raises(GeometryError):
        build_rect_with_inclusion(OUTER, (0.2, 0.2, 2.9, 2.9), 1.0)
    with pytest.raises(GeometryError):
        build_rect_with_inclusion(OUTER, INC, -1.0)


def test_json_roundtrip():
    m = build_rect_with_inclusion(OUTER, INC, PI / 8)
    m2 = CrossSectionMesh.from_json(m.to_json())
    assert np.array_equal(m.nodes, m2.nodes)
    assert np.array_equal(m.triangles, m2.triangles)
    assert np.array_equal(m.tags, m2.tags)
    assert np.array_equal(m.interface_edges, m2.interface_edges)
    assert m2.to_json() == m.to_json()


def test_reversed_interface():
    m = build_rect_with_inclusion(OUTER, INC, PI / 8)
    assert m.with_reversed_interface().interface_orientation() == -1


def test_dof_counts_unit_square():
    m = build_rect_with_inclusion((0, 0, 1, 1), (0.25, 0.25, 0.5, 0.5), 0.25)
    d = classify_dofs(m)
    assert m.n_nodes == 25
    assert d.n_pi == 9 and d.n_psi == 25 and d.psi_mean_constraint


def test_empty_dirichlet_space_warns():
    m = build_rect_with_inclusion((0, 0, 3, 3), (1, 1, 2, 2), 1.0)
    # two triangles on a unit square: every node lies on the outer boundary
    strip = CrossSectionMesh(np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]]), np.array([[0, 1, 2], [0, 2, 3]]),
                             np.array([1, 1]), np.zeros((0, 2), int), np.array([[0, 1], [1, 2], [2, 3], [3, 0]]),
                             1.0, (0, 0, 1, 1), (0.4, 0.4, 0.6, 0.6))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        d = classify_dofs(strip)
    assert d.n_pi == 0 and any("empty" in str(x.message) for x in w)
    assert classify_dofs(m).n_pi == 4


def test_materials():
    m = MaterialConfig(1.0, 4.0)
    assert m.delta == 1.5 and m.eps_min == 1 and m.eps_max == 4
    assert math.isclose(m.p_mid, 1.5) and math.isclose(m.p_rms, math.sqrt(2.5))
    with pytest.raises(GeometryError):
        MaterialConfig(0.5, 2.0)


@settings(max_examples=25, deadline=None)
@given(x0=st.floats(0.1, 1.0), y0=st.floats(0.1, 1.0), w=st.floats(0.3, 1.2), hgt=st.floats(0.3, 1.2),
       k=st.integers(1, 3))
def test_random_inclusions_satisfy_invariants(x0, y0, w, hgt, k):
    outer = (0.0, 0.0, 3.0, 2.5)
    inc = (x0, y0, x0 + w, y0 + hgt)
    margin = min(x0, y0, 3.0 - inc[2], 2.5 - inc[3])
    h = margin / k
    m = build_rect_with_inclusion(outer, inc, h)
    validate_mesh(m)
    assert np.all(m.signed_areas() > 0)
    assert math.isclose(m.signed_areas().sum(), 7.5, rel_tol=1e-12)
    assert math.isclose(m.region_area(2), w * hgt, rel_tol=1e-10)
    # halving h keeps region areas
    m2 = build_rect_with_inclusion(outer, inc, h / 2)
    assert math.isclose(m2.region_area(2), m.region_area(2), rel_tol=1e-12)
