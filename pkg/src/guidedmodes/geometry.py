"""Structured triangular meshes of a rectangle holding one rectangular inclusion.

Region tags: 1 for the outer region, 2 for the inclusion.  Interface edges are
stored counterclockwise around the inclusion, outer edges counterclockwise
around the rectangle.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Raised when a mesh cannot be built or fails validation."""


@dataclass(frozen=True)
class MaterialConfig:
    """Piecewise constant relative permittivities (outer region, inclusion)."""

    eps1: float
    eps2: float

    def __post_init__(self):
        for name in ("eps1", "eps2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 1.0:
                raise GeometryError(f"{name} must be a real number >= 1, got {v!r}")

    @property
    def delta(self) -> float:
        return (self.eps2 - self.eps1) / 2

    @property
    def p_rms(self) -> float:
        return math.sqrt((self.eps1 + self.eps2) / 2)

    @property
    def p_mid(self) -> float:
        return (math.sqrt(self.eps1) + math.sqrt(self.eps2)) / 2

    @property
    def eps_min(self) -> float:
        return min(self.eps1, self.eps2)

    @property
    def eps_max(self) -> float:
        return max(self.eps1, self.eps2)

    @property
    def homogeneous(self) -> bool:
        return self.eps1 == self.eps2

    def region_eps(self, tag) -> np.ndarray:
        """Permittivity per region tag (array of 1/2 values)."""
        return np.where(np.asarray(tag) == 2, self.eps2, self.eps1)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CrossSectionMesh:
    nodes: np.ndarray            # (N, 2) float
    triangles: np.ndarray        # (T, 3) int, counterclockwise
    tags: np.ndarray             # (T,) int in {1, 2}
    interface_edges: np.ndarray  # (E, 2) int, ccw around the inclusion
    outer_edges: np.ndarray      # (B, 2) int, ccw around the rectangle
    h: float
    outer: tuple                 # (x0, y0, x1, y1)
    inclusion: tuple             # (x0, y0, x1, y1)

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes, float).reshape(-1, 2))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "tags", _frozen(self.tags, np.int64).reshape(-1))
        object.__setattr__(self, "interface_edges", _frozen(self.interface_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "outer_edges", _frozen(self.outer_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "outer", tuple(float(v) for v in self.outer))
        object.__setattr__(self, "inclusion", tuple(float(v) for v in self.inclusion))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def region_area(self, tag: int) -> float:
        return float(self.signed_areas()[self.tags == tag].sum())

    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.outer_edges)

    def interface_nodes(self) -> np.ndarray:
        return np.unique(self.interface_edges)

    def interface_orientation(self) -> int:
        """+1 if interface edges run counterclockwise around the inclusion, -1 if clockwise."""
        p = self.nodes[self.interface_edges]
        area = 0.5 * np.sum(p[:, 0, 0] * p[:, 1, 1] - p[:, 1, 0] * p[:, 0, 1])
        return 1 if area > 0 else -1

    def with_reversed_interface(self) -> "CrossSectionMesh":
        """Same mesh with the interface polygon traversed the other way."""
        e = self.interface_edges[::-1, ::-1]
        return CrossSectionMesh(self.nodes, self.triangles, self.tags, e, self.outer_edges,
                                self.h, self.outer, self.inclusion)

    def validate(self) -> None:
        """Check the mesh invariants; raise GeometryError on the first failure."""
        validate_mesh(self)

    def to_json(self) -> str:
        doc = {
            "nodes": self.nodes.tolist(),
            "triangles": [[int(a), int(b), int(c), int(t)]
                          for (a, b, c), t in zip(self.triangles, self.tags)],
            "interface_edges": self.interface_edges.tolist(),
            "outer_edges": self.outer_edges.tolist(),
            "h": self.h,
            "outer": list(self.outer),
            "inclusion": list(self.inclusion),
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CrossSectionMesh":
        doc = json.loads(text)
        tri = np.asarray(doc["triangles"], dtype=np.int64).reshape(-1, 4)
        nodes = np.asarray(doc["nodes"], dtype=float).reshape(-1, 2)
        outer = doc.get("outer")
        if outer is None:
            outer = (*nodes.min(axis=0), *nodes.max(axis=0))
        inclusion = doc.get("inclusion")
        if inclusion is None:
            ie = np.asarray(doc["interface_edges"], dtype=np.int64)
            q = nodes[np.unique(ie)]
            inclusion = (*q.min(axis=0), *q.max(axis=0))
        mesh = cls(nodes, tri[:, :3], tri[:, 3], doc["interface_edges"], doc["outer_edges"],
                   float(doc["h"]), outer, inclusion)
        mesh.validate()
        return mesh


def _axis_lines(a0, b0, b1, a1, h):
    """Grid coordinates on [a0, a1] that contain the inclusion ends b0, b1."""
    pieces = []
    for lo, hi in ((a0, b0), (b0, b1), (b1, a1)):
        m = max(1, int(math.ceil((hi - lo) / h - 1e-9)))
        pieces.append(np.linspace(lo, hi, m + 1)[:-1])
    pieces.append(np.array([a1]))
    return np.concatenate(pieces)


def build_rect_with_inclusion(outer, inclusion, h: float) -> CrossSectionMesh:
    """Split-quad triangulation of ``outer`` whose grid lines follow ``inclusion``.

    Both rectangles are given as (x0, y0, x1, y1).  Every quad is cut along its
    SW-NE diagonal.
    """
    ox0, oy0, ox1, oy1 = (float(v) for v in outer)
    ix0, iy0, ix1, iy1 = (float(v) for v in inclusion)
    if not (ox1 > ox0 and oy1 > oy0):
        raise GeometryError("outer rectangle must have positive extent")
    if not (ix1 > ix0 and iy1 > iy0):
        raise GeometryError("inclusion rectangle must have positive extent")
    margin = min(ix0 - ox0, iy0 - oy0, ox1 - ix1, oy1 - iy1)
    if margin <= 0:
        raise GeometryError("interface must be closed and interior: inclusion touches or "
                            "crosses the outer boundary")
    if not (h > 0 and np.isfinite(h)):
        raise GeometryError("mesh size h must be positive")
    if h > margin * (1 + 1e-12):
        raise GeometryError(f"mesh size h={h:g} exceeds the inclusion margin {margin:g}")

    xs = _axis_lines(ox0, ix0, ix1, ox1, h)
    ys = _axis_lines(oy0, iy0, iy1, oy1, h)
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def idx(i, j):
        return j * nx + i

    I, J = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1))
    I, J = I.ravel(), J.ravel()
    n00, n10, n01, n11 = idx(I, J), idx(I + 1, J), idx(I, J + 1), idx(I + 1, J + 1)
    tris = np.empty((2 * len(I), 3), dtype=np.int64)
    tris[0::2] = np.column_stack([n00, n10, n11])
    tris[1::2] = np.column_stack([n00, n11, n01])

    c = nodes[tris].mean(axis=1)
    inside = (c[:, 0] > ix0) & (c[:, 0] < ix1) & (c[:, 1] > iy0) & (c[:, 1] < iy1)
    tags = np.where(inside, 2, 1)

    ia0, ia1 = int(np.flatnonzero(np.isclose(xs, ix0))[0]), int(np.flatnonzero(np.isclose(xs, ix1))[0])
    ja0, ja1 = int(np.flatnonzero(np.isclose(ys, iy0))[0]), int(np.flatnonzero(np.isclose(ys, iy1))[0])
    loop = ([idx(i, ja0) for i in range(ia0, ia1)]
            + [idx(ia1, j) for j in range(ja0, ja1)]
            + [idx(i, ja1) for i in range(ia1, ia0, -1)]
            + [idx(ia0, j) for j in range(ja1, ja0, -1)])
    interface = np.column_stack([loop, np.roll(loop, -1)])

    border = ([idx(i, 0) for i in range(0, nx - 1)]
              + [idx(nx - 1, j) for j in range(0, ny - 1)]
              + [idx(i, ny - 1) for i in range(nx - 1, 0, -1)]
              + [idx(0, j) for j in range(ny - 1, 0, -1)])
    outer_edges = np.column_stack([border, np.roll(border, -1)])

    mesh = CrossSectionMesh(nodes, tris, tags, interface, outer_edges, float(h),
                            (ox0, oy0, ox1, oy1), (ix0, iy0, ix1, iy1))
    mesh.validate()
    return mesh


def _edge_owners(triangles):
    """Map each undirected edge to the list of triangles that contain it."""
    owners = {}
    for t, (a, b, c) in enumerate(triangles.tolist()):
        for u, v in ((a, b), (b, c), (c, a)):
            owners.setdefault((min(u, v), max(u, v)), []).append(t)
    return owners


def _is_single_loop(edges) -> bool:
    if len(edges) < 3:
        return False
    nxt = {}
    for a, b in edges.tolist():
        if a in nxt:
            return False
        nxt[a] = b
    if sorted(nxt) != sorted(nxt.values()):
        return False
    start = edges[0, 0]
    cur, steps = nxt[start], 1
    while cur != start:
        cur = nxt[cur]
        steps += 1
        if steps > len(edges):
            return False
    return steps == len(edges)


def validate_mesh(mesh: CrossSectionMesh) -> None:
    areas = mesh.signed_areas()
    if np.any(areas <= 0):
        raise GeometryError("triangle with non-positive signed area")
    if not np.all(np.isin(mesh.tags, (1, 2))):
        raise GeometryError("region tags must be 1 or 2")
    if mesh.triangles.min() < 0 or mesh.triangles.max() >= mesh.n_nodes:
        raise GeometryError("triangle references a missing node")
    x0, y0, x1, y1 = mesh.outer
    scale = max(x1 - x0, y1 - y0)
    if abs(areas.sum() - (x1 - x0) * (y1 - y0)) > 1e-12 * scale * scale * max(1, mesh.n_triangles) ** 0.5:
        raise GeometryError("triangle areas do not cover the outer rectangle")

    owners = _edge_owners(mesh.triangles)
    boundary = set()
    for e, ts in owners.items():
        if len(ts) > 2:
            raise GeometryError("non-conforming mesh: edge shared by more than two triangles")
        if len(ts) == 1:
            boundary.add(e)
    # a hanging node leaves an unmatched interior edge, which shows up off the rectangle
    tol = 1e-12 * scale
    p = mesh.nodes
    for a, b in boundary:
        on = [min(abs(p[v, 0] - x0), abs(p[v, 0] - x1), abs(p[v, 1] - y0), abs(p[v, 1] - y1)) < tol
              for v in (a, b)]
        same_side = (abs(p[a, 0] - p[b, 0]) < tol and min(abs(p[a, 0] - x0), abs(p[a, 0] - x1)) < tol) or \
                    (abs(p[a, 1] - p[b, 1]) < tol and min(abs(p[a, 1] - y0), abs(p[a, 1] - y1)) < tol)
        if not (all(on) and same_side):
            raise GeometryError("non-conforming mesh: unmatched edge away from the outer boundary")
    outer_set = {(min(a, b), max(a, b)) for a, b in mesh.outer_edges.tolist()}
    if outer_set != boundary:
        raise GeometryError("outer_edges do not match the mesh boundary")

    ie = mesh.interface_edges
    if not _is_single_loop(ie):
        raise GeometryError("interface_edges must form a single closed polygon")
    sep = set()
    for a, b in ie.tolist():
        ts = owners.get((min(a, b), max(a, b)))
        if ts is None or len(ts) != 2 or sorted(mesh.tags[ts].tolist()) != [1, 2]:
            raise GeometryError("interface edge does not separate regions 1 and 2")
        sep.add((min(a, b), max(a, b)))
    for e, ts in owners.items():
        if len(ts) == 2 and mesh.tags[ts[0]] != mesh.tags[ts[1]] and e not in sep:
            raise GeometryError("region boundary not covered by interface_edges")


@dataclass(frozen=True, eq=False)
class DofMaps:
    """Index maps from nodes to the longitudinal unknowns.

    The Pi unknowns are interior nodal values (Dirichlet on the outer boundary);
    the Psi unknowns are all nodal values subject to one zero-mean constraint.
    """

    n_nodes: int
    pi_nodes: np.ndarray
    psi_nodes: np.ndarray
    boundary_nodes: np.ndarray
    psi_mean_constraint: bool = True

    @property
    def n_pi(self) -> int:
        return len(self.pi_nodes)

    @property
    def n_psi(self) -> int:
        return len(self.psi_nodes)


def classify_dofs(mesh: CrossSectionMesh) -> DofMaps:
    bnd = mesh.boundary_nodes()
    interior = np.setdiff1d(np.arange(mesh.n_nodes), bnd)
    if interior.size == 0:
        warnings.warn("mesh has no interior nodes: the Dirichlet (Pi) space is empty", RuntimeWarning,
                      stacklevel=2)
    return DofMaps(mesh.n_nodes, _frozen(interior, np.int64), _frozen(np.arange(mesh.n_nodes), np.int64),
                   _frozen(bnd, np.int64))
