"""Convex 2D geometry: half-plane polytopes, rigid bodies and separating-axis tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    pass


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError(f"expected an (N, 2) point array, got shape {pts.shape}")
    return pts


def signed_area(vertices) -> float:
    pts = _as_points(vertices)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def is_convex_ccw(vertices, tol: float = 1e-12) -> bool:
    pts = _as_points(vertices)
    n = len(pts)
    if n < 3:
        return False
    for k in range(n):
        a, b, c = pts[k], pts[(k + 1) % n], pts[(k + 2) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross < -tol:
            return False
    return signed_area(pts) > tol


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull without repeated endpoint."""
    pts = sorted(set(map(tuple, _as_points(points).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


@dataclass(frozen=True, eq=False)
class Polytope:
    """Bounded convex region {x : normals @ x <= offsets} with unit normals."""

    normals: np.ndarray
    offsets: np.ndarray
    _vertices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        normals = np.array(self.normals, dtype=float).reshape(-1, 2)
        offsets = np.array(self.offsets, dtype=float).reshape(-1)
        if len(normals) != len(offsets):
            raise GeometryError("normals and offsets differ in length")
        if len(normals) < 3:
            raise GeometryError("a bounded polygon needs at least 3 half-planes")
        norms = np.linalg.norm(normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise GeometryError("half-plane normals must be unit length")
        normals.setflags(write=False)
        offsets.setflags(write=False)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        verts = _enumerate_vertices(normals, offsets)
        if len(verts) < 3:
            raise GeometryError("polytope is empty or degenerate")
        angles = np.sort(np.arctan2(normals[:, 1], normals[:, 0]))
        gaps = np.diff(np.concatenate([angles, [angles[0] + 2 * math.pi]]))
        if np.max(gaps) >= math.pi - 1e-12:
            raise GeometryError("polytope is unbounded")
        verts.setflags(write=False)
        object.__setattr__(self, "_vertices", verts)

    @classmethod
    def _with_vertices(cls, normals: np.ndarray, offsets: np.ndarray, vertices: np.ndarray) -> "Polytope":
        """Skip vertex enumeration when the caller already holds the exact CCW vertices (affine images)."""
        out = object.__new__(cls)
        for name, val in (("normals", normals), ("offsets", offsets), ("_vertices", vertices)):
            arr = np.array(val, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(out, name, arr)
        return out

    @classmethod
    def from_halfplanes(cls, halfplanes: Sequence[tuple]) -> "Polytope":
        normals = np.array([h[0] for h in halfplanes], dtype=float)
        offsets = np.array([h[1] for h in halfplanes], dtype=float)
        return cls(normals, offsets)

    @classmethod
    def from_vertices(cls, vertices) -> "Polytope":
        pts = convex_hull(vertices)
        if len(pts) < 3:
            raise GeometryError("need at least 3 non-collinear vertices")
        edges = np.roll(pts, -1, axis=0) - pts
        normals = np.column_stack([edges[:, 1], -edges[:, 0]])
        lengths = np.linalg.norm(normals, axis=1)
        normals = normals / lengths[:, None]
        offsets = np.einsum("ij,ij->i", normals, pts)
        return cls(normals, offsets)

    @classmethod
    def box(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "Polytope":
        if not (xmax > xmin and ymax > ymin):
            raise GeometryError("box must have positive extent")
        normals = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        offsets = np.array([xmax, ymax, -xmin, -ymin])
        return cls(normals, offsets)

    @classmethod
    def regular(cls, sides: int, inradius: float, center=(0.0, 0.0)) -> "Polytope":
        """Regular polygon whose edges are tangent to a disk of ``inradius``."""
        angles = 2.0 * math.pi * np.arange(sides) / sides
        normals = np.column_stack([np.cos(angles), np.sin(angles)])
        offsets = inradius + normals @ np.asarray(center, dtype=float)
        return cls(normals, offsets)

    @property
    def halfplanes(self) -> list[tuple[np.ndarray, float]]:
        return [(n.copy(), float(d)) for n, d in zip(self.normals, self.offsets)]

    def vertices(self) -> np.ndarray:
        return self._vertices.copy()

    def contains(self, point, tol: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(self.normals @ p <= self.offsets + tol))

    def contains_many(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.all(pts @ self.normals.T <= self.offsets, axis=-1)

    def inflate(self, margin: float) -> "Polytope":
        """Push every half-plane outward by ``margin`` (Minkowski sum with a disk, bounded by tangents)."""
        return Polytope(self.normals, self.offsets + margin)

    def translate(self, shift) -> "Polytope":
        return Polytope(self.normals, self.offsets + self.normals @ np.asarray(shift, dtype=float))

    def area(self) -> float:
        return signed_area(self._vertices)

    def bounds(self) -> tuple[float, float, float, float]:
        v = self._vertices
        return float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max())

    def distance_to_point(self, point) -> float:
        """Euclidean distance from ``point`` to the polytope (0 inside)."""
        p = np.asarray(point, dtype=float)
        if self.contains(p):
            return 0.0
        return point_polygon_distance(p, self._vertices)

    def __eq__(self, other):
        if not isinstance(other, Polytope):
            return NotImplemented
        return (
            self.normals.shape == other.normals.shape
            and np.array_equal(self.normals, other.normals)
            and np.array_equal(self.offsets, other.offsets)
        )

    def __hash__(self):
        return hash((self.normals.tobytes(), self.offsets.tobytes()))


def _enumerate_vertices(normals: np.ndarray, offsets: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    a, b = np.triu_indices(len(normals), 1)
    na, nb = normals[a], normals[b]
    det = na[:, 0] * nb[:, 1] - na[:, 1] * nb[:, 0]
    keep = np.abs(det) >= 1e-14
    a, b, na, nb, det = a[keep], b[keep], na[keep], nb[keep], det[keep]
    # Cramer's rule for each pair of boundary lines
    x = (offsets[a] * nb[:, 1] - na[:, 1] * offsets[b]) / det
    y = (na[:, 0] * offsets[b] - offsets[a] * nb[:, 0]) / det
    pts = np.column_stack([x, y])
    slack = tol * max(1.0, float(np.max(np.abs(offsets))))
    pts = pts[np.all(pts @ normals.T <= offsets + slack, axis=1)]
    if len(pts) < 3:
        return np.zeros((0, 2))
    return convex_hull(np.round(pts, 12))


def point_segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def point_polygon_distance(point, vertices) -> float:
    """Distance from a point to the boundary of a polygon given by its vertices."""
    p = np.asarray(point, dtype=float)
    v = _as_points(vertices)
    return min(point_segment_distance(p, v[k], v[(k + 1) % len(v)]) for k in range(len(v)))


@dataclass(frozen=True, eq=False)
class Body:
    """Convex rigid body, vertices CCW in the robot's local frame."""

    vertices: np.ndarray
    radius_bound: float = field(init=False)

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
            raise GeometryError("body needs at least 3 vertices")
        if not is_convex_ccw(verts):
            raise GeometryError("body must be convex with counter-clockwise vertices")
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "radius_bound", half_diameter(verts))

    @classmethod
    def square(cls, width: float) -> "Body":
        h = width / 2.0
        return cls([[-h, -h], [h, -h], [h, h], [-h, h]])

    def area(self) -> float:
        return signed_area(self.vertices)

    def placed(self, position, heading: float = 0.0) -> np.ndarray:
        c, s = math.cos(heading), math.sin(heading)
        rot = np.array([[c, -s], [s, c]])
        return self.vertices @ rot.T + np.asarray(position, dtype=float)

    def __eq__(self, other):
        if not isinstance(other, Body):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())


def half_diameter(points) -> float:
    """Half the largest pairwise distance of a point set."""
    pts = _as_points(points)
    diff = pts[:, None, :] - pts[None, :, :]
    return 0.5 * float(np.sqrt(np.max(np.einsum("ijk,ijk->ij", diff, diff))))


def polygons_intersect(poly_a, poly_b) -> bool:
    """Separating-axis test for two convex polygons given as vertex arrays."""
    a = _as_points(poly_a)
    b = _as_points(poly_b)
    for verts in (a, b):
        edges = np.roll(verts, -1, axis=0) - verts
        axes = np.column_stack([edges[:, 1], -edges[:, 0]])
        pa = a @ axes.T
        pb = b @ axes.T
        if np.any((pa.max(axis=0) < pb.min(axis=0)) | (pb.max(axis=0) < pa.min(axis=0))):
            return False
    return True


def polygons_intersect_batch(poly_a: np.ndarray, poly_b: np.ndarray) -> np.ndarray:
    """Vectorised SAT: ``poly_a`` (N, Va, 2), ``poly_b`` (N, Vb, 2) -> bool (N,)."""
    hit = np.ones(poly_a.shape[0], dtype=bool)
    for verts in (poly_a, poly_b):
        edges = np.roll(verts, -1, axis=1) - verts
        axes = np.stack([edges[..., 1], -edges[..., 0]], axis=-1)  # (N, V, 2)
        pa = np.einsum("nvk,nak->nva", poly_a, axes)
        pb = np.einsum("nvk,nak->nva", poly_b, axes)
        separated = (pa.max(axis=1) < pb.min(axis=1)) | (pb.max(axis=1) < pa.min(axis=1))
        hit &= ~np.any(separated, axis=1)
    return hit


def minkowski_difference(body_i: Body, body_j: Body, heading_i: float = 0.0, heading_j: float = 0.0) -> Polytope:
    """Set of offsets p_i - p_j at which the two placed bodies overlap."""
    vi = body_i.placed((0.0, 0.0), heading_i)
    vj = body_j.placed((0.0, 0.0), heading_j)
    pts = (vj[:, None, :] - vi[None, :, :]).reshape(-1, 2)
    return Polytope.from_vertices(pts)
