"""Conforming P1 triangle meshes that resolve inclusions and subdomains.

Two generators are provided:

* :func:`generate_disk_mesh` builds the truncated ball ``B_R`` used for the
  exterior corrector problems.  It is a stack of concentric rings (scaled
  copies of the inclusion boundary inside, circles outside) stitched
  together ring by ring, so every ring is resolved exactly.
* :func:`generate_holdall_mesh` builds the rectangular hold-all ``D``.  It
  is a structured union-jack lattice away from features; around the
  perturbation ``z + eps*omega`` it embeds the *same* ring stack as the
  corrector mesh scaled by ``eps``, and the gaps between lattice and
  features are filled by a constrained Delaunay triangulation.

Region tags are small integers, see :data:`TAG_NAMES`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import triangle
from scipy.spatial import cKDTree

from .errors import ConfigurationError, MeshError, PreconditionError

INCLUSION = 0
MATRIX_OMEGA = 1
MATRIX_COMPLEMENT = 2
TAG_NAMES = ("inclusion", "matrix_omega", "matrix_complement")
TAG_CODES = {name: code for code, name in enumerate(TAG_NAMES)}

TWO_PI = 2.0 * math.pi
# polygon rings blend into circles between s = 1 and s = _BLEND_END
_BLEND_END = 2.0


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass(frozen=True)
class InclusionShape:
    """Reference shape ``omega`` of an inclusion, containing the origin.

    Use :meth:`disk` or :meth:`polygon` to construct.  Polygons must be
    positively oriented and star-shaped with respect to the origin (every
    edge sees the origin strictly on its left), which implies they are
    simple and contain 0 in their interior.
    """

    kind: str
    radius: float = 0.0
    vertices: tuple = ()

    def __post_init__(self):
        if self.kind == "disk":
            if not (self.radius > 0 and math.isfinite(self.radius)):
                raise ConfigurationError(f"disk radius must be positive, got {self.radius}")
        elif self.kind == "polygon":
            v = np.asarray(self.vertices, dtype=float)
            if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
                raise ConfigurationError("polygon needs at least 3 vertices (x, y)")
            w = np.roll(v, -1, axis=0)
            if np.any(_cross(v, w) <= 0):
                raise ConfigurationError(
                    "polygon must be positively oriented and star-shaped about the origin"
                )
            turn = np.sum(np.arctan2(_cross(v, w), np.sum(v * w, axis=1)))
            if not math.isclose(turn, TWO_PI, rel_tol=1e-9):
                raise ConfigurationError("polygon must wind exactly once around the origin")
        else:
            raise ConfigurationError(f"unknown inclusion kind {self.kind!r}")

    @classmethod
    def disk(cls, radius: float = 1.0) -> "InclusionShape":
        return cls("disk", radius=float(radius))

    @classmethod
    def polygon(cls, vertices) -> "InclusionShape":
        return cls("polygon", vertices=tuple((float(x), float(y)) for x, y in vertices))

    @cached_property
    def _v(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    @cached_property
    def area(self) -> float:
        """Exact area of the continuum shape."""
        if self.kind == "disk":
            return math.pi * self.radius**2
        v = self._v
        return 0.5 * float(np.sum(_cross(v, np.roll(v, -1, axis=0))))

    @cached_property
    def max_radius(self) -> float:
        if self.kind == "disk":
            return self.radius
        return float(np.max(np.hypot(self._v[:, 0], self._v[:, 1])))

    @cached_property
    def min_radius(self) -> float:
        """Radius of the largest origin-centred disk inside the shape."""
        if self.kind == "disk":
            return self.radius
        v = self._v
        w = np.roll(v, -1, axis=0)
        return float(np.min(_cross(v, w) / np.hypot(*(w - v).T)))

    @cached_property
    def diameter(self) -> float:
        if self.kind == "disk":
            return 2.0 * self.radius
        d = self._v[:, None, :] - self._v[None, :, :]
        return float(np.max(np.hypot(d[..., 0], d[..., 1])))

    @cached_property
    def mean_radius(self) -> float:
        return math.sqrt(self.area / math.pi)

    @cached_property
    def perimeter(self) -> float:
        if self.kind == "disk":
            return TWO_PI * self.radius
        return float(np.sum(np.hypot(*(np.roll(self._v, -1, axis=0) - self._v).T)))

    @cached_property
    def _vertex_angles(self) -> np.ndarray:
        v = self._v
        a = np.arctan2(v[:, 1], v[:, 0])
        steps = np.mod(np.diff(np.append(a, a[0])), TWO_PI)
        return a[0] + np.concatenate([[0.0], np.cumsum(steps)])

    def radial(self, theta) -> np.ndarray:
        """Distance from the origin to the boundary along direction ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == "disk":
            return np.full(theta.shape, self.radius)
        cum = self._vertex_angles
        t = np.mod(theta - cum[0], TWO_PI) + cum[0]
        idx = np.clip(np.searchsorted(cum, t, side="right") - 1, 0, len(self._v) - 1)
        p = self._v[idx]
        q = self._v[(idx + 1) % len(self._v)]
        d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return _cross(p, q) / _cross(d, q - p)

    def contains(self, points) -> np.ndarray:
        """Strict interior test for points given relative to the origin."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.hypot(p[:, 0], p[:, 1])
        if self.kind == "disk":
            return r < self.radius
        return r < self.radial(np.arctan2(p[:, 1], p[:, 0]))

    def boundary_distance(self, points) -> np.ndarray:
        """Unsigned distance to the boundary curve."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            return np.abs(np.hypot(p[:, 0], p[:, 1]) - self.radius)
        a = self._v
        b = np.roll(a, -1, axis=0)
        ab = b - a
        rel = p[:, None, :] - a[None, :, :]
        t = np.clip(np.sum(rel * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        return np.min(np.hypot(*(p[:, None, :] - closest).transpose(2, 0, 1)), axis=1)

    def boundary_points(self, scale: float, h: float, stagger: bool = False) -> np.ndarray:
        """Counter-clockwise samples of ``scale * boundary`` with spacing <= h.

        Polygon samples always include the (scaled) corners.
        """
        if self.kind == "disk":
            n = max(6, math.ceil(TWO_PI * scale * self.radius / h))
            th = (np.arange(n) + (0.5 if stagger else 0.0)) * (TWO_PI / n)
            return scale * self.radius * np.column_stack([np.cos(th), np.sin(th)])
        pts = []
        v = scale * self._v
        for i in range(len(v)):
            p, q = v[i], v[(i + 1) % len(v)]
            k = max(1, math.ceil(np.hypot(*(q - p)) / h))
            s = np.arange(k)[:, None] / k
            pts.append(p + s * (q - p))
        return np.vstack(pts)


# ---------------------------------------------------------------------------
# Mesh container
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable conforming triangle mesh.

    Attributes
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counter-clockwise
    region_tag : (nt,) int8 array of codes into :data:`TAG_NAMES`
    boundary_vertex : (nv,) bool array, outer Dirichlet boundary
    outer_boundary : optional description of the outer curve,
        ``("circle", (cx, cy, R))`` or ``("rectangle", (x0, x1, y0, y1))``;
        used only for validation.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    region_tag: np.ndarray
    boundary_vertex: np.ndarray
    outer_boundary: tuple | None = field(default=None)

    def __post_init__(self):
        arrays = {
            "vertices": np.array(self.vertices, dtype=np.float64).reshape(-1, 2),
            "triangles": np.array(self.triangles, dtype=np.int64).reshape(-1, 3),
            "region_tag": np.array(self.region_tag, dtype=np.int8).reshape(-1),
            "boundary_vertex": np.array(self.boundary_vertex, dtype=bool).reshape(-1),
        }
        for name, arr in arrays.items():
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if len(self.region_tag) != len(self.triangles):
            raise MeshError("one region tag per triangle required")
        if len(self.boundary_vertex) != len(self.vertices):
            raise MeshError("one boundary flag per vertex required")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        a = 0.5 * _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        a.flags.writeable = False
        return a

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def diameters(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.max(np.hypot(d[..., 0], d[..., 1]), axis=1)

    @cached_property
    def _edge_data(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        edges, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
        nt = len(t)
        tri_edges = inverse.reshape(-1)
        tri_edges = np.stack([tri_edges[:nt], tri_edges[nt : 2 * nt], tri_edges[2 * nt :]], axis=1)
        return edges, counts, tri_edges

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs."""
        return self._edge_data[0]

    @property
    def edge_counts(self) -> np.ndarray:
        return self._edge_data[1]

    def region_area(self, tag: int) -> float:
        return float(np.sum(self.areas[self.region_tag == tag]))

    def has_tag(self, tag: int) -> bool:
        return bool(np.any(self.region_tag == tag))

    def inclusion_host(self) -> int | None:
        """Tag of the region surrounding the inclusion-tagged triangles.

        Returns ``None`` if there is no inclusion.  Raises :class:`MeshError`
        if the inclusion touches both matrix regions or the outer boundary.
        """
        incl = self.region_tag == INCLUSION
        if not incl.any():
            return None
        _, counts, tri_edges = self._edge_data
        incl_edges = np.unique(tri_edges[incl])
        other = ~incl
        neighbours = np.isin(tri_edges, incl_edges).any(axis=1) & other
        tags = set(np.unique(self.region_tag[neighbours]).tolist())
        if len(tags) != 1:
            raise MeshError(f"inclusion must border exactly one matrix region, found {sorted(tags)}")
        return tags.pop()

    @cached_property
    def _centroid_tree(self):
        return cKDTree(self.centroids)

    def barycentric(self, points, tri_index) -> np.ndarray:
        """Barycentric coordinates of ``points`` in the given triangles."""
        p = self.vertices[self.triangles[tri_index]]
        pts = np.asarray(points, dtype=float)
        v0 = p[:, 1] - p[:, 0]
        v1 = p[:, 2] - p[:, 0]
        w = pts - p[:, 0]
        det = _cross(v0, v1)
        l1 = _cross(w, v1) / det
        l2 = _cross(v0, w) / det
        return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)

    def locate(self, points, tol: float = 1e-12) -> np.ndarray:
        """Index of a triangle containing each point, ``-1`` if outside.

        Points outside the bounding box are rejected at once.  Candidates
        come from a k-d tree over centroids (8, then 64 neighbours); any
        point still unresolved is checked against all triangles.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        result = np.full(len(pts), -1, dtype=np.int64)
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        pad = tol * max(1.0, float(np.max(np.abs(self.vertices))))
        in_box = np.all((pts >= lo - pad) & (pts <= hi + pad), axis=1)
        todo = np.flatnonzero(in_box)
        nt = self.num_triangles
        for k in sorted({min(8, nt), min(64, nt)}):
            if not len(todo):
                break
            _, cand = self._centroid_tree.query(pts[todo], k=k)
            cand = cand.reshape(len(todo), -1)
            found = np.full(len(todo), False)
            for col in range(cand.shape[1]):
                sel = np.flatnonzero(~found)
                if not len(sel):
                    break
                lam = self.barycentric(pts[todo[sel]], cand[sel, col])
                idx = sel[np.all(lam >= -tol, axis=1)]
                result[todo[idx]] = cand[idx, col]
                found[idx] = True
            todo = todo[~found]
        all_tri = np.arange(nt)
        for i in todo:
            lam = self.barycentric(np.repeat(pts[i][None], nt, axis=0), all_tri)
            hit = np.flatnonzero(np.all(lam >= -tol, axis=1))
            if len(hit):
                result[i] = hit[0]
        return result

    def with_tags(self, region_tag) -> "Mesh":
        return Mesh(self.vertices, self.triangles, region_tag, self.boundary_vertex, self.outer_boundary)

    def equals(self, other: "Mesh") -> bool:
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.region_tag, other.region_tag)
            and np.array_equal(self.boundary_vertex, other.boundary_vertex)
        )


def validate_mesh(mesh: Mesh, tol: float = 1e-12) -> None:
    """Check every structural invariant; raise :class:`MeshError` listing failures."""
    problems = []
    nv = mesh.num_vertices
    t = mesh.triangles
    if t.size and (t.min() < 0 or t.max() >= nv):
        problems.append("triangle references a vertex index out of range")
        raise MeshError("; ".join(problems))
    if np.any(mesh.signed_areas <= 0):
        problems.append(f"{int(np.sum(mesh.signed_areas <= 0))} triangles with non-positive area")
    if np.any((mesh.region_tag < 0) | (mesh.region_tag >= len(TAG_NAMES))):
        problems.append("unknown region tag")
    counts = mesh.edge_counts
    if np.any(counts > 2):
        problems.append(f"{int(np.sum(counts > 2))} edges shared by more than two triangles")
    bedges = mesh.edges[counts == 1]
    if not np.all(mesh.boundary_vertex[bedges]):
        problems.append("boundary edge with an unflagged endpoint (hole or hanging node)")
    used = np.zeros(nv, dtype=bool)
    used[t.reshape(-1)] = True
    if not used.all():
        problems.append(f"{int(np.sum(~used))} vertices not used by any triangle")
    on_bedge = np.zeros(nv, dtype=bool)
    on_bedge[bedges.reshape(-1)] = True
    if np.any(mesh.boundary_vertex & ~on_bedge):
        problems.append("boundary-flagged vertex not on a boundary edge")
    euler = nv - len(mesh.edges) + mesh.num_triangles
    if euler != 1:
        problems.append(f"Euler characteristic {euler} != 1 (mesh is not a simply connected sheet)")
    if mesh.outer_boundary is not None:
        kind, params = mesh.outer_boundary
        bv = mesh.vertices[mesh.boundary_vertex]
        if kind == "circle":
            cx, cy, radius = params
            dev = np.abs(np.hypot(bv[:, 0] - cx, bv[:, 1] - cy) - radius)
            scale = max(1.0, radius)
        elif kind == "rectangle":
            x0, x1, y0, y1 = params
            dev = np.min(np.abs(np.stack([bv[:, 0] - x0, bv[:, 0] - x1, bv[:, 1] - y0, bv[:, 1] - y1])), axis=0)
            scale = max(1.0, abs(x1 - x0), abs(y1 - y0))
        else:
            dev = np.zeros(0)
            scale = 1.0
        if dev.size and dev.max() > tol * scale:
            problems.append(f"boundary vertex off the outer curve by {dev.max():.3e}")
    if problems:
        raise MeshError("; ".join(problems))


# ---------------------------------------------------------------------------
# Ring stacks
# ---------------------------------------------------------------------------


def _sizing(h_near, grading, h_far, d):
    return min(h_far, h_near + grading * max(d, 0.0))


def _outer_ring(shape: InclusionShape, extent: float, h: float, k: int) -> np.ndarray:
    """Ring outside the inclusion whose farthest point is at ``extent``."""
    stagger = bool(k % 2)
    if shape.kind == "disk":
        return shape.boundary_points(extent / shape.radius, h, stagger=stagger)
    s = extent / shape.max_radius
    beta = min(1.0, (s - 1.0) / (_BLEND_END - 1.0))
    perim = s * ((1.0 - beta) * shape.perimeter + beta * TWO_PI * shape.max_radius)
    n = max(6, math.ceil(perim / h))
    th = (np.arange(n) + (0.5 if stagger else 0.0)) * (TWO_PI / n)
    if beta < 1.0:
        step = TWO_PI / n
        corners = np.mod(shape._vertex_angles[:-1], TWO_PI)
        gap = np.abs((th[None, :] - corners[:, None] + math.pi) % TWO_PI - math.pi)
        th = np.concatenate([th[np.all(gap > 0.3 * step, axis=0)], corners])
    r = s * ((1.0 - beta) * shape.radial(th) + beta * shape.max_radius)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def _sort_ring(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ang = np.mod(np.arctan2(points[:, 1], points[:, 0]), TWO_PI)
    order = np.argsort(ang, kind="stable")
    return points[order], ang[order]


def ring_stack(
    shape: InclusionShape,
    h_near: float,
    grading: float,
    h_far: float,
    r_outer: float,
    exact_outer: bool = True,
    h_stop: float | None = None,
    snap_radii=(),
):
    """Concentric rings from the inclusion centre outwards.

    Returns ``(rings, m)`` where ``rings`` is a list of ``(points, angles)``
    sorted counter-clockwise and ``rings[m - 1]`` is the inclusion boundary.
    Outside the inclusion the ring spacing follows
    ``h(d) = min(h_far, h_near + grading * d)`` with ``d`` the distance from
    the boundary; rings are snapped onto ``snap_radii`` and, when
    ``exact_outer``, onto ``r_outer``.  Without ``exact_outer`` the stack
    stops before exceeding ``r_outer``; with ``h_stop`` it also stops after
    the first ring whose spacing reaches ``h_stop``.
    """
    m = max(1, round(shape.mean_radius / h_near))
    rings = []
    for j in range(1, m + 1):
        rings.append(_sort_ring(shape.boundary_points(j / m, h_near, stagger=bool(j % 2))))
    rho = shape.max_radius
    targets = sorted({float(r) for r in snap_radii if rho < r < r_outer})
    if exact_outer:
        targets.append(float(r_outer))
    extent, k = rho, m
    while True:
        hd = _sizing(h_near, grading, h_far, extent - rho)
        nxt = extent + hd
        pending = [r for r in targets if r > extent + 1e-12 * max(1.0, r)]
        if pending and nxt >= pending[0] - 0.5 * hd:
            nxt = pending[0]
        if not exact_outer and nxt > r_outer:
            break
        k += 1
        h_ring = _sizing(h_near, grading, h_far, nxt - rho)
        rings.append(_sort_ring(_outer_ring(shape, nxt, h_ring, k)))
        extent = nxt
        if exact_outer and extent >= r_outer:
            break
        if h_stop is not None and h_ring >= h_stop:
            break
    return rings, m


def _fan(center_id: int, ids: np.ndarray) -> np.ndarray:
    return np.column_stack([np.full(len(ids), center_id), ids, np.roll(ids, -1)])


def _zip(ang_a, ids_a, ang_b, ids_b) -> np.ndarray:
    """Triangulate the annulus between two angularly sorted rings (a inside b)."""
    na, nb = len(ids_a), len(ids_b)
    start = ang_a[0]
    ta = np.append(ang_a - start, TWO_PI)
    db = np.mod(ang_b - start + math.pi, TWO_PI) - math.pi
    j0 = int(np.argmin(np.abs(db)))
    order = np.roll(np.arange(nb), -j0)
    tb = db[j0] + np.mod(ang_b[order] - ang_b[j0], TWO_PI)
    tb = np.append(tb, db[j0] + TWO_PI)
    ib = ids_b[order]
    tris = []
    i = j = 0
    while i < na or j < nb:
        if j == nb or (i < na and ta[i + 1] <= tb[j + 1]):
            tris.append((ids_a[i % na], ib[j % nb], ids_a[(i + 1) % na]))
            i += 1
        else:
            tris.append((ids_a[i % na], ib[j % nb], ib[(j + 1) % nb]))
            j += 1
    return np.asarray(tris, dtype=np.int64)


def _stitch(rings, m, first_id: int):
    """Vertices and triangles of a ring stack with a centre vertex.

    Returns ``(points, triangles, is_inclusion, ring_ids)`` with vertex ids
    offset by ``first_id``; the centre vertex comes first.
    """
    pts = [np.zeros((1, 2))]
    ring_ids = []
    nxt = first_id + 1
    for p, _ in rings:
        pts.append(p)
        ring_ids.append(np.arange(nxt, nxt + len(p)))
        nxt += len(p)
    tris = [_fan(first_id, ring_ids[0])]
    inside = [np.full(len(ring_ids[0]), True)]
    for k in range(1, len(rings)):
        t = _zip(rings[k - 1][1], ring_ids[k - 1], rings[k][1], ring_ids[k])
        tris.append(t)
        inside.append(np.full(len(t), k < m))
    return np.vstack(pts), np.vstack(tris), np.concatenate(inside), ring_ids


def generate_disk_mesh(
    R: float,
    h_far: float,
    h_near: float,
    inclusion: InclusionShape,
    grading: float | None = None,
    snap_radii=(),
) -> Mesh:
    """Mesh of the disk ``|x| < R`` resolving the inclusion boundary.

    The sizing grows linearly with the distance to the inclusion boundary,
    from ``h_near`` to ``h_far``.  By default the slope is chosen so that
    ``h_far`` is reached exactly at ``|x| = R``; an explicit ``grading``
    slope fixes the near field independently of ``R`` (then meshes for
    different ``R`` share their inner rings).  ``snap_radii`` forces rings at
    the given radii so that sub-disks are exactly triangulated.
    """
    if not (0 < h_near <= h_far):
        raise ConfigurationError("need 0 < h_near <= h_far")
    if h_far > R:
        raise ConfigurationError(f"sizing infeasible: h_far={h_far} > R={R}")
    if inclusion.max_radius > R / 4:
        raise ConfigurationError("inclusion must fit in the disk of radius R/4")
    if grading is None:
        grading = (h_far - h_near) / (R - inclusion.max_radius)
    if grading < 0:
        raise ConfigurationError("grading must be non-negative")
    rings, m = ring_stack(inclusion, h_near, grading, h_far, R, exact_outer=True, snap_radii=snap_radii)
    pts, tris, inside, ring_ids = _stitch(rings, m, 0)
    boundary = np.zeros(len(pts), dtype=bool)
    boundary[ring_ids[-1]] = True
    tags = np.where(inside, INCLUSION, MATRIX_COMPLEMENT)
    return Mesh(pts, tris, tags, boundary, outer_boundary=("circle", (0.0, 0.0, float(R))))


def ring_radii(mesh: Mesh) -> np.ndarray:
    """Radii of the circular rings of a disk mesh (vertices equidistant from 0)."""
    r = np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 1])
    return np.unique(np.round(r, 12))


# ---------------------------------------------------------------------------
# Hold-all meshes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Placement:
    """A shape placed in physical coordinates: ``center + scale * shape``."""

    shape: InclusionShape
    center: tuple
    scale: float = 1.0

    def local(self, points) -> np.ndarray:
        return (np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(self.center)) / self.scale

    def contains(self, points) -> np.ndarray:
        return self.shape.contains(self.local(points))

    def boundary_distance(self, points) -> np.ndarray:
        return self.scale * self.shape.boundary_distance(self.local(points))

    def boundary_points(self, h: float) -> np.ndarray:
        return np.asarray(self.center) + self.scale * self.shape.boundary_points(1.0, h / self.scale)

    @property
    def reach(self) -> float:
        return self.scale * self.shape.max_radius


def _rect_distance(points, bounds):
    x0, x1, y0, y1 = bounds
    p = np.atleast_2d(points)
    return np.min(np.stack([p[:, 0] - x0, x1 - p[:, 0], p[:, 1] - y0, y1 - p[:, 1]]), axis=0)


def _in_polygon(points, poly):
    """Even-odd point in polygon test (vectorised over points)."""
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    xa, ya = poly[:, 0][None, :], poly[:, 1][None, :]
    xb, yb = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    cond = (ya > y) != (yb > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xa + (y - ya) * (xb - xa) / (yb - ya)
    return np.sum(cond & (x < xint), axis=1) % 2 == 1


def generate_holdall_mesh(
    bounds,
    h: float,
    subdomain: Placement | None = None,
    perturbation=None,
    *,
    h_near: float | None = None,
    grading: float = 0.1,
    h_far: float = math.inf,
) -> Mesh:
    """Mesh of the rectangle ``bounds = (x0, x1, y0, y1)``.

    Parameters
    ----------
    h : float
        Background lattice spacing.
    subdomain : Placement, optional
        The region ``Omega`` (tagged ``matrix_omega``).
    perturbation : tuple, optional
        ``(z, eps, shape)``; the inclusion ``z + eps*shape`` is tagged
        ``inclusion``.  It must lie strictly inside ``D`` and either strictly
        outside or strictly inside ``Omega``.  The surrounding ring patch is
        the ring stack of :func:`generate_disk_mesh` with parameters
        ``h_near, grading, h_far`` (in unscaled units) scaled by ``eps``.
    """
    x0, x1, y0, y1 = (float(b) for b in bounds)
    if not (x1 > x0 and y1 > y0):
        raise ConfigurationError("empty bounds")
    if not h > 0:
        raise ConfigurationError("h must be positive")
    nx = max(1, math.ceil((x1 - x0) / h - 1e-9))
    ny = max(1, math.ceil((y1 - y0) / h - 1e-9))
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    hmax = max(hx, hy)
    xs = x0 + hx * np.arange(nx + 1)
    ys = y0 + hy * np.arange(ny + 1)
    xs[-1], ys[-1] = x1, y1

    omega_poly = None
    if subdomain is not None:
        c = np.asarray(subdomain.center, dtype=float)
        if not _rect_distance(c, (x0, x1, y0, y1))[0] > subdomain.reach:
            raise PreconditionError("Omega must lie strictly inside the hold-all bounds")
        omega_poly = subdomain.boundary_points(hmax)

    patch = None
    if perturbation is not None:
        z, eps, shape = perturbation
        z = np.asarray(z, dtype=float)
        eps = float(eps)
        if not eps > 0:
            raise ConfigurationError("eps must be positive")
        reach = eps * shape.max_radius
        clearance = _rect_distance(z, (x0, x1, y0, y1))[0]
        host = MATRIX_COMPLEMENT
        if subdomain is not None:
            clearance = min(clearance, float(subdomain.boundary_distance(z)[0]))
            host = MATRIX_OMEGA if bool(subdomain.contains(z)[0]) else MATRIX_COMPLEMENT
        if not clearance > reach:
            raise PreconditionError(
                "perturbation must lie strictly inside D and strictly inside or outside Omega"
            )
        if clearance - reach < 0.25 * hmax:
            raise ConfigurationError("gap between perturbation and boundaries is below h/4; refine h")
        if h_near is None:
            h_near = shape.diameter / 50.0
        r_limit = max(clearance - hmax, reach) / eps
        rings, m = ring_stack(
            shape, h_near, grading, h_far, r_limit, exact_outer=False, h_stop=hmax / eps
        )
        patch = (z, eps, rings, m, host)

    # cells removed from the lattice near features
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    CX, CY = np.meshgrid(cx, cy, indexing="ij")
    centers = np.column_stack([CX.ravel(), CY.ravel()])
    margin = 0.5 * hmax + 0.5 * math.hypot(hx, hy)
    removed = np.zeros(len(centers), dtype=bool)
    if subdomain is not None:
        removed |= subdomain.boundary_distance(centers) < margin
    if patch is not None:
        z, eps, rings, m, host = patch
        outer_reach = eps * float(np.max(np.hypot(*rings[-1][0].T)))
        removed |= np.hypot(centers[:, 0] - z[0], centers[:, 1] - z[1]) < outer_reach + margin
    removed = removed.reshape(nx, ny)

    node_id = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    NX, NY = np.meshgrid(xs, ys, indexing="ij")
    lattice = np.column_stack([NX.ravel(), NY.ravel()])

    tris = []
    I, J = np.nonzero(~removed)
    a, b = node_id[I, J], node_id[I + 1, J]
    c, d = node_id[I + 1, J + 1], node_id[I, J + 1]
    slash = (I + J) % 2 == 0
    tris.append(np.where(slash[:, None], np.column_stack([a, b, c]), np.column_stack([a, b, d])))
    tris.append(np.where(slash[:, None], np.column_stack([a, c, d]), np.column_stack([b, c, d])))
    tris = [np.vstack(tris)] if len(I) else []

    vertices = [lattice]
    nvert = len(lattice)
    tri_tags = []
    if tris:
        tri_tags.append(None)  # structured part, tagged by centroid below

    if removed.any():
        cdt_pts, cdt_ids, segs, holes = [], [], [], []
        # lattice nodes bordering removed cells, and boundary segments
        pad = np.pad(removed, 1, constant_values=False)
        node_removed = pad[:-1, :-1] | pad[1:, :-1] | pad[:-1, 1:] | pad[1:, 1:]
        kept = np.pad(~removed, 1, constant_values=False)
        node_kept = kept[:-1, :-1] | kept[1:, :-1] | kept[:-1, 1:] | kept[1:, 1:]
        on_rect = np.zeros((nx + 1, ny + 1), dtype=bool)
        on_rect[0, :] = on_rect[-1, :] = on_rect[:, 0] = on_rect[:, -1] = True
        use = node_removed & (node_kept | on_rect)
        lat_ids = node_id[use]
        cdt_pts.append(lattice[lat_ids])
        cdt_ids.append(lat_ids)
        local = {int(g): k for k, g in enumerate(lat_ids)}

        def lseg(p, q):
            segs.append((local[int(p)], local[int(q)]))

        for i in range(nx):
            for j in range(ny):
                if not removed[i, j]:
                    continue
                # (edge nodes, neighbour cell)
                edges = (
                    ((node_id[i, j], node_id[i + 1, j]), (i, j - 1)),
                    ((node_id[i + 1, j], node_id[i + 1, j + 1]), (i + 1, j)),
                    ((node_id[i + 1, j + 1], node_id[i, j + 1]), (i, j + 1)),
                    ((node_id[i, j + 1], node_id[i, j]), (i - 1, j)),
                )
                for (p, q), (ni, nj) in edges:
                    outside = not (0 <= ni < nx and 0 <= nj < ny)
                    if outside or not removed[ni, nj]:
                        lseg(p, q)
        offset = len(lat_ids)
        extra_pts = []
        if omega_poly is not None:
            n = len(omega_poly)
            extra_pts.append(omega_poly)
            segs.extend((offset + k, offset + (k + 1) % n) for k in range(n))
            offset += n
        patch_ids = patch_pts = None
        if patch is not None:
            z, eps, rings, m, host = patch
            ppts, ptris, pinside, pring = _stitch(rings, m, 0)
            patch_pts = z + eps * ppts
            patch_ids = np.arange(nvert, nvert + len(patch_pts))
            outer_local = pring[-1]
            n = len(outer_local)
            extra_pts.append(patch_pts[outer_local])
            segs.extend((offset + k, offset + (k + 1) % n) for k in range(n))
            holes.append(z)
            offset += n
        # Only the patch centre is passed as a hole: markers outside the
        # triangulated region crash the library, so triangles covering kept
        # lattice cells are filtered out below instead.
        pts_all = np.vstack(cdt_pts + extra_pts)
        spec = {"vertices": pts_all, "segments": np.asarray(segs, dtype=np.int32)}
        if holes:
            spec["holes"] = np.asarray(holes, dtype=float)
        amax = 0.5 * hmax * hmax
        out = triangle.triangulate(spec, f"pq25YYa{amax:.17g}Q")
        out_v = out["vertices"]
        if len(out_v) < len(pts_all) or not np.array_equal(out_v[: len(pts_all)], pts_all):
            raise MeshError("constrained triangulation altered the input vertices")
        # global ids of CDT output vertices
        gid = np.empty(len(out_v), dtype=np.int64)
        gid[: len(lat_ids)] = lat_ids
        cursor = nvert
        k0 = len(lat_ids)
        new_pts = []
        if omega_poly is not None:
            n = len(omega_poly)
            gid[k0 : k0 + n] = np.arange(cursor, cursor + n)
            new_pts.append(omega_poly)
            cursor += n
            k0 += n
        if patch is not None:
            # patch vertices are appended wholesale; outer ring ids map into them
            patch_ids = np.arange(cursor, cursor + len(patch_pts))
            n = len(pring[-1])
            gid[k0 : k0 + n] = patch_ids[pring[-1]]
            new_pts.append(patch_pts)
            cursor += len(patch_pts)
            k0 += n
        steiner = out_v[len(pts_all) :]
        gid[len(pts_all) :] = np.arange(cursor, cursor + len(steiner))
        new_pts.append(steiner)
        cursor += len(steiner)
        vertices.extend(new_pts)
        nvert = cursor
        ctr = out_v[out["triangles"]].mean(axis=1)
        ci = np.clip(((ctr[:, 0] - x0) / hx).astype(np.int64), 0, nx - 1)
        cj = np.clip(((ctr[:, 1] - y0) / hy).astype(np.int64), 0, ny - 1)
        keep = removed[ci, cj]
        if patch is not None:
            keep &= ~_in_polygon(ctr, patch_pts[pring[-1]])
        cdt_tris = gid[out["triangles"][keep]]
        tris.append(cdt_tris)
        tri_tags.append(None)
        if patch is not None:
            ptris_g = patch_ids[ptris]
            tris.append(ptris_g)
            tri_tags.append(np.where(pinside, INCLUSION, host).astype(np.int8))

    verts = np.vstack(vertices)
    all_tris = np.vstack(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    # fix orientation, drop unused lattice vertices
    p = verts[all_tris]
    neg = _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]) < 0
    all_tris[neg] = all_tris[neg][:, [0, 2, 1]]
    used = np.zeros(len(verts), dtype=bool)
    used[all_tris.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    verts = verts[used]
    all_tris = remap[all_tris]

    centroids = verts[all_tris].mean(axis=1)
    tags = np.full(len(all_tris), MATRIX_COMPLEMENT, dtype=np.int8)
    if omega_poly is not None:
        tags[_in_polygon(centroids, omega_poly)] = MATRIX_OMEGA
    start = 0
    for chunk, fixed in zip(tris, tri_tags):
        if fixed is not None:
            tags[start : start + len(chunk)] = fixed
        start += len(chunk)

    boundary = (
        np.isclose(verts[:, 0], x0, rtol=0, atol=1e-14 * max(1, abs(x0)))
        | np.isclose(verts[:, 0], x1, rtol=0, atol=1e-14 * max(1, abs(x1)))
        | np.isclose(verts[:, 1], y0, rtol=0, atol=1e-14 * max(1, abs(y0)))
        | np.isclose(verts[:, 1], y1, rtol=0, atol=1e-14 * max(1, abs(y1)))
    )
    return Mesh(verts, all_tris, tags, boundary, outer_boundary=("rectangle", (x0, x1, y0, y1)))


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four through its edge midpoints."""
    validate_mesh(mesh)
    edges, counts, tri_edges = mesh._edge_data
    nv = mesh.num_vertices
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    m = nv + tri_edges  # midpoint ids of edges (01, 12, 20)
    t = mesh.triangles
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    mab, mbc, mca = m[:, 0], m[:, 1], m[:, 2]
    new = np.concatenate(
        [
            np.column_stack([a, mab, mca]),
            np.column_stack([mab, b, mbc]),
            np.column_stack([mca, mbc, c]),
            np.column_stack([mab, mbc, mca]),
        ]
    )
    tags = np.tile(mesh.region_tag, 4)
    bmid = counts == 1
    boundary = np.concatenate([mesh.boundary_vertex, bmid])
    outer = mesh.outer_boundary
    if outer is not None and outer[0] != "rectangle":
        outer = None  # midpoints of chords leave curved boundaries
    return Mesh(np.vstack([mesh.vertices, mid]), new, tags, boundary, outer_boundary=outer)


def structured_square_mesh(n: int, bounds=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """Union-jack mesh of a rectangle with ``n`` cells per side."""
    x0, x1, y0, y1 = bounds
    return generate_holdall_mesh(bounds, max((x1 - x0), (y1 - y0)) / n)
