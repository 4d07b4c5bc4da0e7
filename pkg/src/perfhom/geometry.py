"""Perforated unit cell, its triangulation, and the tiled perforated domain.

The unit cell is Q0 = (0,1)^2 minus a finite set of circular holes, each
tagged with a phase m in {1, 2}.  Circles are replaced by regular polygons
with `boundary_segments_per_hole` sides; the mesh is conforming to those
polygons and has matching vertices on opposite sides of the square so it
can be used for periodic problems and tiled into Omega_eps = (0,1)^2.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree

GEOM_TOL = 1e-12
MIN_GAP = 0.02
DEFAULT_SEGMENTS = 64

SIDE_TAGS = ("side_left", "side_right", "side_bottom", "side_top")
HOLE_TAGS = ("hole_phase_1", "hole_phase_2")
DIRICHLET_TAG = "dirichlet_outer"
ALL_TAGS = SIDE_TAGS + HOLE_TAGS + (DIRICHLET_TAG,)


class MeshingError(RuntimeError):
    pass


def hole_tag(phase: int) -> str:
    return f"hole_phase_{phase}"


@dataclass(frozen=True)
class HoleSpec:
    center: tuple[float, float]
    radius: float
    phase: int = 1

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "phase", int(self.phase))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "pass" if self.ok else "fail: " + "; ".join(self.violations)


def validate_cell(holes, margin: float = MIN_GAP, tol: float = GEOM_TOL) -> ValidationReport:
    """Check that holes are disjoint, nontangent and strictly inside the cell.

    Exact tangency and boundary contact are reported as such; gaps that are
    positive but below `margin` are reported as insufficient clearance.
    """
    report = ValidationReport()
    holes = list(holes)
    for k, hole in enumerate(holes):
        (cx, cy), r = hole.center, hole.radius
        if hole.phase not in (1, 2):
            report.violations.append(f"hole {k}: phase {hole.phase} not in {{1, 2}}")
        if not r > 0:
            report.violations.append(f"hole {k}: nonpositive radius {r}")
            continue
        gap = min(cx, 1 - cx, cy, 1 - cy) - r
        if gap <= tol:
            report.violations.append(f"hole {k}: boundary contact (gap to cell side {gap:.6g})")
        elif gap < margin:
            report.violations.append(f"hole {k}: boundary clearance {gap:.6g} below margin {margin}")
    for a in range(len(holes)):
        for b in range(a + 1, len(holes)):
            ha, hb = holes[a], holes[b]
            d = math.dist(ha.center, hb.center)
            gap = d - (ha.radius + hb.radius)
            if abs(gap) <= tol:
                report.violations.append(f"holes {a},{b}: tangent (center distance {d:.6g} = r1+r2)")
            elif gap < 0:
                report.violations.append(f"holes {a},{b}: overlap (center distance {d:.6g})")
            elif gap < margin:
                report.violations.append(f"holes {a},{b}: clearance {gap:.6g} below margin {margin}")
    return report


@dataclass(frozen=True)
class UnitCellGeometry:
    holes: tuple[HoleSpec, ...] = ()
    boundary_segments_per_hole: int = DEFAULT_SEGMENTS

    def __post_init__(self):
        object.__setattr__(self, "holes", tuple(self.holes))
        if self.boundary_segments_per_hole < 1:
            raise ValueError("boundary_segments_per_hole must be positive")

    @property
    def area_Q0(self) -> float:
        return 1.0 - sum(math.pi * h.radius**2 for h in self.holes)

    def perimeter(self, phase: int) -> float:
        return sum(2 * math.pi * h.radius for h in self.holes if h.phase == phase)

    @property
    def perimeter_S1(self) -> float:
        return self.perimeter(1)

    @property
    def perimeter_S2(self) -> float:
        return self.perimeter(2)

    @property
    def q1(self) -> float:
        return self.perimeter_S1 / self.area_Q0

    @property
    def q2(self) -> float:
        return self.perimeter_S2 / self.area_Q0

    def polygon(self, k: int) -> np.ndarray:
        hole = self.holes[k]
        s = self.boundary_segments_per_hole
        theta = 2 * np.pi * np.arange(s) / s
        c = np.asarray(hole.center)
        return c + hole.radius * np.column_stack([np.cos(theta), np.sin(theta)])

    def fingerprint(self) -> str:
        text = repr((self.boundary_segments_per_hole,
                     [(h.center, h.radius, h.phase) for h in self.holes]))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def measures(cell: UnitCellGeometry) -> tuple[float, float, float, float, float]:
    """Closed-form (|Q0|, |S1|, |S2|, q1, q2) for circular holes."""
    return (cell.area_Q0, cell.perimeter_S1, cell.perimeter_S2, cell.q1, cell.q2)


@dataclass(eq=False)
class TriMesh:
    """P1 triangulation; `boundary_edges` maps a tag to an (E, 2) vertex-index array."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_edges = {
            tag: np.asarray(e, dtype=np.int64).reshape(-1, 2) for tag, e in self.boundary_edges.items()
        }

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return np.abs(self.signed_areas)

    @cached_property
    def gradients(self) -> np.ndarray:
        """Constant gradients of the three P1 basis functions, shape (T, 3, 2)."""
        p = self.vertices[self.triangles]
        area2 = 2.0 * self.signed_areas
        if np.any(area2 == 0):
            raise MeshingError("degenerate triangle (zero area)")
        g = np.empty((self.n_triangles, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            g[:, a, 0] = (p[:, b, 1] - p[:, c, 1]) / area2
            g[:, a, 1] = (p[:, c, 0] - p[:, b, 0]) / area2
        return g

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def mesh_size_h(self) -> float:
        p = self.vertices[self.triangles]
        lengths = np.linalg.norm(p - np.roll(p, 1, axis=1), axis=2)
        return float(lengths.max())

    def min_angle(self) -> float:
        p = self.vertices[self.triangles]
        angles = []
        for a in range(3):
            u = p[:, (a + 1) % 3] - p[:, a]
            v = p[:, (a + 2) % 3] - p[:, a]
            cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.arccos(np.clip(cos, -1, 1)))
        return float(np.degrees(np.min(angles)))

    def edges(self, tag: str) -> np.ndarray:
        if tag not in self.boundary_edges:
            raise KeyError(f"unknown edge tag {tag!r}")
        return self.boundary_edges[tag]

    def tag_vertices(self, tag: str) -> np.ndarray:
        return np.unique(self.edges(tag))

    def edge_length(self, tag: str) -> float:
        e = self.boundary_edges.get(tag)
        if e is None or len(e) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1).sum())

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]

    def periodic_pairs(self, tol: float = GEOM_TOL) -> tuple[np.ndarray, np.ndarray]:
        """(slave, master) vertex pairs identifying right->left and top->bottom.

        Corner vertices all resolve to the (0, 0) corner, so every slave
        points directly at a vertex that is not itself a slave.
        """
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        left = np.flatnonzero(np.abs(x) <= tol)
        right = np.flatnonzero(np.abs(x - 1) <= tol)
        bottom = np.flatnonzero(np.abs(y) <= tol)
        top = np.flatnonzero(np.abs(y - 1) <= tol)
        master = np.arange(self.n_vertices)
        for src, dst, shift in ((right, left, (1.0, 0.0)), (top, bottom, (0.0, 1.0))):
            if len(src) != len(dst):
                raise MeshingError("unmatched periodic sides (vertex counts differ)")
            if len(src) == 0:
                continue
            tree = cKDTree(self.vertices[dst])
            d, j = tree.query(self.vertices[src] - np.asarray(shift))
            if np.any(d > tol):
                raise MeshingError(f"unmatched periodic sides (max mismatch {d.max():.3g})")
            master[src] = dst[j]
        # resolve chains (top-right corner -> top-left -> bottom-left)
        for _ in range(2):
            master = master[master]
        slaves = np.flatnonzero(master != np.arange(self.n_vertices))
        return slaves, master[slaves]

    def write(self, path) -> None:
        """Plain-text dump: header, then vertex, triangle and tagged-edge lines."""
        n_edges = sum(len(e) for e in self.boundary_edges.values())
        lines = [f"{self.n_vertices} vertices {self.n_triangles} triangles {n_edges} tagged-edges"]
        lines += [f"{x!r} {y!r}" for x, y in self.vertices.tolist()]
        lines += [f"{i} {j} {k}" for i, j, k in self.triangles.tolist()]
        for tag in ALL_TAGS:
            for i, j in self.boundary_edges.get(tag, np.empty((0, 2), int)).tolist():
                lines.append(f"{i} {j} {tag}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "TriMesh":
        lines = Path(path).read_text().splitlines()
        head = lines[0].split()
        nv, nt, ne = int(head[0]), int(head[2]), int(head[4])
        verts = np.array([[float(t) for t in ln.split()] for ln in lines[1:1 + nv]]).reshape(-1, 2)
        tris = np.array([[int(t) for t in ln.split()] for ln in lines[1 + nv:1 + nv + nt]]).reshape(-1, 3)
        edges: dict[str, list] = {}
        for ln in lines[1 + nv + nt:1 + nv + nt + ne]:
            i, j, tag = ln.split()
            edges.setdefault(tag, []).append((int(i), int(j)))
        return cls(verts, tris, {k: np.array(v) for k, v in edges.items()})


def _boundary_edges(triangles: np.ndarray) -> np.ndarray:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, idx, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
    return e[np.sort(idx[counts == 1])]


def _tag_sides(vertices: np.ndarray, edges: np.ndarray, tol: float = GEOM_TOL) -> dict[str, np.ndarray]:
    p, q = vertices[edges[:, 0]], vertices[edges[:, 1]]
    out = {}
    for tag, axis, value in (("side_left", 0, 0.0), ("side_right", 0, 1.0),
                             ("side_bottom", 1, 0.0), ("side_top", 1, 1.0)):
        on = (np.abs(p[:, axis] - value) <= tol) & (np.abs(q[:, axis] - value) <= tol)
        out[tag] = edges[on]
    return out


def structured_square_mesh(n: int, dirichlet: bool = False) -> TriMesh:
    """Uniform n x n mesh of (0,1)^2; each square split along its (i,j)-(i+1,j+1) diagonal."""
    t = np.arange(n + 1) / n
    X, Y = np.meshgrid(t, t)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    a = (j * (n + 1) + i).ravel()
    b, c, d = a + 1, a + n + 2, a + n + 1
    triangles = np.stack([np.column_stack([a, b, c]), np.column_stack([a, c, d])], axis=1).reshape(-1, 3)
    edges = _boundary_edges(triangles)
    tags = _tag_sides(vertices, edges)
    if dirichlet:
        tags = {DIRICHLET_TAG: edges}
    return TriMesh(vertices, triangles, tags)


def min_clearance(cell: UnitCellGeometry) -> float:
    gaps = [1.0]
    for h in cell.holes:
        cx, cy = h.center
        gaps.append(min(cx, 1 - cx, cy, 1 - cy) - h.radius)
    for a in range(len(cell.holes)):
        for b in range(a + 1, len(cell.holes)):
            ha, hb = cell.holes[a], cell.holes[b]
            gaps.append(math.dist(ha.center, hb.center) - ha.radius - hb.radius)
    return min(gaps)


_GROWTH = 0.2   # size-field growth away from a hole
_ALPHA = 0.7    # minimum point separation as a fraction of the local size


def mesh_unit_cell(cell: UnitCellGeometry, target_h: float) -> TriMesh:
    """Conforming triangulation of the perforated unit cell.

    Points: a uniform grid of spacing <= target_h (side points always kept),
    the hole polygons, and graded rings around every hole.  The point cloud
    is triangulated by Delaunay; triangles inside the polygons are removed.
    """
    if not target_h > 0:
        raise ValueError("target_h must be positive")
    report = validate_cell(cell.holes)
    if not report.ok:
        raise MeshingError(f"invalid cell: {report}")
    n = max(1, math.ceil(1.0 / target_h - 1e-9))
    h = 1.0 / n
    if not cell.holes:
        return structured_square_mesh(n)
    s = cell.boundary_segments_per_hole
    if s < 8:
        raise MeshingError(f"{s} boundary segments per hole is too coarse (need >= 8)")
    clearance = min_clearance(cell)
    if clearance < 0.5 * target_h:
        raise MeshingError(
            f"insufficient resolution: clearance {clearance:.4g} < target_h/2 = {0.5 * target_h:.4g}")

    centers = np.array([hole.center for hole in cell.holes])
    radii = np.array([hole.radius for hole in cell.holes])
    chord = 2 * radii * np.sin(np.pi / s)
    if np.any(chord > 2 * target_h):
        raise MeshingError("hole polygon edges longer than 2*target_h")

    def size(pts):
        d = np.linalg.norm(pts[:, None, :] - centers[None], axis=2) - radii[None]
        return np.minimum(h, np.min(chord[None] + _GROWTH * np.maximum(d, 0), axis=1))

    def admissible(pts):
        d = np.linalg.norm(pts[:, None, :] - centers[None], axis=2) - radii[None]
        ok = np.all(d >= 0.6 * chord[None], axis=1)
        side = np.min(np.column_stack([pts, 1 - pts]), axis=1)
        return ok & (side >= 0.5 * size(pts))

    t = np.arange(n + 1) / n
    X, Y = np.meshgrid(t, t)
    grid = np.column_stack([X.ravel(), Y.ravel()])
    on_side = np.min(np.column_stack([grid, 1 - grid]), axis=1) <= GEOM_TOL
    polys = [cell.polygon(k) for k in range(len(cell.holes))]
    accepted = [grid[on_side]] + polys

    def take(cands):
        cands = cands[admissible(cands)]
        if len(cands) == 0:
            return
        tree = cKDTree(np.concatenate(accepted))
        d, _ = tree.query(cands)
        keep = d >= _ALPHA * size(cands)
        if np.any(keep):
            accepted.append(cands[keep])

    for k in range(len(cell.holes)):
        rho, ell = radii[k], chord[k]
        offset = np.pi / s
        while True:
            nxt = min(h, ell * (1 + _GROWTH))
            rho = rho + 0.866 * 0.5 * (ell + nxt)
            ell = nxt
            m = max(8, math.ceil(2 * np.pi * rho / ell))
            theta = offset + 2 * np.pi * np.arange(m) / m
            offset += np.pi / m
            take(centers[k] + rho * np.column_stack([np.cos(theta), np.sin(theta)]))
            if ell >= h and rho - radii[k] > 1.5 * h:
                break
    take(grid[~on_side])

    pts = np.concatenate(accepted)
    tri = Delaunay(pts)
    if len(tri.coplanar):
        raise MeshingError("triangulation dropped input points")
    triangles = tri.simplices.astype(np.int64)

    n_side = int(on_side.sum())
    poly_start = np.cumsum([n_side] + [s] * len(polys))[:-1]
    owner = np.full(len(pts), -1)
    for k, start in enumerate(poly_start):
        owner[start:start + s] = k
    o = owner[triangles]
    inside = (o[:, 0] >= 0) & (o[:, 0] == o[:, 1]) & (o[:, 1] == o[:, 2])
    triangles = triangles[~inside]

    p = pts[triangles]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - \
             (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    if np.any(np.abs(signed) <= 1e-14):
        raise MeshingError("degenerate triangle produced")
    flip = signed < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    bnd = _boundary_edges(triangles)
    tags = _tag_sides(pts, bnd)
    bkey = {tuple(sorted(e)) for e in bnd.tolist()}
    for tag in HOLE_TAGS:
        tags[tag] = np.empty((0, 2), dtype=np.int64)
    for k, start in enumerate(poly_start):
        ring = start + np.arange(s)
        poly_edges = np.column_stack([ring, np.roll(ring, -1)])
        missing = [e for e in poly_edges.tolist() if tuple(sorted(e)) not in bkey]
        if missing:
            raise MeshingError(f"hole {k}: {len(missing)} polygon edges not recovered")
        tag = hole_tag(cell.holes[k].phase)
        tags[tag] = np.concatenate([tags[tag], poly_edges])
    mesh = TriMesh(pts, triangles, tags)
    tagged = sum(len(e) for e in tags.values())
    if tagged != len(bnd):
        raise MeshingError("untagged boundary edges remain")
    mesh.periodic_pairs()
    return mesh


@dataclass(eq=False)
class PerforatedDomainMesh:
    mesh: TriMesh
    N: int
    cell_mesh: TriMesh
    cell_of_triangle: np.ndarray
    cell_vertex: np.ndarray

    @property
    def epsilon(self) -> float:
        return 1.0 / self.N


def tile_mesh(cell_mesh: TriMesh, N: int) -> PerforatedDomainMesh:
    """Tile the unit-cell mesh N x N, scale by 1/N and merge interface vertices."""
    if N < 1:
        raise ValueError("N must be >= 1")
    cell_mesh.periodic_pairs()
    nv, nt = cell_mesh.n_vertices, cell_mesh.n_triangles
    ij = np.array([(i, j) for j in range(N) for i in range(N)], dtype=float)
    coords = ((cell_mesh.vertices[None, :, :] + ij[:, None, :]) / N).reshape(-1, 2)
    keys = np.round(coords / GEOM_TOL).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    vertices = coords[first]
    triangles = inverse[(cell_mesh.triangles[None] + nv * np.arange(N * N)[:, None, None]).reshape(-1, 3)]
    cell_vertex = np.empty(len(vertices), dtype=np.int64)
    cell_vertex[inverse] = np.tile(np.arange(nv), N * N)
    cell_of_triangle = np.repeat(np.arange(N * N), nt)

    tags = {}
    for tag in HOLE_TAGS:
        e = cell_mesh.boundary_edges.get(tag, np.empty((0, 2), np.int64))
        tags[tag] = inverse[(e[None] + nv * np.arange(N * N)[:, None, None]).reshape(-1, 2)]
    bnd = _boundary_edges(triangles)
    hole_keys = {tuple(sorted(e)) for tag in HOLE_TAGS for e in tags[tag].tolist()}
    outer = np.array([e for e in bnd.tolist() if tuple(sorted(e)) not in hole_keys],
                     dtype=np.int64).reshape(-1, 2)
    pv = vertices[outer]
    on_boundary = np.min(np.concatenate([pv, 1 - pv], axis=2), axis=2) <= GEOM_TOL
    if not np.all(on_boundary):
        raise MeshingError("unmatched periodic sides: interior interface left open after tiling")
    tags[DIRICHLET_TAG] = outer
    mesh = TriMesh(vertices, triangles, tags)
    return PerforatedDomainMesh(mesh, N, cell_mesh, cell_of_triangle, cell_vertex)


def mesh_measures(mesh: TriMesh) -> tuple[float, float, float, float, float]:
    """(|Q0|, |S1|, |S2|, q1, q2) evaluated on the polygonal mesh itself."""
    area = float(mesh.areas.sum())
    s1 = mesh.edge_length("hole_phase_1")
    s2 = mesh.edge_length("hole_phase_2")
    return area, s1, s2, s1 / area, s2 / area
