"""P1 finite elements: quadrature, assembly, constraints, Jacobi-PCG and norms."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import DIRICHLET_TAG, GEOM_TOL, TriMesh

log = logging.getLogger(__name__)

# degree-2 rule with interior points (barycentric), weights sum to 1
TRI_QUAD_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
TRI_QUAD_W = np.full(3, 1 / 3)
# 2-point Gauss on [0, 1]
EDGE_QUAD_T = 0.5 + np.array([-1, 1]) / (2 * np.sqrt(3))
EDGE_QUAD_W = np.array([0.5, 0.5])


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class InconsistentSystemError(RuntimeError):
    pass


def collapsed_gauss_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre rule mapped to the reference triangle (Duffy map).

    Exact for polynomials of degree 2*order - 2; returns barycentric points
    and weights summing to 1.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    x, w = 0.5 * (x + 1), 0.5 * w
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    s = u.ravel()
    t = (v * (1 - u)).ravel()
    weights = (wu * wv * (1 - u)).ravel() * 2
    bary = np.column_stack([1 - s - t, s, t])
    return bary, weights


def quadrature_points(mesh: TriMesh, bary: np.ndarray = TRI_QUAD_BARY) -> np.ndarray:
    """Physical quadrature points, shape (T, Q, 2)."""
    return np.einsum("qa,tad->tqd", bary, mesh.vertices[mesh.triangles])


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class CoefficientField:
    """1-periodic symmetric matrix field xi -> a(xi) with ellipticity bounds.

    `evaluate` maps an array (..., 2) of cell coordinates to (..., 2, 2).
    """

    evaluate: Callable[[np.ndarray], np.ndarray]
    kappa1: float
    kappa2: float
    name: str = "custom"
    params: tuple = ()

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        return self.evaluate(np.asarray(xi, dtype=float))

    def at_physical(self, x: np.ndarray, scale: float) -> np.ndarray:
        """a(x / scale), with x / scale wrapped into the unit cell."""
        return self.evaluate(np.mod(np.asarray(x) / scale, 1.0))

    def check(self, n_samples: int = 16, n_dirs: int = 16) -> list[str]:
        """Sampled symmetry, ellipticity and periodicity; returns violations."""
        t = (np.arange(n_samples) + 0.37) / n_samples
        X, Y = np.meshgrid(t, t)
        xi = np.column_stack([X.ravel(), Y.ravel()])
        a = self(xi)
        problems = []
        if not np.allclose(a, np.swapaxes(a, -1, -2), rtol=0, atol=1e-14):
            problems.append("not symmetric")
        ang = np.pi * np.arange(n_dirs) / n_dirs
        eta = np.column_stack([np.cos(ang), np.sin(ang)])
        quad = np.einsum("di,nij,dj->nd", eta, a, eta)
        if quad.min() < self.kappa1 - 1e-12 or quad.max() > self.kappa2 + 1e-12:
            problems.append(f"ellipticity bounds violated: range [{quad.min():.4g}, {quad.max():.4g}]")
        for z in ((1, 0), (0, 1), (-2, 3)):
            if not np.allclose(self(xi + np.asarray(z)), a, rtol=0, atol=1e-12):
                problems.append(f"not 1-periodic under shift {z}")
        return problems


def constant_coefficient(matrix) -> CoefficientField:
    m = np.asarray(matrix, dtype=float)
    eig = np.linalg.eigvalsh(m)

    def evaluate(xi):
        return np.broadcast_to(m, xi.shape[:-1] + (2, 2)).copy()

    return CoefficientField(evaluate, float(eig[0]), float(eig[1]), "constant", tuple(m.ravel()))


# ---------------------------------------------------------------------------
# sparse assembly


@dataclass(eq=False)
class _Pattern:
    rows: np.ndarray
    cols: np.ndarray
    inverse: np.ndarray
    n: int

    def build(self, values: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.inverse, weights=values.ravel(), minlength=len(self.rows))
        mat = sp.csr_matrix((data, (self.rows, self.cols)), shape=(self.n, self.n))
        mat.eliminate_zeros()
        return mat


def _pattern(conn: np.ndarray, n: int) -> _Pattern:
    k = conn.shape[1]
    r = np.repeat(conn, k, axis=1).ravel()
    c = np.tile(conn, (1, k)).ravel()
    uniq, inverse = np.unique(r * n + c, return_inverse=True)
    return _Pattern(uniq // n, uniq % n, inverse.ravel(), n)



def _cached_pattern(mesh: TriMesh, key: str, conn: np.ndarray) -> _Pattern:
    store = mesh.__dict__.setdefault("_patterns", {})
    if key not in store:
        store[key] = _pattern(conn, mesh.n_vertices)
    return store[key]


def element_coefficients(mesh: TriMesh, coeff: CoefficientField | None, scale: float = 1.0,
                         quad_order: int | None = None) -> np.ndarray:
    """Quadrature of the coefficient over each triangle divided by its area, (T, 2, 2)."""
    if coeff is None:
        return np.broadcast_to(np.eye(2), (mesh.n_triangles, 2, 2))
    bary, w = (TRI_QUAD_BARY, TRI_QUAD_W) if quad_order is None else collapsed_gauss_rule(quad_order)
    a = coeff.at_physical(quadrature_points(mesh, bary), scale)
    return np.einsum("q,tqij->tij", w, a)


def assemble_stiffness(mesh: TriMesh, coeff: CoefficientField | None = None, scale: float = 1.0,
                       quad_order: int | None = None) -> sp.csr_matrix:
    """Matrix of (u, v) -> int a(x/scale) grad u . grad v over all vertices.

    Constraints are applied separately (`apply_constraints`).  The default
    rule is the 3-point degree-2 rule; `quad_order` switches to a collapsed
    Gauss rule with quad_order^2 points.
    """
    g = mesh.gradients
    abar = element_coefficients(mesh, coeff, scale, quad_order)
    ke = np.einsum("t,tai,tij,tbj->tab", mesh.areas, g, abar, g)
    ke = 0.5 * (ke + np.swapaxes(ke, 1, 2))
    return _cached_pattern(mesh, "tri", mesh.triangles).build(ke)


def assemble_mass(mesh: TriMesh, weight: np.ndarray | None = None) -> sp.csr_matrix:
    """Mass matrix; `weight` optionally gives values (T, 3) at the quadrature points."""
    phi = TRI_QUAD_BARY
    if weight is None:
        weight = np.ones((mesh.n_triangles, 3))
    me = np.einsum("t,q,tq,qa,qb->tab", mesh.areas, TRI_QUAD_W, weight, phi, phi)
    me = 0.5 * (me + np.swapaxes(me, 1, 2))
    return _cached_pattern(mesh, "tri", mesh.triangles).build(me)


def assemble_load(mesh: TriMesh, density: Callable | float | None) -> np.ndarray:
    """Vector of int f phi_i dx with f evaluated at the quadrature points."""
    if density is None:
        return np.zeros(mesh.n_vertices)
    x = quadrature_points(mesh)
    f = density(x) if callable(density) else np.full(x.shape[:2], float(density))
    fe = np.einsum("t,q,tq,qa->ta", mesh.areas, TRI_QUAD_W, f, TRI_QUAD_BARY)
    return np.bincount(mesh.triangles.ravel(), weights=fe.ravel(), minlength=mesh.n_vertices)


def _edge_data(mesh: TriMesh, tag: str):
    e = mesh.edges(tag)
    p, q = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
    length = np.linalg.norm(q - p, axis=1)
    phi = np.column_stack([1 - EDGE_QUAD_T, EDGE_QUAD_T])  # (Q, 2)
    x = p[:, None, :] + EDGE_QUAD_T[None, :, None] * (q - p)[:, None, :]
    return e, length, phi, x


def assemble_boundary_linear(mesh: TriMesh, tag: str, density: Callable | float | None,
                             interpolate: bool = False) -> np.ndarray:
    """Vector of int_{tag} density phi_i ds with 2-point Gauss per edge.

    With `interpolate`, the density is replaced by its P1 interpolant along
    each edge (nodal values), otherwise it is evaluated at Gauss points.
    """
    e, length, phi, x = _edge_data(mesh, tag)
    if density is None or len(e) == 0:
        return np.zeros(mesh.n_vertices)
    if not callable(density):
        g = np.full(x.shape[:2], float(density))
    elif interpolate:
        g = density(mesh.vertices)[e] @ phi.T
    else:
        g = density(x)
    ve = np.einsum("e,q,eq,qa->ea", length, EDGE_QUAD_W, g, phi)
    return np.bincount(e.ravel(), weights=ve.ravel(), minlength=mesh.n_vertices)


def assemble_boundary_nonlinear(mesh: TriMesh, tag: str, u: np.ndarray, kappa: Callable,
                                kappa_prime: Callable) -> tuple[np.ndarray, sp.csr_matrix]:
    """Residual int kappa(u) phi_i ds and Jacobian int kappa'(u) phi_j phi_i ds on `tag`."""
    e, length, phi, _ = _edge_data(mesh, tag)
    n = mesh.n_vertices
    if len(e) == 0:
        return np.zeros(n), sp.csr_matrix((n, n))
    uq = u[e] @ phi.T
    re = np.einsum("e,q,eq,qa->ea", length, EDGE_QUAD_W, kappa(uq), phi)
    je = np.einsum("e,q,eq,qa,qb->eab", length, EDGE_QUAD_W, kappa_prime(uq), phi, phi)
    je = 0.5 * (je + np.swapaxes(je, 1, 2))
    res = np.bincount(e.ravel(), weights=re.ravel(), minlength=n)
    return res, _cached_pattern(mesh, "edge:" + tag, e).build(je)


def boundary_integral(mesh: TriMesh, tag: str, values_at_gauss: Callable[[np.ndarray], np.ndarray],
                      u: np.ndarray) -> float:
    """int_{tag} F(u) ds for a pointwise map F of the P1 field u (2-point Gauss)."""
    e, length, phi, _ = _edge_data(mesh, tag)
    if len(e) == 0:
        return 0.0
    uq = u[e] @ phi.T
    return float(np.einsum("e,q,eq->", length, EDGE_QUAD_W, values_at_gauss(uq)))


def volume_integral(mesh: TriMesh, values_at_quad: np.ndarray) -> float:
    return float(np.einsum("t,q,tq->", mesh.areas, TRI_QUAD_W, values_at_quad))


def at_quadrature(mesh: TriMesh, u: np.ndarray) -> np.ndarray:
    """P1 field values at the triangle quadrature points, (T, 3)."""
    return u[mesh.triangles] @ TRI_QUAD_BARY.T


# ---------------------------------------------------------------------------
# constraints


FREE, DIRICHLET, SLAVE = 0, 1, 2


@dataclass(eq=False)
class DofMap:
    """Per-vertex constraint record and the free-dof numbering.

    kind[v] is FREE, DIRICHLET or SLAVE; dof[v] is the free index of v (or of
    its master for slaves, -1 for Dirichlet); value[v] is the Dirichlet value.
    """

    mesh: TriMesh
    kind: np.ndarray
    dof: np.ndarray
    value: np.ndarray
    periodic: bool = False

    @property
    def n_free(self) -> int:
        return int((self.kind == FREE).sum())

    @classmethod
    def unconstrained(cls, mesh: TriMesh) -> "DofMap":
        n = mesh.n_vertices
        return cls(mesh, np.zeros(n, np.int8), np.arange(n), np.zeros(n))

    @classmethod
    def dirichlet(cls, mesh: TriMesh, tags=(DIRICHLET_TAG,), value: float | Callable = 0.0) -> "DofMap":
        n = mesh.n_vertices
        kind = np.zeros(n, np.int8)
        fixed = np.unique(np.concatenate([mesh.edges(t).ravel() for t in tags]))
        kind[fixed] = DIRICHLET
        dof = np.full(n, -1)
        free = np.flatnonzero(kind == FREE)
        dof[free] = np.arange(len(free))
        vals = np.zeros(n)
        vals[fixed] = value(mesh.vertices[fixed]) if callable(value) else value
        return cls(mesh, kind, dof, vals)

    @classmethod
    def periodic_cell(cls, mesh: TriMesh, tol: float = GEOM_TOL) -> "DofMap":
        n = mesh.n_vertices
        slaves, masters = mesh.periodic_pairs(tol)
        kind = np.zeros(n, np.int8)
        kind[slaves] = SLAVE
        dof = np.full(n, -1)
        free = np.flatnonzero(kind == FREE)
        dof[free] = np.arange(len(free))
        dof[slaves] = dof[masters]
        return cls(mesh, kind, dof, np.zeros(n), periodic=True)

    def prolongation(self) -> sp.csr_matrix:
        rows = np.flatnonzero(self.kind != DIRICHLET)
        return sp.csr_matrix((np.ones(len(rows)), (rows, self.dof[rows])),
                             shape=(len(self.kind), self.n_free))

    def lift(self) -> np.ndarray:
        return np.where(self.kind == DIRICHLET, self.value, 0.0)

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        full = self.lift()
        mask = self.kind != DIRICHLET
        full[mask] = x_free[self.dof[mask]]
        return full

    def restrict(self, u: np.ndarray) -> np.ndarray:
        return u[self.kind == FREE]


def apply_constraints(matrix: sp.spmatrix, rhs: np.ndarray, dofmap: DofMap):
    """Reduced system P^T A P x = P^T (b - A g).

    Dirichlet rows and columns are eliminated with the lift g; periodic
    slaves are folded into their masters.
    """
    P = dofmap.prolongation()
    g = dofmap.lift()
    A = (P.T @ matrix @ P).tocsr()
    A.eliminate_zeros()
    b = P.T @ (rhs - matrix @ g)
    return A, b


def check_consistent(rhs: np.ndarray, tol: float = 1e-9, scale: float = 0.0) -> None:
    """Singular periodic systems need rhs orthogonal to constants.

    `scale` is the magnitude of the data before cancellation; it keeps a rhs
    that vanishes up to roundoff from being flagged.
    """
    total = abs(float(np.sum(rhs)))
    if total > tol * max(np.linalg.norm(rhs), 1e-300) and total > 1e-13 * scale:
        raise InconsistentSystemError(
            f"rhs not orthogonal to constants: |sum| = {total:.3g}, |rhs| = {np.linalg.norm(rhs):.3g}")


# ---------------------------------------------------------------------------
# solver


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float


def solve_cg(matrix: sp.spmatrix, rhs: np.ndarray, tol: float = 1e-10, max_iter: int | None = None,
             x0: np.ndarray | None = None) -> CGResult:
    """Jacobi-preconditioned conjugate gradients; stops at |r| <= tol |rhs|."""
    n = len(rhs)
    if max_iter is None:
        max_iter = max(20 * n, 20)
    bnorm = float(np.linalg.norm(rhs))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return CGResult(np.zeros(n), 0, 0.0)
    diag = matrix.diagonal()
    if np.any(diag <= 0):
        raise ValueError("matrix has nonpositive diagonal; not SPD")
    dinv = 1.0 / diag
    r = rhs - matrix @ x if x0 is not None else rhs.copy()
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    target = tol * bnorm
    res = float(np.linalg.norm(r))
    k = 0
    while res > target:
        if k >= max_iter:
            raise ConvergenceError(f"CG did not converge in {max_iter} iterations "
                                   f"(relative residual {res / bnorm:.3e})", res / bnorm, k)
        q = matrix @ p
        pq = float(p @ q)
        if pq <= 0:
            raise ConvergenceError("CG breakdown: matrix not positive definite", res / bnorm, k)
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        z = dinv * r
        rz_new = float(r @ z)
        p *= rz_new / rz
        p += z
        rz = rz_new
        res = float(np.linalg.norm(r))
        k += 1
    return CGResult(x, k, res / bnorm)


def lumped_weights(mesh: TriMesh) -> np.ndarray:
    """int phi_i dx; exact integration weights for P1 fields."""
    return np.bincount(mesh.triangles.ravel(), weights=np.repeat(mesh.areas / 3, 3),
                       minlength=mesh.n_vertices)


def integral(mesh: TriMesh, u: np.ndarray) -> float:
    return float(lumped_weights(mesh) @ u)


def solve_constrained(matrix, rhs, dofmap: DofMap, tol: float = 1e-12,
                      rhs_scale: float = 0.0) -> tuple[np.ndarray, CGResult]:
    """Solve with constraints; periodic systems are checked for consistency and mean-normalized.

    A reduced rhs below 1e-14 * rhs_scale is treated as exactly zero.
    """
    A, b = apply_constraints(matrix, rhs, dofmap)
    if dofmap.periodic:
        check_consistent(b, scale=rhs_scale)
    if np.linalg.norm(b) <= 1e-14 * rhs_scale:
        b = np.zeros_like(b)
    out = solve_cg(A, b, tol)
    u = dofmap.expand(out.x)
    if dofmap.periodic:
        mesh = dofmap.mesh
        u = u - integral(mesh, u) / float(mesh.areas.sum())
    return u, out


# ---------------------------------------------------------------------------
# fields and norms


@dataclass(eq=False)
class FemField:
    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_vertices,):
            raise ValueError("field size does not match mesh")

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Barycentric interpolation at arbitrary points inside the mesh."""
        tri, bary = locate(self.mesh, np.atleast_2d(points))
        return np.einsum("pa,pa->p", bary, self.values[self.mesh.triangles[tri]])

    def write(self, path) -> None:
        from pathlib import Path
        Path(path).write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(self.values.tolist())))


def _barycentric(mesh: TriMesh, tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = mesh.vertices[mesh.triangles[tri]]
    v0, v1 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    w = pts - p[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (w[:, 0] * v1[:, 1] - w[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * w[:, 1] - v0[:, 1] * w[:, 0]) / det
    return np.column_stack([1 - l1 - l2, l1, l2])


def locate(mesh: TriMesh, pts: np.ndarray, k: int = 12, tol: float = 1e-10):
    """Containing triangle and barycentric coordinates for each point."""
    tree = mesh.__dict__.get("_centroid_tree")
    if tree is None:
        tree = mesh.__dict__["_centroid_tree"] = cKDTree(mesh.centroids)
    k = min(k, mesh.n_triangles)
    _, cand = tree.query(pts, k=k)
    cand = cand.reshape(len(pts), k)
    tri = np.full(len(pts), -1)
    bary = np.zeros((len(pts), 3))
    for j in range(k):
        todo = tri < 0
        if not todo.any():
            break
        b = _barycentric(mesh, cand[todo, j], pts[todo])
        inside = b.min(axis=1) >= -tol
        idx = np.flatnonzero(todo)[inside]
        tri[idx] = cand[todo, j][inside]
        bary[idx] = b[inside]
    if np.any(tri < 0):
        raise ValueError(f"{int((tri < 0).sum())} points outside the mesh")
    return tri, bary


def element_gradients(mesh: TriMesh, u: np.ndarray) -> np.ndarray:
    return np.einsum("ta,tad->td", u[mesh.triangles], mesh.gradients)


def norm_l2(u: np.ndarray, mesh: TriMesh) -> float:
    return float(np.sqrt(volume_integral(mesh, at_quadrature(mesh, u) ** 2)))


def seminorm_h1(u: np.ndarray, mesh: TriMesh) -> float:
    g = element_gradients(mesh, u)
    return float(np.sqrt(np.einsum("t,td,td->", mesh.areas, g, g)))


def norm_h1(u: np.ndarray, mesh: TriMesh) -> float:
    return float(np.hypot(norm_l2(u, mesh), seminorm_h1(u, mesh)))


def trace_norm_sq(u: np.ndarray, mesh: TriMesh, tags, eps: float) -> float:
    """eps * int_{tags} u^2 ds."""
    return eps * sum(boundary_integral(mesh, t, np.square, u) for t in tags)


def energy_norm_sq(u: np.ndarray, mesh: TriMesh, tags, eps: float) -> float:
    """|u|_eps^2 = int |grad u|^2 + eps int_Xi u^2."""
    return seminorm_h1(u, mesh) ** 2 + trace_norm_sq(u, mesh, tags, eps)
