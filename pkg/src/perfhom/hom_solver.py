"""The homogenized problem on the unperforated unit square.

    int A grad v . grad phi + sum_m |S_m| int kappa_m(v) phi
        = |Q0| int f phi + sum_m |S_m| int g_m phi,     v = 0 on the boundary,

with the constant effective tensor A.  Uses the uniform structured mesh so
that point evaluation is a closed-form lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cell import HomogenizedTensor
from .fem import (DofMap, FemField, assemble_load, assemble_mass, assemble_stiffness, at_quadrature,
                  constant_coefficient, element_gradients, volume_integral)
from .fine_solver import CG_TOL, MAX_NEWTON, NEWTON_TOL, NonlinearPhase, NonSPDError, newton
from .geometry import TriMesh, structured_square_mesh


class TensorNotSPDError(ValueError):
    pass


@dataclass(eq=False)
class HomProblem:
    tensor: np.ndarray | HomogenizedTensor
    measures: tuple[float, float, float]  # |Q0|, |S1|, |S2|
    phases: tuple[NonlinearPhase | None, NonlinearPhase | None]
    f: Callable | float | None = None
    g: tuple = (None, None)

    def __post_init__(self):
        A = self.tensor.matrix if isinstance(self.tensor, HomogenizedTensor) else np.asarray(self.tensor, float)
        A = 0.5 * (A + A.T)
        if A.shape != (2, 2) or np.linalg.eigvalsh(A).min() <= 0:
            raise TensorNotSPDError(f"homogenized tensor is not SPD: {A.tolist()}")
        self.matrix = A

    def active_phases(self):
        for m in (1, 2):
            s = self.measures[m]
            if s > 0 and self.phases[m - 1] is not None:
                yield m, s, self.phases[m - 1]

    def load(self, mesh: TriMesh) -> np.ndarray:
        b = self.measures[0] * assemble_load(mesh, self.f)
        for m, s, _ in self.active_phases():
            b = b + s * assemble_load(mesh, self.g[m - 1])
        return b


@dataclass(eq=False)
class HomSolution:
    v: FemField
    grad: np.ndarray  # (V, 2) recovered nodal gradient
    n: int
    trace: list[float]
    iterations: int
    cg_iterations: list[int] = field(default_factory=list)
    energy: float = float("nan")

    @property
    def h(self) -> float:
        return 1.0 / self.n


def hom_mesh(n: int) -> TriMesh:
    return structured_square_mesh(n, dirichlet=True)


def _hom_system(problem: HomProblem, mesh: TriMesh):
    K = assemble_stiffness(mesh, constant_coefficient(problem.matrix))
    b = problem.load(mesh)
    phases = list(problem.active_phases())

    def system(v):
        F = K @ v - b
        J = K
        if phases:
            vq = at_quadrature(mesh, v)
            val = np.zeros_like(vq)
            der = np.zeros_like(vq)
            for _, s, ph in phases:
                val += s * ph.kappa(vq)
                der += s * ph.kappa_prime(vq)
            if der.min() < 0:
                raise NonSPDError("kappa' < 0 encountered")
            F = F + _volume_vector(mesh, val)
            J = J + assemble_mass(mesh, der)
        return F, J.tocsr()

    return system


def _volume_vector(mesh: TriMesh, vals_q: np.ndarray) -> np.ndarray:
    from .fem import TRI_QUAD_BARY, TRI_QUAD_W
    fe = np.einsum("t,q,tq,qa->ta", mesh.areas, TRI_QUAD_W, vals_q, TRI_QUAD_BARY)
    return np.bincount(mesh.triangles.ravel(), weights=fe.ravel(), minlength=mesh.n_vertices)


def solve_homogenized(problem: HomProblem, mesh_h: float, newton_tol: float = NEWTON_TOL,
                      max_newton: int = MAX_NEWTON, v0: np.ndarray | None = None,
                      cg_tol: float = CG_TOL) -> HomSolution:
    n = int(round(1.0 / mesh_h))
    if n < 1 or abs(n * mesh_h - 1.0) > 1e-9:
        raise ValueError("mesh_h must be 1/n for an integer n")
    mesh = hom_mesh(n)
    v, trace, its, cg_its = newton(_hom_system(problem, mesh), DofMap.dirichlet(mesh), v0,
                                   newton_tol, max_newton, cg_tol)
    sol = HomSolution(FemField(mesh, v), recover_gradient(v, mesh), n, trace, its, cg_its)
    sol.energy = energy_integral_hom(sol, problem)
    return sol


def energy_integral_hom(solution: HomSolution | FemField, problem: HomProblem) -> float:
    """int A grad v . grad v + sum_m |S_m| int kappa_m(v) v."""
    fld = solution.v if isinstance(solution, HomSolution) else solution
    mesh, v = fld.mesh, fld.values
    g = element_gradients(mesh, v)
    e = float(np.einsum("t,ti,ij,tj->", mesh.areas, g, problem.matrix, g))
    vq = at_quadrature(mesh, v)
    for _, s, ph in problem.active_phases():
        e += s * volume_integral(mesh, ph.kappa(vq) * vq)
    return e


def hom_load_functional(solution: HomSolution, problem: HomProblem) -> float:
    """|Q0| int f v + sum_m |S_m| int g_m v."""
    return float(problem.load(solution.v.mesh) @ solution.v.values)


def recover_gradient(v: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of the element gradients around each node, (V, 2)."""
    g = element_gradients(mesh, np.asarray(v))
    w = np.repeat(mesh.areas, 3)
    tri = mesh.triangles.ravel()
    den = np.bincount(tri, weights=w, minlength=mesh.n_vertices)
    out = np.empty((mesh.n_vertices, 2))
    for k in range(2):
        out[:, k] = np.bincount(tri, weights=w * np.repeat(g[:, k], 3), minlength=mesh.n_vertices) / den
    return out


def interpolate_structured(values: np.ndarray, n: int, points: np.ndarray) -> np.ndarray:
    """P1 interpolation of nodal values on `structured_square_mesh(n)` at points in [0,1]^2.

    `values` may carry trailing components, (V,) or (V, k).
    """
    pts = np.asarray(points, float)
    s = pts * n
    ij = np.clip(np.floor(s).astype(int), 0, n - 1)
    loc = s - ij
    i, j = ij[:, 0], ij[:, 1]
    a = j * (n + 1) + i
    b, c, d = a + 1, a + n + 2, a + n + 1
    x, y = loc[:, 0], loc[:, 1]
    lower = x >= y
    if values.ndim == 2:
        x, y, lower = x[:, None], y[:, None], lower[:, None]
    va, vb, vc, vd = values[a], values[b], values[c], values[d]
    return np.where(lower, va + x * (vb - va) + y * (vc - vb), va + x * (vc - vd) + y * (vd - va))


def element_gradient_at(v: np.ndarray, n: int, points: np.ndarray) -> np.ndarray:
    """Piecewise-constant gradient of the P1 field v at points (structured mesh), (P, 2)."""
    pts = np.asarray(points, float)
    s = pts * n
    ij = np.clip(np.floor(s).astype(int), 0, n - 1)
    loc = s - ij
    a = ij[:, 1] * (n + 1) + ij[:, 0]
    b, c, d = a + 1, a + n + 2, a + n + 1
    lower = loc[:, 0] >= loc[:, 1]
    gx = np.where(lower, v[b] - v[a], v[c] - v[d]) * n
    gy = np.where(lower, v[c] - v[b], v[d] - v[a]) * n
    return np.column_stack([gx, gy])
