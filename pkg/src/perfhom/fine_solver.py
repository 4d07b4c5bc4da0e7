"""The eps-level problem on the perforated domain.

Discrete weak form, for every P1 test function phi vanishing on the outer
boundary:

    int a(x/eps) grad u . grad phi + eps sum_m int_{Xi_m} kappa_m(u) phi ds
        = int f phi + eps sum_m int_{Xi_m} g_m phi ds.

Solved by undamped Newton with the exact Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fem import (CoefficientField, ConvergenceError, DofMap, FemField, assemble_boundary_linear,
                  assemble_boundary_nonlinear, assemble_load, assemble_stiffness, boundary_integral,
                  norm_h1, quadrature_points, solve_cg, TRI_QUAD_BARY, TRI_QUAD_W)
from .geometry import DIRICHLET_TAG, PerforatedDomainMesh, TriMesh, hole_tag

NEWTON_TOL = 1e-10
CG_TOL = 1e-12
MAX_NEWTON = 25


class NonSPDError(RuntimeError):
    """Newton matrix lost positive definiteness (negative kappa')."""


@dataclass(frozen=True)
class NonlinearPhase:
    """kappa, its derivative and primitive K(z) = int_0^z kappa, with c1 <= kappa' <= c2."""

    kappa: Callable[[np.ndarray], np.ndarray]
    kappa_prime: Callable[[np.ndarray], np.ndarray]
    primitive: Callable[[np.ndarray], np.ndarray]
    c1: float
    c2: float
    name: str = "custom"
    params: tuple = ()

    @property
    def is_linear(self) -> bool:
        return self.name == "linear"

    def check(self, t_max: float = 10.0, n: int = 2001, delta: float = 1e-6) -> list[str]:
        """Sampled bound, primitive bracketing and finite-difference checks."""
        t = np.linspace(-t_max, t_max, n)
        problems = []
        kp = self.kappa_prime(t)
        if kp.min() < self.c1 - 1e-12 or kp.max() > self.c2 + 1e-12:
            problems.append(f"kappa' outside [{self.c1}, {self.c2}]: [{kp.min():.6g}, {kp.max():.6g}]")
        k0 = float(self.kappa(np.zeros(1))[0])
        K = self.primitive(t)
        lo = 0.5 * self.c1 * t**2 + k0 * t
        hi = 0.5 * self.c2 * t**2 + k0 * t
        if np.any(K < lo - 1e-10) or np.any(K > hi + 1e-10):
            problems.append("primitive not bracketed by the quadratic bounds")
        fd = (self.kappa(t + delta) - self.kappa(t - delta)) / (2 * delta)
        if np.max(np.abs(fd - kp)) > 1e-6:
            problems.append("kappa' disagrees with finite differences of kappa")
        return problems


def linear_phase(a: float = 1.0, b: float = 0.0) -> NonlinearPhase:
    """kappa(t) = a t + b."""
    if a <= 0:
        raise ValueError("linear phase needs a > 0")
    return NonlinearPhase(lambda t: a * np.asarray(t) + b,
                          lambda t: np.full(np.shape(t), float(a)),
                          lambda z: 0.5 * a * np.asarray(z) ** 2 + b * np.asarray(z),
                          a, a, "linear", (a, b))


def soft_sine_phase(c1: float = 0.7, c2: float = 1.3) -> NonlinearPhase:
    """kappa(t) = m t + d sin t with m = (c1+c2)/2, d = (c2-c1)/2, so kappa' = m + d cos t."""
    if not 0 < c1 <= c2:
        raise ValueError("soft-sine needs 0 < c1 <= c2")
    m, d = 0.5 * (c1 + c2), 0.5 * (c2 - c1)
    return NonlinearPhase(lambda t: m * np.asarray(t) + d * np.sin(t),
                          lambda t: m + d * np.cos(t),
                          lambda z: 0.5 * m * np.asarray(z) ** 2 + d * (1 - np.cos(z)),
                          c1, c2, "soft-sine", (c1, c2))


@dataclass(eq=False)
class FineProblem:
    domain: PerforatedDomainMesh
    coeff: CoefficientField
    phases: tuple[NonlinearPhase, NonlinearPhase]
    f: Callable | float | None = None
    g: tuple = (None, None)

    def __post_init__(self):
        if len(self.phases) != 2 or len(self.g) != 2:
            raise ValueError("exactly two phases are supported")
        if len(self.domain.mesh.boundary_edges.get(DIRICHLET_TAG, ())) == 0:
            raise ValueError("perforated mesh has no outer Dirichlet boundary")

    @property
    def mesh(self) -> TriMesh:
        return self.domain.mesh

    @property
    def epsilon(self) -> float:
        return self.domain.epsilon

    def load(self) -> np.ndarray:
        """int f phi + eps sum_m int g_m phi (g by its P1 interpolant on the hole edges)."""
        b = assemble_load(self.mesh, self.f)
        for m in (1, 2):
            b = b + self.epsilon * assemble_boundary_linear(self.mesh, hole_tag(m), self.g[m - 1],
                                                            interpolate=True)
        return b


@dataclass(eq=False)
class FineSolution:
    u: FemField
    trace: list[float]
    iterations: int
    cg_iterations: list[int] = field(default_factory=list)
    energy: float = float("nan")

    @property
    def contraction_ratios(self) -> list[float]:
        """|r_{k+1}| / |r_k|^2 on normalized residuals above the roundoff floor."""
        r = np.asarray(self.trace) / self.trace[0] if self.trace[0] > 0 else np.asarray(self.trace)
        return [float(r[k + 1] / r[k] ** 2) for k in range(len(r) - 1) if r[k + 1] > 1e-13]


def newton(system: Callable, dofmap: DofMap, u0: np.ndarray, tol: float = NEWTON_TOL,
           max_iter: int = MAX_NEWTON, cg_tol: float = CG_TOL, ref: float | None = None):
    """Undamped Newton on the free dofs; at least one step is always taken.

    `system(u)` returns the full residual and Jacobian.  Stops when
    |F(u)| <= tol * ref, where ref defaults to |F(0)|.
    """
    P = dofmap.prolongation()
    u = dofmap.expand(dofmap.restrict(u0)) if u0 is not None else dofmap.lift()

    def reduced(v):
        F, J = system(v)
        return P.T @ F, J

    if ref is None:
        ref = float(np.linalg.norm(reduced(dofmap.lift())[0]))
    F, J = reduced(u)
    trace = [float(np.linalg.norm(F))]
    if ref == 0.0:
        ref = trace[0]
    cg_its = []
    for k in range(max_iter):
        A = (P.T @ J @ P).tocsr()
        if np.any(A.diagonal() <= 0):
            raise NonSPDError("Newton matrix has a nonpositive diagonal")
        try:
            step = solve_cg(A, -F, cg_tol)
        except ConvergenceError as err:
            raise ConvergenceError(f"Newton step {k + 1}: {err}", trace[-1] / max(ref, 1e-300), k) from None
        cg_its.append(step.iterations)
        u = u + P @ step.x
        F, J = reduced(u)
        trace.append(float(np.linalg.norm(F)))
        if not math.isfinite(trace[-1]):
            raise ConvergenceError("Newton diverged (non-finite residual)", math.inf, k + 1)
        if trace[-1] <= tol * ref:
            return u, trace, k + 1, cg_its
    raise ConvergenceError(f"Newton did not converge in {max_iter} steps; trace {trace}",
                           trace[-1] / max(ref, 1e-300), max_iter)


def _fine_system(problem: FineProblem):
    mesh, eps = problem.mesh, problem.epsilon
    K = assemble_stiffness(mesh, problem.coeff, eps)
    b = problem.load()

    def system(u):
        F = K @ u - b
        J = K
        for m, ph in zip((1, 2), problem.phases):
            r, jb = assemble_boundary_nonlinear(mesh, hole_tag(m), u, ph.kappa, ph.kappa_prime)
            if jb.nnz and jb.diagonal().min() < 0:
                raise NonSPDError(f"phase {m}: kappa' < 0 encountered")
            F = F + eps * r
            J = J + eps * jb
        return F, J.tocsr()

    return system, K, b


def solve_fine(problem: FineProblem, newton_tol: float = NEWTON_TOL, max_newton: int = MAX_NEWTON,
               u0: np.ndarray | None = None, cg_tol: float = CG_TOL) -> FineSolution:
    dofmap = DofMap.dirichlet(problem.mesh)
    system, _, _ = _fine_system(problem)
    u, trace, its, cg_its = newton(system, dofmap, u0, newton_tol, max_newton, cg_tol)
    sol = FineSolution(FemField(problem.mesh, u), trace, its, cg_its)
    sol.energy = energy_integral_fine(sol, problem)
    return sol


def solve_fine_picard(problem: FineProblem, relax: float = 0.8, tol: float = 1e-13,
                      max_iter: int = 500) -> np.ndarray:
    """Damped fixed-point iteration with the constant linearization c = (c1+c2)/2.

    Slow but independent of the Jacobian; used as a test oracle for Newton.
    """
    mesh, eps = problem.mesh, problem.epsilon
    dofmap = DofMap.dirichlet(mesh)
    P = dofmap.prolongation()
    K = assemble_stiffness(mesh, problem.coeff, eps)
    b = problem.load()
    A = K
    cbar = []
    for m, ph in zip((1, 2), problem.phases):
        c = 0.5 * (ph.c1 + ph.c2)
        cbar.append(c)
        _, Mb = assemble_boundary_nonlinear(mesh, hole_tag(m), np.zeros(mesh.n_vertices),
                                            lambda t: t, np.ones_like)
        A = A + eps * c * Mb
    A = (P.T @ A @ P).tocsr()
    u = np.zeros(mesh.n_vertices)
    for _ in range(max_iter):
        rhs = b.copy()
        for m, ph, c in zip((1, 2), problem.phases, cbar):
            r, _ = assemble_boundary_nonlinear(mesh, hole_tag(m), u, lambda t, ph=ph, c=c: ph.kappa(t) - c * t,
                                               np.zeros_like)
            rhs -= eps * r
        new = P @ solve_cg(A, P.T @ rhs, 1e-14).x
        new = (1 - relax) * u + relax * new
        if np.max(np.abs(new - u)) <= tol * max(1.0, np.max(np.abs(new))):
            return new
        u = new
    raise ConvergenceError("Picard iteration did not converge", float(np.max(np.abs(new - u))), max_iter)


def energy_integral_fine(solution: FineSolution | np.ndarray, problem: FineProblem) -> float:
    """int a grad u . grad u + eps sum_m int_{Xi_m} kappa_m(u) u ds."""
    u = solution.u.values if isinstance(solution, FineSolution) else np.asarray(solution)
    mesh, eps = problem.mesh, problem.epsilon
    K = assemble_stiffness(mesh, problem.coeff, eps)
    e = float(u @ (K @ u))
    for m, ph in zip((1, 2), problem.phases):
        e += eps * boundary_integral(mesh, hole_tag(m), lambda t, ph=ph: ph.kappa(t) * t, u)
    return e


def load_functional(u: np.ndarray, problem: FineProblem) -> float:
    """int f u + eps sum_m int g_m u ds."""
    return float(problem.load() @ u)


def functional_value(u: np.ndarray | FemField, problem: FineProblem) -> float:
    """I[u] = 1/2 int a grad u.grad u + eps sum_m (int K_m(u) - int g_m u) - int f u."""
    u = u.values if isinstance(u, FemField) else np.asarray(u)
    mesh, eps = problem.mesh, problem.epsilon
    K = assemble_stiffness(mesh, problem.coeff, eps)
    val = 0.5 * float(u @ (K @ u)) - float(assemble_load(mesh, problem.f) @ u)
    for m, ph in zip((1, 2), problem.phases):
        tag = hole_tag(m)
        val += eps * boundary_integral(mesh, tag, ph.primitive, u)
        val -= eps * float(assemble_boundary_linear(mesh, tag, problem.g[m - 1], interpolate=True) @ u)
    return val


def uniform_bound_check(solutions, problems=None, factor: float = 1.5) -> dict:
    """H1 norms over a sweep; passes when max <= factor * min (all-zero passes trivially)."""
    norms = [norm_h1(s.u.values, s.u.mesh) for s in solutions]
    hi, lo = max(norms), min(norms)
    report = {"h1_norms": norms, "max": hi, "min": lo,
              "ratio": hi / lo if lo > 0 else (1.0 if hi == 0 else math.inf)}
    report["ok"] = bool(hi <= factor * lo) if lo > 0 else hi == 0
    if problems is not None:
        traces = []
        for p in problems:
            tot = 0.0
            for m in (1, 2):
                gm = p.g[m - 1]
                if gm is None:
                    continue
                tag = hole_tag(m)
                vals = gm(p.mesh.vertices) if callable(gm) else np.full(p.mesh.n_vertices, float(gm))
                tot += math.sqrt(p.epsilon * boundary_integral(p.mesh, tag, np.square, vals))
            traces.append(tot)
        report["scaled_trace_norms"] = traces
    return report


def block_averages(mesh: TriMesh, u: np.ndarray, n_blocks: int, total_area: float = 1.0) -> np.ndarray:
    """Averages of the zero extension of u over an n_blocks x n_blocks partition of the unit square.

    Quadrature points are assigned to the block containing them, which is
    exact whenever the mesh is aligned with the block boundaries.
    """
    x = quadrature_points(mesh)
    uq = u[mesh.triangles] @ TRI_QUAD_BARY.T
    w = mesh.areas[:, None] * TRI_QUAD_W[None, :]
    idx = np.clip(np.floor(x * n_blocks).astype(int), 0, n_blocks - 1)
    flat = idx[..., 1] * n_blocks + idx[..., 0]
    sums = np.bincount(flat.ravel(), weights=(w * uq).ravel(), minlength=n_blocks ** 2)
    return sums.reshape(n_blocks, n_blocks) / (total_area / n_blocks ** 2)


def cell_averages(u: np.ndarray | FemField, domain: PerforatedDomainMesh, block: int = 1) -> np.ndarray:
    """Averages of the zero extension of u over lattice cells (block=1) or block x block groups.

    Returned as an (N/block, N/block) array indexed [row j, column i].
    """
    u = u.values if isinstance(u, FemField) else np.asarray(u)
    N = domain.N
    if N % block:
        raise ValueError("block must divide N")
    mesh = domain.mesh
    tri_int = np.einsum("t,ta->t", mesh.areas / 3, u[mesh.triangles])
    cell = domain.cell_of_triangle
    i, j = cell % N // block, cell // N // block
    M = N // block
    sums = np.bincount(j * M + i, weights=tri_int, minlength=M * M)
    return sums.reshape(M, M) / (block * domain.epsilon) ** 2
