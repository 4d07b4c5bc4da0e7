"""Periodic cell problems on the perforated unit cell and the effective tensor.

Correctors T_l solve, for all periodic test functions phi,

    int_Q0 a grad T_l . grad phi = - int_Q0 a e_l . grad phi,

and the auxiliary potentials psi_m solve

    int_Q0 a grad psi_m . grad phi = - q_m int_Q0 phi + int_{S_m} phi ds,

both normalized to zero integral over Q0.  Brackets <.> are integrals over
Q0 (not averages), so the tensor of an unperforated cell with a = I is I.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import (CoefficientField, DofMap, FemField, InconsistentSystemError, assemble_boundary_linear,
                  assemble_stiffness, check_consistent, element_coefficients, element_gradients, integral,
                  lumped_weights, solve_constrained)
from .geometry import TriMesh, hole_tag, mesh_measures

CG_TOL = 1e-12


@dataclass(eq=False)
class CellSolution:
    mesh: TriMesh
    coeff: CoefficientField
    T: tuple[FemField, FemField]
    psi: tuple[FemField, FemField]
    area_Q0: float
    perimeters: tuple[float, float]
    q: tuple[float, float]
    cg_iterations: dict = field(default_factory=dict)


@dataclass
class HomogenizedTensor:
    matrix: np.ndarray
    alternative: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))

    @property
    def symmetry_defect(self) -> float:
        return float(abs(self.matrix[0, 1] - self.matrix[1, 0]))


class TensorError(RuntimeError):
    pass


def _corrector_rhs(mesh: TriMesh, abar: np.ndarray, l: int) -> tuple[np.ndarray, float]:
    # -int a e_l . grad phi_i with the element-averaged coefficient
    flux = abar[:, :, l]  # (T, 2): a e_l
    fe = -np.einsum("t,tai,ti->ta", mesh.areas, mesh.gradients, flux)
    rhs = np.bincount(mesh.triangles.ravel(), weights=fe.ravel(), minlength=mesh.n_vertices)
    return rhs, float(np.abs(fe).sum())


def solve_corrector_cells(mesh: TriMesh, coeff: CoefficientField) -> tuple[FemField, FemField]:
    T, _ = _correctors(mesh, coeff)
    return T


def _correctors(mesh, coeff):
    dofmap = DofMap.periodic_cell(mesh)
    K = assemble_stiffness(mesh, coeff)
    abar = element_coefficients(mesh, coeff)
    out, its = [], []
    for l in range(2):
        rhs, scale = _corrector_rhs(mesh, abar, l)
        u, res = solve_constrained(K, rhs, dofmap, CG_TOL, rhs_scale=scale)
        out.append(FemField(mesh, u))
        its.append(res.iterations)
    return tuple(out), its


def compatibility_defect(mesh: TriMesh, phase: int, q: float | None = None) -> float:
    """|-q_m |Q0| + |S_m|| with mesh measures; `q` overrides q_m (fault injection)."""
    area, s1, s2, q1, q2 = mesh_measures(mesh)
    s = (s1, s2)[phase - 1]
    qm = (q1, q2)[phase - 1] if q is None else q
    return abs(-qm * area + s)


def solve_auxiliary_cells(mesh: TriMesh, coeff: CoefficientField, q1: float | None = None,
                          q2: float | None = None) -> tuple[FemField, FemField]:
    """Potentials psi_1, psi_2; q_m default to the mesh-consistent ratios.

    An empty phase gives the zero field.  Inconsistent data (a q_m that does
    not match the mesh measures) raises InconsistentSystemError.
    """
    psi, _ = _auxiliary(mesh, coeff, (q1, q2))
    return psi


def _auxiliary(mesh, coeff, qs):
    area, s1, s2, mq1, mq2 = mesh_measures(mesh)
    qs = tuple(mq if q is None else q for q, mq in zip(qs, (mq1, mq2)))
    dofmap = DofMap.periodic_cell(mesh)
    K = assemble_stiffness(mesh, coeff)
    w = lumped_weights(mesh)
    out, its = [], []
    for phase, qm in zip((1, 2), qs):
        if len(mesh.boundary_edges.get(hole_tag(phase), ())) == 0:
            out.append(FemField(mesh, np.zeros(mesh.n_vertices)))
            its.append(0)
            continue
        rhs = -qm * w + assemble_boundary_linear(mesh, hole_tag(phase), 1.0)
        try:
            check_consistent(rhs, 1e-8)
        except InconsistentSystemError as err:
            raise InconsistentSystemError(f"auxiliary problem {phase}: {err}") from None
        u, res = solve_constrained(K, rhs, dofmap, CG_TOL, rhs_scale=qm * area)
        out.append(FemField(mesh, u))
        its.append(res.iterations)
    return tuple(out), its


def solve_cell(mesh: TriMesh, coeff: CoefficientField) -> CellSolution:
    T, tits = _correctors(mesh, coeff)
    psi, pits = _auxiliary(mesh, coeff, (None, None))
    area, s1, s2, q1, q2 = mesh_measures(mesh)
    return CellSolution(mesh, coeff, T, psi, area, (s1, s2), (q1, q2),
                        {"T": tits, "psi": pits})


def homogenized_tensor(cell: CellSolution, check: bool = True) -> HomogenizedTensor:
    """Effective tensor from both the flux form and the energy form.

    flux form:   a_ij = int (a_ij + a_ik d_k T_j)
    energy form: a_ij = int a_kl d_k(xi_i + T_i) d_l(xi_j + T_j)
    """
    mesh = cell.mesh
    abar = element_coefficients(mesh, cell.coeff)
    G = np.stack([element_gradients(mesh, t.values) for t in cell.T], axis=2)  # (T, k, j) = d_k T_j
    area = mesh.areas
    flux = np.einsum("t,tij->ij", area, abar) + np.einsum("t,tik,tkj->ij", area, abar, G)
    D = np.eye(2)[None] + G  # d_k (xi_j + T_j)
    energy = np.einsum("t,tkl,tki,tlj->ij", area, abar, D, D)
    tensor = HomogenizedTensor(flux, energy, {
        "formula": "flux form int(a_ij + a_ik d_k T_j); energy form cross-checked",
        "mesh_size_h": mesh.mesh_size_h,
        "n_vertices": mesh.n_vertices,
        "area_Q0": cell.area_Q0,
    })
    if check:
        scale = np.abs(flux).max()
        if tensor.symmetry_defect > 1e-10 * scale:
            raise TensorError(f"tensor not symmetric (defect {tensor.symmetry_defect:.3e}); "
                              "cell solves under-converged")
    return tensor


def verify_tensor(tensor: HomogenizedTensor, kappa2: float | None = None,
                  area_Q0: float | None = None) -> dict:
    scale = float(np.abs(tensor.matrix).max())
    eig = tensor.eigenvalues
    report = {
        "forms_max_abs_diff": float(np.abs(tensor.matrix - tensor.alternative).max()),
        "forms_max_rel_diff": float(np.abs(tensor.matrix - tensor.alternative).max() / scale),
        "symmetry_defect": tensor.symmetry_defect,
        "eigenvalues": eig.tolist(),
        "positive_definite": bool(eig.min() > 0),
    }
    if kappa2 is not None and area_Q0 is not None:
        report["upper_bound"] = kappa2 * area_Q0
        report["within_upper_bound"] = bool(eig.max() <= kappa2 * area_Q0 + 1e-10)
    return report


def voigt_bound_gaps(cell: CellSolution, tensor: HomogenizedTensor, n_dirs: int = 8) -> np.ndarray:
    """int eta.a.eta - eta.a_hat.eta over Q0 for probe directions (must be >= 0)."""
    abar = element_coefficients(cell.mesh, cell.coeff)
    mean_a = np.einsum("t,tij->ij", cell.mesh.areas, abar)
    ang = np.pi * np.arange(n_dirs) / n_dirs
    eta = np.column_stack([np.cos(ang), np.sin(ang)])
    return np.einsum("di,ij,dj->d", eta, mean_a - tensor.matrix, eta)


def zero_mean_defects(cell: CellSolution) -> list[float]:
    return [abs(integral(cell.mesh, f.values)) for f in (*cell.T, *cell.psi)]


def tiled(field: FemField, domain) -> np.ndarray:
    """Values of a cell field at the nodes of a tiled domain (exact periodic lookup)."""
    if domain.cell_mesh is not field.mesh and domain.cell_mesh.fingerprint != field.mesh.fingerprint:
        raise ValueError("cell field and perforated mesh come from different cell meshes")
    return field.values[domain.cell_vertex]


def trace_identity_residual(cell: CellSolution, domain, phase: int, phi) -> float:
    """Residual of eps int_Xi phi ds = eps int a grad_xi psi . grad_x phi dx + q int phi dx.

    `domain` is a PerforatedDomainMesh tiled from the cell mesh and `phi` a
    callable evaluated at its nodes (P1 interpolant).  For phi vanishing on
    the outer boundary the discrete identity is exact; otherwise the
    residual is a boundary-layer term of size O(h).
    """
    mesh, eps = domain.mesh, domain.epsilon
    ph = phi(mesh.vertices)
    lhs = eps * float(assemble_boundary_linear(mesh, hole_tag(phase), 1.0) @ ph)
    psi = tiled(cell.psi[phase - 1], domain)
    abar = element_coefficients(mesh, cell.coeff, eps)
    gpsi = element_gradients(mesh, psi) * eps  # grad_xi = eps grad_x
    gphi = element_gradients(mesh, ph)
    vol = eps * float(np.einsum("t,ti,tij,tj->", mesh.areas, gphi, abar, gpsi))
    rhs = vol + cell.q[phase - 1] * integral(mesh, ph)
    return abs(lhs - rhs)
