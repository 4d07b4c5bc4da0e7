"""Orchestration shared by the command line and the scripts: cached cell solves,
single fine/homogenized solves, eps sweeps and the bundled identity checks."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cell import (CellSolution, HomogenizedTensor, homogenized_tensor, compatibility_defect, solve_cell,
                   trace_identity_residual, verify_tensor, voigt_bound_gaps, zero_mean_defects)
from .config import RunConfig
from .corrector import ConvergenceReport, build_corrector, error_h1, error_l2, weak_gap_from_fields
from .fem import FemField, energy_norm_sq, norm_h1
from .fine_solver import FineProblem, FineSolution, solve_fine, uniform_bound_check
from .geometry import HOLE_TAGS, TriMesh, mesh_measures, mesh_unit_cell, tile_mesh
from .hom_solver import HomProblem, HomSolution, solve_homogenized

log = logging.getLogger(__name__)


@dataclass(eq=False)
class CellBundle:
    solution: CellSolution
    tensor: HomogenizedTensor
    cache_hit: bool
    key: str


def _save_cell(path: Path, cell: CellSolution, tensor: HomogenizedTensor) -> None:
    m = cell.mesh
    edges = {f"edges__{t}": e for t, e in m.boundary_edges.items()}
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, vertices=m.vertices, triangles=m.triangles,
             T=np.stack([t.values for t in cell.T]), psi=np.stack([p.values for p in cell.psi]),
             matrix=tensor.matrix, alternative=tensor.alternative, **edges)
    tmp.replace(path)


def _load_cell(path: Path, coeff) -> tuple[CellSolution, HomogenizedTensor]:
    with np.load(path) as z:
        edges = {k[len("edges__"):]: z[k] for k in z.files if k.startswith("edges__")}
        mesh = TriMesh(z["vertices"], z["triangles"], edges)
        T = tuple(FemField(mesh, v) for v in z["T"])
        psi = tuple(FemField(mesh, v) for v in z["psi"])
        matrix, alternative = z["matrix"], z["alternative"]
    area, s1, s2, q1, q2 = mesh_measures(mesh)
    cell = CellSolution(mesh, coeff, T, psi, area, (s1, s2), (q1, q2), {"cached": True})
    tensor = HomogenizedTensor(matrix, alternative, _provenance(mesh, area))
    return cell, tensor


def _provenance(mesh: TriMesh, area: float) -> dict:
    return {"formula": "flux form int(a_ij + a_ik d_k T_j); energy form cross-checked",
            "mesh_size_h": mesh.mesh_size_h, "n_vertices": mesh.n_vertices, "area_Q0": area}


def cell_solution(cfg: RunConfig, cache_dir: str | Path | None = None) -> CellBundle:
    """Solve the cell problems, or load them from the content-addressed cache."""
    key = cfg.cache_key().digest
    coeff = cfg.build_coefficient()
    path = Path(cache_dir) / f"cell-{key}.npz" if cache_dir else None
    if path is not None and path.exists():
        cell, tensor = _load_cell(path, coeff)
        return CellBundle(cell, tensor, True, key)
    mesh = mesh_unit_cell(cfg.geometry, cfg.cell_h)
    cell = solve_cell(mesh, coeff)
    tensor = homogenized_tensor(cell)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        _save_cell(path, cell, tensor)
    return CellBundle(cell, tensor, False, key)


def fine_problem(cfg: RunConfig, cell: CellSolution, N: int) -> FineProblem:
    f, g = cfg.build_data()
    return FineProblem(tile_mesh(cell.mesh, N), cell.coeff, cfg.build_phases(), f, g)


def run_fine(cfg: RunConfig, cell: CellSolution, N: int) -> tuple[FineProblem, FineSolution]:
    prob = fine_problem(cfg, cell, N)
    return prob, solve_fine(prob, cfg.newton_tol, cfg.max_newton, cg_tol=cfg.cg_tol)


def hom_problem(cfg: RunConfig, cell: CellSolution, tensor: HomogenizedTensor) -> HomProblem:
    f, g = cfg.build_data()
    return HomProblem(tensor, (cell.area_Q0, *cell.perimeters), cfg.build_phases(), f, g)


def run_hom(cfg: RunConfig, cell: CellSolution, tensor: HomogenizedTensor) -> tuple[HomProblem, HomSolution]:
    prob = hom_problem(cfg, cell, tensor)
    return prob, solve_homogenized(prob, 1.0 / cfg.hom_n(), cfg.newton_tol, cfg.max_newton,
                                   cg_tol=cfg.cg_tol)


def _sweep_member(cfg, cell, v0, N, timings):
    t0 = time.perf_counter()
    prob, sol = run_fine(cfg, cell, N)
    d = prob.domain
    corr = build_corrector(v0, cell, d, with_cutoff=True)
    corr_el = build_corrector(v0, cell, d, gradient="element")
    v0_here = FemField(d.mesh, corr.v0)
    rec = {
        "epsilon": d.epsilon,
        "h": d.mesh.mesh_size_h,
        "err_h1": error_h1(sol.u, corr.u_bar),
        "err_l2": error_l2(sol.u, v0_here),
        "energy_fine": sol.energy,
        "energy_hom": v0.energy,
        "energy_gap": abs(sol.energy - v0.energy),
        "weak_gap": weak_gap_from_fields(sol.u, v0, cell.area_Q0, cfg.weak_blocks),
        "newton_iters": sol.iterations,
        "seconds": None,
        # extra diagnostics (summary only)
        "err_h1_cutoff": error_h1(sol.u, corr.with_cutoff),
        "err_h1_element_gradient": error_h1(sol.u, corr_el.u_bar),
        "err_h1_no_corrector": error_h1(sol.u, v0_here),
        "h1_norm": norm_h1(sol.u.values, d.mesh),
        "newton_trace": sol.trace,
        "n_vertices": d.mesh.n_vertices,
    }
    if timings:
        rec["seconds"] = round(time.perf_counter() - t0, 3)
    return rec, sol


class SolverFailure(RuntimeError):
    pass


def run_sweep(cfg: RunConfig, cache_dir=None, threads: int = 1, timings: bool = False) -> ConvergenceReport:
    """Homogenized solve once, then one fine solve per N; records in decreasing eps."""
    bundle = cell_solution(cfg, cache_dir)
    cell, tensor = bundle.solution, bundle.tensor
    try:
        hprob, v0 = run_hom(cfg, cell, tensor)
    except Exception as err:
        raise SolverFailure(f"homogenized solve failed: {err}") from err

    def member(N):
        try:
            return _sweep_member(cfg, cell, v0, N, timings)
        except Exception as err:
            raise SolverFailure(f"fine solve failed at eps = 1/{N}: {err}") from err

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(member, cfg.sweep))
    else:
        results = [member(N) for N in cfg.sweep]

    report = ConvergenceReport()
    for rec, _ in results:
        report.add(rec)
    ubc = uniform_bound_check([sol for _, sol in results])
    report.meta.update({
        "tensor": tensor.matrix.ravel().tolist(),
        "area_Q0": cell.area_Q0,
        "perimeters": list(cell.perimeters),
        "cell_h": cfg.cell_h,
        "cell_mesh_size_h": cell.mesh.mesh_size_h,
        "hom_h": 1.0 / cfg.hom_n(),
        "hom_newton_iters": v0.iterations,
        "energy_hom": v0.energy,
        "v0_max_abs": float(np.max(np.abs(v0.v.values))),
        "uniform_bound_ratio": ubc["ratio"],
        "uniform_bound_ok": ubc["ok"],
        "cache_hit": bundle.cache_hit,
        "cutoff": "piecewise-linear ramp of the distance to the boundary between eps and 2 eps",
    })
    if len(report.records) >= 3:
        report.fit("err_h1", cfg.h1_window)
        report.fit("energy_gap", cfg.energy_window)
        report.fit("err_h1_cutoff", cfg.h1_window, gate=False)
        report.fit("weak_gap")
    return report


# ---------------------------------------------------------------------------
# verification bundle


@dataclass
class Check:
    name: str
    status: str  # pass | fail | skip | info
    detail: str = ""

    def line(self) -> str:
        return f"{self.status.upper():4} {self.name}" + (f": {self.detail}" if self.detail else "")


def _x1x2(x):
    return x[:, 0] * x[:, 1]


def _bubble_sin(x):
    return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])


def run_verify(cfg: RunConfig, cache_dir=None, seed: int = 0, q_override: dict | None = None,
               eps_n: int = 4) -> list[Check]:
    """Bundle of checkable identities; `q_override` injects wrong q_m values (fault injection)."""
    checks: list[Check] = []
    coeff = cfg.build_coefficient()
    bad = coeff.check()
    checks.append(Check("coefficient symmetry/ellipticity/periodicity", "fail" if bad else "pass", "; ".join(bad)))
    for m, ph in zip((1, 2), cfg.build_phases()):
        bad = ph.check()
        checks.append(Check(f"phase {m} bounds and primitive", "fail" if bad else "pass", "; ".join(bad)))

    bundle = cell_solution(cfg, cache_dir)
    cell, tensor = bundle.solution, bundle.tensor
    rep = verify_tensor(tensor, coeff.kappa2, cell.area_Q0)
    ok = rep["forms_max_rel_diff"] <= 1e-8 and rep["symmetry_defect"] <= 1e-10 * np.abs(tensor.matrix).max() \
        and rep["positive_definite"] and rep["within_upper_bound"]
    checks.append(Check("tensor structure (two forms, symmetry, eigenvalues)", "pass" if ok else "fail",
                        f"rel diff {rep['forms_max_rel_diff']:.3e}, symmetry defect {rep['symmetry_defect']:.3e}, "
                        f"eigenvalues {rep['eigenvalues'][0]:.6g} {rep['eigenvalues'][1]:.6g}"))
    vg = voigt_bound_gaps(cell, tensor)
    checks.append(Check("Voigt-type upper bound (8 directions)", "pass" if vg.min() >= -1e-12 else "fail",
                        f"min gap {vg.min():.3e}"))
    zm = max(zero_mean_defects(cell))
    checks.append(Check("zero integral of cell fields", "pass" if zm <= 1e-9 else "fail", f"max {zm:.3e}"))

    q_override = q_override or {}
    for m in (1, 2):
        if cell.perimeters[m - 1] == 0:
            checks.append(Check(f"compatibility of auxiliary problem {m}", "skip", "phase has no holes"))
            continue
        dfct = compatibility_defect(cell.mesh, m, q_override.get(m))
        checks.append(Check(f"compatibility of auxiliary problem {m}", "pass" if dfct <= 1e-12 else "fail",
                            f"|-q|Q0| + |S|| = {dfct:.3e}"))

    domain = tile_mesh(cell.mesh, eps_n)
    h = domain.mesh.mesh_size_h
    for m in (1, 2):
        name = f"trace identity, phase {m}"
        if cell.perimeters[m - 1] == 0:
            checks.append(Check(name, "skip", "empty hole boundary"))
            continue
        r0 = trace_identity_residual(cell, domain, m, _bubble_sin)
        r1 = trace_identity_residual(cell, domain, m, _x1x2)
        checks.append(Check(name + " (test function vanishing on the outer boundary)",
                            "pass" if r0 <= 1e-12 else "fail", f"residual {r0:.3e}"))
        checks.append(Check(name + " (x1 x2, not zero on the outer boundary)", "info",
                            f"residual {r1:.3e}, residual/h {r1 / h:.4g} at h {h:.4g}"))

    rng = np.random.default_rng(seed)
    ratios = []
    for N in sorted({n for n in cfg.sweep if n <= 8} | {eps_n}):
        d = tile_mesh(cell.mesh, N)
        x = d.mesh.vertices
        for _ in range(3):
            k = rng.integers(1, 4, size=2)
            ph = rng.uniform(0, 2 * np.pi, size=2)
            u = x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1]) * \
                (1 + 0.5 * np.sin(k[0] * np.pi * x[:, 0] + ph[0]) * np.cos(k[1] * np.pi * x[:, 1] + ph[1]))
            ratios.append(energy_norm_sq(u, d.mesh, HOLE_TAGS, d.epsilon) / norm_h1(u, d.mesh) ** 2)
    checks.append(Check("norm equivalence |u|_eps^2 / |u|_H1^2", "info",
                        f"empirical range [{min(ratios):.4g}, {max(ratios):.4g}] over {len(ratios)} fields"))

    ns = [n for n in cfg.sweep if n <= 8]
    if len(ns) >= 2:
        sols = [run_fine(cfg, cell, n) for n in ns]
        ubc = uniform_bound_check([s for _, s in sols], [p for p, _ in sols])
        checks.append(Check("uniform H1 bound over eps", "pass" if ubc["ok"] else "fail",
                            f"norms {', '.join(f'{v:.4g}' for v in ubc['h1_norms'])}; "
                            f"scaled trace norms {', '.join(f'{v:.4g}' for v in ubc['scaled_trace_norms'])}"))
    else:
        checks.append(Check("uniform H1 bound over eps", "skip", "fewer than two sweep values with N <= 8"))
    return checks
