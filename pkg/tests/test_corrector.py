import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from perfhom.cell import solve_cell
from perfhom.corrector import (ConvergenceReport, build_corrector, cutoff, energy_gap, error_h1, error_l2,
                               observed_rate, weak_convergence_gap, weak_gap_from_fields)
from perfhom.fem import FemField
from perfhom.fine_solver import FineProblem, soft_sine_phase, solve_fine
from perfhom.geometry import DIRICHLET_TAG, HoleSpec, UnitCellGeometry, mesh_unit_cell, structured_square_mesh, tile_mesh
from perfhom.hom_solver import HomProblem, HomSolution, hom_mesh, recover_gradient, solve_homogenized
from perfhom.library import data_field, identity_coefficient, layered_coefficient

# final 4x4 block-average gap of the default sweep at eps = 1/16 (first validated run)
WEAK_GAP_FINAL = 0.000647974347082244


def _hom_field(n, fn):
    m = hom_mesh(n)
    v = fn(m.vertices)
    return HomSolution(FemField(m, v), recover_gradient(v, m), n, [0.0], 0)


def test_observed_rate_exact_laws():
    eps = [1 / 2, 1 / 4, 1 / 8, 1 / 16]
    fit = observed_rate([(e, math.sqrt(e)) for e in eps])
    assert fit.rate == pytest.approx(0.5, abs=1e-12) and fit.residual < 1e-12
    fit = observed_rate([(e, 3 * e) for e in eps])
    assert fit.rate == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3), abs=1e-12)
    with pytest.raises(ValueError):
        observed_rate([(0.5, 1.0), (0.25, 0.0), (0.125, 0.1)])
    with pytest.raises(ValueError):
        observed_rate([(0.5, 1.0), (0.25, 0.5)])


def test_rate_guard_drops_preasymptotic_point():
    eps = [1 / 2, 1 / 4, 1 / 8, 1 / 16]
    pts = [(e, (5.0 if e == 0.5 else 1.0) * e) for e in eps]
    fit = observed_rate(pts, guard=True)
    assert fit.excluded == [0.5] and fit.rate == pytest.approx(1.0)
    assert observed_rate(pts, guard=False).excluded == []
    clean = observed_rate([(e, e * (1 + 0.01 * (-1) ** k)) for k, e in enumerate(eps)], guard=True)
    assert clean.excluded == []


@given(rate=st.floats(0.1, 3.0), c=st.floats(1e-3, 1e3))
def test_observed_rate_recovers_power_laws(rate, c):
    fit = observed_rate([(2.0 ** -k, c * 2.0 ** (-k * rate)) for k in range(1, 6)])
    assert fit.rate == pytest.approx(rate, abs=1e-9)
    assert fit.ci[0] <= fit.rate <= fit.ci[1]


def test_cutoff_properties():
    eps = 1 / 8
    pts = np.random.default_rng(0).random((5000, 2))
    phi = cutoff(pts, eps)
    d = np.minimum(pts, 1 - pts).min(axis=1)
    assert np.all((phi >= 0) & (phi <= 1))
    assert np.all(phi[d <= eps] == 1) and np.all(phi[d >= 2 * eps] == 0)
    m = structured_square_mesh(64)
    g = np.linalg.norm(np.einsum("ta,tad->td", cutoff(m.vertices, eps)[m.triangles], m.gradients), axis=1)
    # the ramp itself has slope 1/eps; its P1 interpolant can reach sqrt(2)/eps in corner elements
    assert g.max() <= math.sqrt(2) / eps + 1e-9


def test_trivial_corrector_cases():
    cell = solve_cell(mesh_unit_cell(UnitCellGeometry(()), 1 / 8), identity_coefficient())
    dom = tile_mesh(cell.mesh, 4)
    v0 = _hom_field(32, lambda x: np.sin(3 * x[:, 0]) * x[:, 1])
    corr = build_corrector(v0, cell, dom)
    assert np.abs(corr.term).max() <= 1e-12  # T = 0
    cell2 = solve_cell(mesh_unit_cell(UnitCellGeometry((HoleSpec((0.5, 0.5), 0.25, 1),)), 1 / 8),
                       layered_coefficient())
    const = build_corrector(_hom_field(16, lambda x: np.full(len(x), 2.5)), cell2, tile_mesh(cell2.mesh, 2))
    assert np.allclose(const.u_bar.values, 2.5, atol=1e-13)


def test_layered_corrector_magnitude():
    cell = solve_cell(mesh_unit_cell(UnitCellGeometry(()), 1 / 16), layered_coefficient())
    tmax = np.abs(cell.T[0].values).max()
    for N in (2, 4, 8):
        dom = tile_mesh(cell.mesh, N)
        n = 16 * N
        corr = build_corrector(_hom_field(n, lambda x: x[:, 0] * (1 - x[:, 0])), cell, dom)
        diff = np.abs(corr.u_bar.values - corr.v0).max()
        assert diff <= (1 / N) * tmax * 1.0 + 1e-12
        assert diff >= 0.5 * (1 / N) * tmax * 1.0 - 1 / n  # attained near x1 = 0 or 1


def test_cutoff_variant_vanishes_on_boundary(default_cell):
    cell, _ = default_cell
    dom = tile_mesh(cell.mesh, 4)
    v0 = _hom_field(64, lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]) + 0.3)
    corr = build_corrector(v0, cell, dom, with_cutoff=True)
    outer = np.unique(dom.mesh.edges(DIRICHLET_TAG))
    w = corr.with_cutoff.values
    assert np.allclose(w[outer], corr.v0[outer], atol=0)
    assert np.abs(corr.term[outer]).max() > 0


def test_geometry_mismatch_rejected(default_cell, one_hole_cell):
    cell, _ = default_cell
    dom = tile_mesh(one_hole_cell.mesh, 2)
    with pytest.raises(ValueError):
        build_corrector(_hom_field(8, lambda x: x[:, 0]), cell, dom)


def test_error_of_scaled_bump():
    m = structured_square_mesh(128)
    x, y = m.vertices.T
    bump = x * (1 - x) * y * (1 - y)
    eps = 0.125
    u = FemField(m, np.sin(x + y))
    ub = FemField(m, u.values - eps * bump)
    exact = eps * math.sqrt(1 / 900 + 1 / 45)
    assert error_h1(u, ub) == pytest.approx(exact, rel=1e-3)
    assert error_l2(u, ub) == pytest.approx(eps / 30, rel=1e-3)
    assert error_h1(u, u) == 0.0
    with pytest.raises(ValueError):
        error_h1(u, FemField(structured_square_mesh(4), np.zeros(25)))


def test_weak_gap_definition_cases():
    m = structured_square_mesh(8)
    one = FemField(m, np.ones(m.n_vertices))
    v0 = _hom_field(8, lambda x: np.ones(len(x)))
    assert weak_gap_from_fields(one, v0, 1.0) == 0.0
    assert weak_convergence_gap(np.full((4, 4), 0.8), np.ones((4, 4)), 0.8) == pytest.approx(0.0, abs=1e-15)
    assert energy_gap(2.0, 1.5) == 0.5 and energy_gap(1.0, 1.0) == 0.0


def test_zero_data_gives_zero_errors():
    cell = solve_cell(mesh_unit_cell(UnitCellGeometry((HoleSpec((0.5, 0.5), 0.25, 1),)), 1 / 8),
                      identity_coefficient())
    v0 = solve_homogenized(HomProblem(np.eye(2) * 0.7, (cell.area_Q0, *cell.perimeters),
                                      (soft_sine_phase(), None)), 1 / 16)
    dom = tile_mesh(cell.mesh, 2)
    sol = solve_fine(FineProblem(dom, identity_coefficient(), (soft_sine_phase(), soft_sine_phase())))
    corr = build_corrector(v0, cell, dom)
    assert error_h1(sol.u, corr.u_bar) == 0.0
    assert energy_gap(sol.energy, v0.energy) == 0.0
    assert weak_gap_from_fields(sol.u, v0, cell.area_Q0) == 0.0


def test_no_hole_case_separates_fem_error():
    """Without holes and with a = I the fine and limit problems coincide; the gap is discretization only."""
    f = data_field("sinsin", 1.0)
    gaps = []
    for ch in (1 / 4, 1 / 8, 1 / 16):
        cell = solve_cell(mesh_unit_cell(UnitCellGeometry(()), ch), identity_coefficient())
        v0 = solve_homogenized(HomProblem(np.eye(2), (1.0, 0.0, 0.0), (None, None), f), ch / 8)
        per_eps = []
        for N in (2, 4):
            dom = tile_mesh(cell.mesh, N)
            sol = solve_fine(FineProblem(dom, identity_coefficient(), (soft_sine_phase(), soft_sine_phase()), f))
            per_eps.append(error_h1(sol.u, build_corrector(v0, cell, dom).u_bar))
        gaps.append(per_eps)
    gaps = np.array(gaps)
    rates = np.log2(gaps[:-1] / gaps[1:])
    assert np.all(rates > 0.9), rates  # O(h), not tied to eps
    assert np.all(gaps[:, 1] < gaps[:, 0])  # finer h at N = 4 for the same cell mesh


def test_report_csv_and_summary():
    rep = ConvergenceReport()
    for k, e in enumerate([1 / 4, 1 / 2, 1 / 8]):
        rep.add({"epsilon": e, "h": e / 8, "err_h1": e ** 0.5, "err_l2": e, "energy_fine": 1.0, "energy_hom": 1.0,
                 "energy_gap": 0.0, "weak_gap": e, "newton_iters": 2, "seconds": 1.5, "extra": k})
    assert rep.column("epsilon") == [0.5, 0.25, 0.125]
    assert rep.fit("energy_gap") is None
    fit = rep.fit("err_h1", (0.4, 0.6))
    assert fit.rate == pytest.approx(0.5) and rep.windows_ok()
    rep.fit("weak_gap", (0.0, 0.5))
    assert not rep.windows_ok()
    rep.fit("weak_gap", (0.0, 0.5), gate=False)
    assert rep.windows_ok()
    csv_text = rep.to_csv()
    lines = csv_text.split("\n")
    assert lines[0] == "epsilon,h,err_h1,err_l2,energy_fine,energy_hom,energy_gap,weak_gap,newton_iters,seconds"
    assert lines[1].endswith(",2,") and "\r" not in csv_text
    assert rep.to_csv(timings=True).split("\n")[1].endswith(",2,1.5")
    s = rep.summary()
    assert "rate.energy_gap = undefined" in s and "rate.err_h1 = 0.5" in s
    assert "eps[0.5].extra = 1" in s


def test_default_sweep_weak_gap(default_sweep):
    gaps = default_sweep.column("weak_gap")
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] == pytest.approx(WEAK_GAP_FINAL, rel=1e-9)
    assert gaps[-1] <= 0.05 * default_sweep.meta["v0_max_abs"]


def test_default_sweep_h1_errors_decrease(default_sweep):
    errs = default_sweep.column("err_h1")
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert default_sweep.rates["err_h1"]["ok"]


def test_recovered_and_element_gradient_variants_close(default_sweep):
    for r in default_sweep.records:
        assert abs(r["err_h1_element_gradient"] - r["err_h1"]) <= 0.1 * r["err_h1"]
        assert r["err_h1"] < r["err_h1_no_corrector"]


def test_cutoff_variant_rate_window(default_sweep):
    """The Dirichlet-compatible variant is expected to obey the same H1 rate window."""
    info = default_sweep.rates["err_h1_cutoff"]
    errs = default_sweep.column("err_h1_cutoff")
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert 0.4 <= info["fit"].rate <= 1.1, f"cutoff-variant rate {info['fit'].rate:.4f}"
