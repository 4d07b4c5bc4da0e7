import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import disk_measures, polygon_measures
from perfhom.geometry import (DIRICHLET_TAG, HoleSpec, MeshingError, TriMesh, UnitCellGeometry, measures,
                              mesh_measures, mesh_unit_cell, structured_square_mesh, tile_mesh, validate_cell)

ONE = (HoleSpec((0.5, 0.5), 0.25, 1),)
TWO = (HoleSpec((0.3, 0.3), 0.2, 1), HoleSpec((0.7, 0.7), 0.15, 2))


def test_validate_examples():
    assert validate_cell(ONE).ok
    rep = validate_cell([HoleSpec((0.3, 0.5), 0.2, 1), HoleSpec((0.7, 0.5), 0.2, 2)])
    assert not rep.ok and "tangent" in str(rep)
    rep = validate_cell([HoleSpec((0.5, 0.9), 0.15, 1)])
    assert not rep.ok and "boundary contact" in str(rep)
    assert validate_cell([]).ok


def test_overlap_reported():
    rep = validate_cell([HoleSpec((0.4, 0.5), 0.2, 1), HoleSpec((0.6, 0.5), 0.2, 2)])
    assert "overlap" in str(rep)


def test_measures_closed_form():
    area, s1, s2, q1, q2 = measures(UnitCellGeometry(ONE))
    assert area == pytest.approx(1 - math.pi / 16, abs=1e-12)
    assert s1 == pytest.approx(math.pi / 2, abs=1e-12)
    assert q1 == pytest.approx(1.954577, abs=1e-6)
    assert q2 == 0
    assert measures(UnitCellGeometry(())) == (1.0, 0.0, 0.0, 0.0, 0.0)
    holes = (HoleSpec((0.3, 0.3), 0.15, 1), HoleSpec((0.7, 0.7), 0.2, 2))
    got = measures(UnitCellGeometry(holes))
    want = disk_measures([(0.3, 0.3, 0.15, 1), (0.7, 0.7, 0.2, 2)])
    assert np.allclose(got, want, atol=1e-12)


def test_empty_cell_structured():
    m = mesh_unit_cell(UnitCellGeometry(()), 0.25)
    assert m.n_triangles == 32
    slaves, masters = m.periodic_pairs()
    assert len(slaves) == 4 + 4 + 1  # 3+3 side pairs plus corners collapsed onto the origin


def test_hole_edge_count_matches_segments():
    m = mesh_unit_cell(UnitCellGeometry(ONE), 1 / 16)
    assert len(m.edges("hole_phase_1")) == 64
    assert len(m.edges("hole_phase_2")) == 0
    assert m.mesh_size_h <= 2 / 16
    assert np.all(m.signed_areas > 0)


def test_hole_edges_on_polygon():
    cell = UnitCellGeometry(TWO)
    m = mesh_unit_cell(cell, 1 / 16)
    for k, hole in enumerate(cell.holes):
        e = m.edges(f"hole_phase_{hole.phase}")
        r = np.linalg.norm(m.vertices[e] - np.asarray(hole.center), axis=2)
        assert np.allclose(r, hole.radius, atol=1e-12)


def test_too_coarse_fails():
    with pytest.raises(MeshingError):
        mesh_unit_cell(UnitCellGeometry((HoleSpec((0.5, 0.5), 0.49, 1),)), 1 / 8)
    with pytest.raises(MeshingError):
        mesh_unit_cell(UnitCellGeometry(ONE, boundary_segments_per_hole=6), 1 / 16)


def test_conforming():
    m = mesh_unit_cell(UnitCellGeometry(TWO), 1 / 16)
    e = np.sort(m.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert counts.max() == 2
    nb = (counts == 1).sum()
    tagged = sum(len(v) for v in m.boundary_edges.values())
    assert nb == tagged


def test_periodic_matching():
    m = mesh_unit_cell(UnitCellGeometry(TWO), 1 / 16)
    for a, b, shift in (("side_left", "side_right", (1, 0)), ("side_bottom", "side_top", (0, 1))):
        pa = m.vertices[m.tag_vertices(a)] + shift
        pb = m.vertices[m.tag_vertices(b)]
        d = np.linalg.norm(pa[:, None] - pb[None], axis=2)
        assert np.all((d < 1e-12).sum(axis=1) == 1)


def test_area_converges_with_segments():
    errs = []
    for s in (16, 32, 64, 128):
        m = mesh_unit_cell(UnitCellGeometry(ONE, s), 1 / 16)
        errs.append(abs(mesh_measures(m)[0] - (1 - math.pi / 16)))
        assert mesh_measures(m)[0] == pytest.approx(polygon_measures([(0.5, 0.5, 0.25, 1)], s)[0], abs=1e-13)
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(np.abs(rates - 2) < 0.05)


def test_tile_identity():
    m = mesh_unit_cell(UnitCellGeometry(ONE), 1 / 16)
    d = tile_mesh(m, 1)
    assert d.mesh.n_vertices == m.n_vertices
    assert np.allclose(np.sort(d.mesh.vertices, axis=0), np.sort(m.vertices, axis=0))
    sides = np.unique(np.concatenate([m.edges(t).ravel() for t in ("side_left", "side_right", "side_bottom", "side_top")]))
    got = {tuple(p) for p in np.round(d.mesh.vertices[np.unique(d.mesh.edges(DIRICHLET_TAG))], 12)}
    assert got == {tuple(p) for p in np.round(m.vertices[sides], 12)}


def test_tile_two_counts_against_set_union():
    m = mesh_unit_cell(UnitCellGeometry(TWO), 1 / 16)
    d = tile_mesh(m, 2)
    clouds = np.concatenate([(m.vertices + (i, j)) / 2 for j in range(2) for i in range(2)])
    union = {tuple(np.round(p * 2 ** 40).astype(np.int64)) for p in clouds}
    assert d.mesh.n_vertices == len(union)
    for tag in ("hole_phase_1", "hole_phase_2"):
        assert len(d.mesh.edges(tag)) == 4 * len(m.edges(tag))
    assert d.mesh.mesh_size_h == pytest.approx(m.mesh_size_h / 2, rel=1e-12)


def test_tile_empty_is_structured():
    d = tile_mesh(mesh_unit_cell(UnitCellGeometry(()), 1 / 4), 4)
    s = structured_square_mesh(16)
    assert d.mesh.n_vertices == s.n_vertices
    assert d.mesh.mesh_size_h == pytest.approx(s.mesh_size_h)


def test_tile_rejects_unmatched():
    v = np.array([[0, 0], [1, 0], [0, 1], [1, 1], [0.5, 0.0]])
    t = np.array([[0, 4, 3], [4, 1, 3], [0, 3, 2]])
    with pytest.raises(MeshingError):
        tile_mesh(TriMesh(v, t, {}), 2)


def test_mesh_roundtrip(tmp_path):
    m = mesh_unit_cell(UnitCellGeometry(ONE), 1 / 8)
    m.write(tmp_path / "m.txt")
    header = (tmp_path / "m.txt").read_text().splitlines()[0].split()
    assert header[1::2] == ["vertices", "triangles", "tagged-edges"]
    back = TriMesh.read(tmp_path / "m.txt")
    assert np.array_equal(back.triangles, m.triangles)
    assert np.allclose(back.vertices, m.vertices, rtol=0, atol=0)
    assert back.fingerprint == m.fingerprint


@given(cx=st.floats(0.3, 0.7), cy=st.floats(0.3, 0.7), r=st.floats(0.05, 0.2))
def test_random_single_hole_meshes(cx, cy, r):
    cell = UnitCellGeometry((HoleSpec((cx, cy), r, 1),))
    if not validate_cell(cell.holes).ok:
        return
    m = mesh_unit_cell(cell, 1 / 16)
    assert np.all(m.signed_areas > 0)
    m.periodic_pairs()
    area = mesh_measures(m)[0]
    assert area == pytest.approx(polygon_measures([(cx, cy, r, 1)], 64)[0], abs=1e-12)
