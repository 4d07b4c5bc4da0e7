import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

import shared  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")

def pytest_terminal_summary(terminalreporter):
    if shared.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(shared.ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_cell():
    """Cell solution of the sweep geometry (one hole per phase) at h = 1/16."""
    return shared.default_cell()


@pytest.fixture(scope="session")
def one_hole_cell():
    from perfhom.cell import solve_cell
    from perfhom.geometry import HoleSpec, UnitCellGeometry, mesh_unit_cell
    from perfhom.library import identity_coefficient

    mesh = mesh_unit_cell(UnitCellGeometry((HoleSpec((0.5, 0.5), 0.25, 1),)), 1 / 16)
    return solve_cell(mesh, identity_coefficient())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def default_sweep():
    """The default eps sweep (N = 2, 4, 8, 16), computed once per session."""
    return shared.default_sweep()[0]
