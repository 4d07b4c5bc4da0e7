"""Residual of the eps-scaled trace identity for test functions with and without boundary values.

Tabulates the residual over cell mesh sizes and eps for phi = x1 x2
(nonzero on the outer boundary) and phi = sin(pi x1) sin(pi x2).

    python3 scripts/trace_identity_study.py
"""

import argparse

import numpy as np

from perfhom.cell import solve_cell, trace_identity_residual
from perfhom.config import RunConfig, load_config
from perfhom.geometry import mesh_unit_cell, tile_mesh

TESTS = {
    "x1x2": lambda x: x[:, 0] * x[:, 1],
    "sinsin": lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--cells", type=int, nargs="+", default=[8, 16, 32], help="1/h of the cell meshes")
    ap.add_argument("--ns", type=int, nargs="+", default=[2, 4, 8], help="N = 1/eps")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig()
    print(f"{'1/h':>4} {'N':>3} {'m':>2} {'x1x2':>12} {'x1x2/eps':>10} {'sinsin':>10}")
    for n in args.cells:
        cell = solve_cell(mesh_unit_cell(cfg.geometry, 1 / n), cfg.build_coefficient())
        for N in args.ns:
            dom = tile_mesh(cell.mesh, N)
            for m in (1, 2):
                if cell.perimeters[m - 1] == 0:
                    continue
                r = {k: trace_identity_residual(cell, dom, m, f) for k, f in TESTS.items()}
                print(f"{n:4d} {N:3d} {m:2d} {r['x1x2']:12.5e} {r['x1x2'] * N:10.4f} {r['sinsin']:10.2e}")


if __name__ == "__main__":
    main()
