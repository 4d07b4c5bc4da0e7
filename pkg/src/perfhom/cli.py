"""perfhom command line.

Exit codes: 0 success, 2 solver failure, 3 configuration error,
4 an acceptance window or verification check failed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .corrector import CSV_COLUMNS, ConvergenceReport
from .fem import ConvergenceError, InconsistentSystemError
from .fine_solver import NonSPDError
from .geometry import MeshingError
from .pipeline import SolverFailure, cell_solution, run_fine, run_hom, run_sweep, run_verify

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG, EXIT_WINDOW = 0, 2, 3, 4

log = logging.getLogger("perfhom")


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _dirs(args, cfg):
    out = Path(args.out or cfg.out)
    cache = args.cache or cfg.cache
    out.mkdir(parents=True, exist_ok=True)
    return out, (None if cache in ("", "none") else cache)


def _kv(d: dict) -> str:
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, bool):
            return str(v).lower()
        if isinstance(v, (list, tuple)):
            return ", ".join(fmt(x) for x in v)
        return str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in d.items())


def cmd_cell(args) -> int:
    cfg = _config(args)
    out, cache = _dirs(args, cfg)
    b = cell_solution(cfg, cache)
    t = b.tensor
    rep = {
        "cache_key": b.key,
        "cache_hit": b.cache_hit,
        "a_hat": t.matrix.ravel().tolist(),
        "a_hat_energy_form": t.alternative.ravel().tolist(),
        "forms_max_abs_diff": float(np.abs(t.matrix - t.alternative).max()),
        "symmetry_defect": t.symmetry_defect,
        "eigenvalues": t.eigenvalues.tolist(),
        "area_Q0": b.solution.area_Q0,
        "perimeter_S1": b.solution.perimeters[0],
        "perimeter_S2": b.solution.perimeters[1],
        "cell_mesh_size_h": b.solution.mesh.mesh_size_h,
        "cell_vertices": b.solution.mesh.n_vertices,
    }
    text = _kv(rep)
    (out / "tensor.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _parse_eps(s: str) -> int:
    try:
        val = Fraction(s)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"expected eps = 1/N, got {s!r}") from None
    if val <= 0 or val.numerator != 1:
        raise argparse.ArgumentTypeError(f"eps must be 1/N for a positive integer N, got {s!r}")
    return val.denominator


def cmd_fine(args) -> int:
    cfg = _config(args)
    out, cache = _dirs(args, cfg)
    b = cell_solution(cfg, cache)
    N = args.eps
    prob, sol = run_fine(cfg, b.solution, N)
    stem = out / f"fine_N{N}"
    sol.u.write(stem.with_suffix(".field.txt"))
    prob.mesh.write(stem.with_suffix(".mesh.txt"))
    meta = {"epsilon": prob.epsilon, "newton_iters": sol.iterations, "newton_trace": sol.trace,
            "energy_fine": sol.energy, "n_vertices": prob.mesh.n_vertices}
    stem.with_suffix(".meta.txt").write_text(_kv(meta))
    sys.stdout.write(_kv(meta))
    return EXIT_OK


def cmd_hom(args) -> int:
    cfg = _config(args)
    out, cache = _dirs(args, cfg)
    b = cell_solution(cfg, cache)
    prob, sol = run_hom(cfg, b.solution, b.tensor)
    sol.v.write(out / "hom.field.txt")
    meta = {"h": sol.h, "newton_iters": sol.iterations, "newton_trace": sol.trace, "energy_hom": sol.energy,
            "v0_max_abs": float(np.abs(sol.v.values).max())}
    (out / "hom.meta.txt").write_text(_kv(meta))
    sys.stdout.write(_kv(meta))
    return EXIT_OK


def _emit(report: ConvergenceReport, out: Path, timings: bool) -> None:
    (out / "sweep.csv").write_text(report.to_csv(timings))
    (out / "sweep_summary.txt").write_text(report.summary())
    report.plot_svg(out / "sweep.svg")


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out, cache = _dirs(args, cfg)
    report = run_sweep(cfg, cache, threads=args.threads, timings=args.timings)
    _emit(report, out, args.timings)
    sys.stdout.write(report.to_csv(args.timings))
    for key, info in report.rates.items():
        if info is None:
            print(f"rate {key}: undefined")
        else:
            f = info["fit"]
            status = "" if info["window"] is None else (" ok" if info["ok"] else f" OUTSIDE {info['window']}")
            if info["window"] is not None and not info["gate"]:
                status += " (informational)"
            print(f"rate {key}: {f.rate:.4f}{status}")
    if len(report.records) < 3:
        print("fewer than 3 sweep points: no rate fit")
    return EXIT_OK if report.windows_ok() else EXIT_WINDOW


def cmd_verify(args) -> int:
    cfg = _config(args)
    out, cache = _dirs(args, cfg)
    checks = run_verify(cfg, cache, seed=args.seed)
    text = "".join(c.line() + "\n" for c in checks)
    (out / "verify.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_WINDOW if any(c.status == "fail" for c in checks) else EXIT_OK


def cmd_report(args) -> int:
    """Re-fit rates and redraw the plot from an existing sweep.csv."""
    cfg = _config(args)
    out, _ = _dirs(args, cfg)
    src = out / "sweep.csv"
    if not src.exists():
        raise ConfigError(f"{src}: no sweep output to report on (run `sweep` first)")
    report = ConvergenceReport()
    with src.open() as fh:
        for row in csv.DictReader(fh):
            rec = {c: (None if row[c] == "" else float(row[c])) for c in CSV_COLUMNS}
            rec["newton_iters"] = int(rec["newton_iters"])
            report.add(rec)
    if len(report.records) >= 3:
        report.fit("err_h1", cfg.h1_window)
        report.fit("energy_gap", cfg.energy_window)
        report.fit("weak_gap")
    (out / "report_summary.txt").write_text(report.summary())
    report.plot_svg(out / "report.svg")
    sys.stdout.write(report.summary())
    return EXIT_OK if report.windows_ok() else EXIT_WINDOW


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (INI); defaults to the built-in sweep setup")
    common.add_argument("--out", help="output directory (overrides [output] out)")
    common.add_argument("--cache", help="cell-solution cache directory, or 'none'")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent eps runs")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="perfhom", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("cell", parents=[common], help="solve cell problems, print the effective tensor")
    f = sub.add_parser("fine", parents=[common], help="solve the eps-level problem")
    f.add_argument("--eps", type=_parse_eps, required=True, metavar="1/N")
    sub.add_parser("hom", parents=[common], help="solve the homogenized problem")
    s = sub.add_parser("sweep", parents=[common], help="eps sweep with errors, energies and rate fits")
    s.add_argument("--timings", action="store_true", help="fill the seconds column (breaks byte-identity)")
    sub.add_parser("verify", parents=[common], help="run the identity/compatibility/bound checks")
    sub.add_parser("report", parents=[common], help="re-fit rates and redraw from an existing sweep.csv")
    return p


COMMANDS = {"cell": cmd_cell, "fine": cmd_fine, "hom": cmd_hom, "sweep": cmd_sweep,
            "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, ConvergenceError, NonSPDError, InconsistentSystemError, MeshingError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
