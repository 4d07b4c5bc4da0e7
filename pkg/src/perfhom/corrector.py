"""First-order corrector, error measurements and rate fits over eps sweeps.

    u_bar = v0(x) + eps T_k(x/eps) d_k v0(x)

T is looked up node-exactly through the tiling; d_k v0 is the recovered
nodal gradient of v0 interpolated at the perforated-mesh nodes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cell import CellSolution, tiled
from .fem import FemField, norm_h1, norm_l2
from .fine_solver import block_averages
from .geometry import PerforatedDomainMesh
from .hom_solver import HomSolution, element_gradient_at, interpolate_structured

CSV_COLUMNS = ("epsilon", "h", "err_h1", "err_l2", "energy_fine", "energy_hom", "energy_gap",
               "weak_gap", "newton_iters", "seconds")


def cutoff(points: np.ndarray, eps: float) -> np.ndarray:
    """Ramp of the distance to the square boundary: 1 within eps, 0 beyond 2 eps, |grad| = 1/eps."""
    p = np.asarray(points, float)
    d = np.minimum(p, 1 - p).min(axis=1)
    return np.clip((2 * eps - d) / eps, 0.0, 1.0)


@dataclass(eq=False)
class CorrectorField:
    u_bar: FemField
    eps: float
    v0: np.ndarray  # v0 at the perforated nodes
    term: np.ndarray  # eps T_k d_k v0 at the perforated nodes
    cutoff: np.ndarray | None = None

    @property
    def with_cutoff(self) -> FemField:
        """u_bar + psi_eps = v0 + eps (1 - phi_eps) T_k d_k v0; zero on the outer boundary."""
        phi = self.cutoff if self.cutoff is not None else cutoff(self.u_bar.mesh.vertices, self.eps)
        return FemField(self.u_bar.mesh, self.v0 + (1 - phi) * self.term)


def build_corrector(v0: HomSolution, cell: CellSolution, domain: PerforatedDomainMesh,
                    with_cutoff: bool = False, gradient: str = "recovered") -> CorrectorField:
    """Nodal evaluation of the first-order two-scale expansion on `domain`.

    gradient="element" uses the piecewise-constant gradient of v0 instead of
    the recovered one (sensitivity check).
    """
    if domain.cell_mesh.fingerprint != cell.mesh.fingerprint:
        raise ValueError("geometry mismatch: cell solution and perforated mesh use different cell meshes")
    x = domain.mesh.vertices
    eps = domain.epsilon
    v = interpolate_structured(v0.v.values, v0.n, x)
    if gradient == "recovered":
        grad = interpolate_structured(v0.grad, v0.n, x)
    elif gradient == "element":
        grad = element_gradient_at(v0.v.values, v0.n, x)
    else:
        raise ValueError(f"unknown gradient variant {gradient!r}")
    T = np.column_stack([tiled(t, domain) for t in cell.T])
    term = eps * np.einsum("vk,vk->v", T, grad)
    phi = cutoff(x, eps) if with_cutoff else None
    return CorrectorField(FemField(domain.mesh, v + term), eps, v, term, phi)


def _check_same_mesh(a: FemField, b: FemField):
    if a.mesh is not b.mesh and a.mesh.fingerprint != b.mesh.fingerprint:
        raise ValueError("fields live on different meshes")


def error_h1(u: FemField, u_bar: FemField) -> float:
    """Full H1 norm of u - u_bar over the perforated domain."""
    _check_same_mesh(u, u_bar)
    return norm_h1(u.values - u_bar.values, u.mesh)


def error_l2(u: FemField, other: FemField) -> float:
    _check_same_mesh(u, other)
    return norm_l2(u.values - other.values, u.mesh)


def energy_gap(e_fine: float, e_hom: float) -> float:
    return abs(e_fine - e_hom)


def weak_convergence_gap(fine_blocks: np.ndarray, hom_blocks: np.ndarray, area_Q0: float) -> float:
    """max over blocks |avg(u~) - |Q0| avg(v0)|."""
    return float(np.max(np.abs(np.asarray(fine_blocks) - area_Q0 * np.asarray(hom_blocks))))


def weak_gap_from_fields(u: FemField, v0: HomSolution, area_Q0: float, n_blocks: int = 4) -> float:
    return weak_convergence_gap(block_averages(u.mesh, u.values, n_blocks),
                                block_averages(v0.v.mesh, v0.v.values, n_blocks), area_Q0)


@dataclass
class RateFit:
    rate: float
    intercept: float
    residual: float
    ci: tuple[float, float]
    n_points: int
    excluded: list = field(default_factory=list)

    def within(self, lo: float, hi: float) -> bool:
        return lo <= self.rate <= hi


def _fit(x, y):
    if len(x) == 2:
        rate = (y[1] - y[0]) / (x[1] - x[0])
        return rate, y[0] - rate * x[0], 0.0, (math.nan, math.nan)
    res = stats.linregress(x, y)
    resid = y - (res.slope * x + res.intercept)
    t = stats.t.ppf(0.975, len(x) - 2)
    ci = (float(res.slope - t * res.stderr), float(res.slope + t * res.stderr))
    return float(res.slope), float(res.intercept), float(np.sqrt(np.mean(resid ** 2))), ci


def observed_rate(points, guard: bool = False) -> RateFit:
    """Least squares fit of log e = rate log eps + intercept.

    With `guard`, the largest eps is dropped when keeping it makes the
    residual more than twice as large, provided 3 points remain.
    """
    pts = sorted(((float(e), float(v)) for e, v in points), reverse=True)
    if len(pts) < 3:
        raise ValueError("a rate fit needs at least 3 points")
    if any(v <= 0 or not math.isfinite(v) for _, v in pts):
        raise ValueError("errors must be positive and finite for a log-log fit")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    rate, icpt, resid, ci = _fit(x, y)
    fit = RateFit(rate, icpt, resid, ci, len(pts))
    if guard and len(pts) >= 4:
        r2, i2, res2, ci2 = _fit(x[1:], y[1:])
        if resid > 2 * res2:
            fit = RateFit(r2, i2, res2, ci2, len(pts) - 1, [pts[0][0]])
    return fit


@dataclass
class ConvergenceReport:
    records: list[dict] = field(default_factory=list)
    rates: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, rec: dict) -> None:
        self.records.append(rec)
        self.records.sort(key=lambda r: -r["epsilon"])

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]

    def fit(self, key: str, window: tuple[float, float] | None = None, guard: bool = True,
            gate: bool = True):
        """Fit the rate of column `key`; None when undefined (fewer than 3 points or zero errors).

        Windows with gate=False are reported but do not affect `windows_ok`.
        """
        pts = [(r["epsilon"], r[key]) for r in self.records]
        if len(pts) < 3 or all(v == 0 for _, v in pts):
            self.rates[key] = None
            return None
        fit = observed_rate(pts, guard=guard)
        self.rates[key] = {"fit": fit, "window": window, "gate": gate,
                           "ok": None if window is None else fit.within(*window)}
        return fit

    def to_csv(self, timings: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records:
            row = []
            for c in CSV_COLUMNS:
                v = r.get(c)
                if c == "seconds" and not timings:
                    v = None
                row.append("" if v is None else repr(v))
            w.writerow(row)
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.meta.items()]
        for key, info in self.rates.items():
            if info is None:
                lines.append(f"rate.{key} = undefined")
                continue
            f = info["fit"]
            lines.append(f"rate.{key} = {f.rate!r}")
            lines.append(f"rate.{key}.intercept = {f.intercept!r}")
            lines.append(f"rate.{key}.residual = {f.residual!r}")
            lines.append(f"rate.{key}.ci95 = {f.ci[0]!r}, {f.ci[1]!r}")
            lines.append(f"rate.{key}.points = {f.n_points}")
            if f.excluded:
                lines.append(f"rate.{key}.excluded_eps = {', '.join(repr(e) for e in f.excluded)}")
            if info["window"] is not None:
                lines.append(f"rate.{key}.window = {info['window'][0]!r}, {info['window'][1]!r}")
                lines.append(f"rate.{key}.ok = {str(info['ok']).lower()}")
                if not info["gate"]:
                    lines.append(f"rate.{key}.gating = false")
        for r in self.records:
            extra = {k: v for k, v in r.items() if k not in CSV_COLUMNS}
            for k, v in extra.items():
                lines.append(f"eps[{r['epsilon']!r}].{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def windows_ok(self) -> bool:
        return all(info is None or not info["gate"] or info["ok"] is not False
                   for info in self.rates.values())

    def plot_svg(self, path, keys=("err_h1", "energy_gap", "weak_gap")) -> None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        with matplotlib.rc_context({"svg.hashsalt": "perfhom", "svg.fonttype": "none"}):
            fig, ax = plt.subplots(figsize=(5, 4))
            eps = np.array(self.column("epsilon"))
            for key in keys:
                vals = np.array(self.column(key), dtype=float)
                if not np.all(vals > 0):
                    continue
                line, = ax.loglog(eps, vals, "o-", label=key)
                info = self.rates.get(key)
                if info:
                    f = info["fit"]
                    ax.loglog(eps, np.exp(f.intercept) * eps ** f.rate, "--", color=line.get_color(),
                              label=f"{key} fit, rate {f.rate:.2f}")
            ax.loglog(eps, eps ** 0.5 * (ax.get_ylim()[1] / 2), ":", color="gray", label="eps^1/2 reference")
            ax.set_xlabel("eps")
            ax.set_ylabel("error")
            ax.legend(fontsize=7)
            fig.tight_layout()
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)
