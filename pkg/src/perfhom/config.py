"""Run configuration: INI-style sections parsed with configparser.

See README.md for the full grammar.  Every value error is reported with the
file, line, section and key it came from.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .geometry import DEFAULT_SEGMENTS, HoleSpec, UnitCellGeometry, validate_cell
from .library import COEFFICIENTS, DATA, PHASES, data_field

CACHE_FORMAT = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    name: str = "zero"
    args: tuple[float, ...] = ()

    def build(self):
        return data_field(self.name, *self.args)

    def __str__(self):
        return " ".join([self.name, *(repr(a) for a in self.args)])


@dataclass(frozen=True)
class PhaseSpec:
    kind: str = "soft-sine"
    params: tuple[tuple[str, float], ...] = (("c1", 0.7), ("c2", 1.3))

    def build(self):
        factory, _ = PHASES[self.kind]
        return factory(**dict(self.params))


@dataclass(frozen=True)
class RunConfig:
    holes: tuple[HoleSpec, ...] = (HoleSpec((0.3, 0.3), 0.2, 1), HoleSpec((0.7, 0.7), 0.15, 2))
    segments: int = DEFAULT_SEGMENTS
    cell_h: float = 1 / 16
    coefficient: str = "identity"
    coefficient_params: tuple[tuple[str, float], ...] = ()
    phases: tuple[PhaseSpec, PhaseSpec] = (PhaseSpec(), PhaseSpec())
    f: DataSpec = DataSpec("const", (1.0,))
    g: tuple[DataSpec, DataSpec] = (DataSpec("sinsin", (1.0,)), DataSpec("sinsin", (-1.0,)))
    sweep: tuple[int, ...] = (2, 4, 8, 16)
    hom_h: float | None = None
    newton_tol: float = 1e-10
    max_newton: int = 25
    cg_tol: float = 1e-12
    weak_blocks: int = 4
    h1_window: tuple[float, float] = (0.4, 1.1)
    energy_window: tuple[float, float] = (0.4, 1.2)
    out: str = "out"
    cache: str = ".perfhom-cache"
    source: str = field(default="<defaults>", compare=False)

    @property
    def geometry(self) -> UnitCellGeometry:
        return UnitCellGeometry(self.holes, self.segments)

    def build_coefficient(self):
        factory, _ = COEFFICIENTS[self.coefficient]
        return factory(**dict(self.coefficient_params))

    def build_phases(self):
        return tuple(p.build() for p in self.phases)

    def build_data(self):
        return self.f.build(), tuple(g.build() for g in self.g)

    def hom_n(self) -> int:
        """Intervals per side of the homogenized mesh; auto = 2 N_max / cell_h."""
        if self.hom_h is not None:
            return int(round(1 / self.hom_h))
        return int(round(2 * max(self.sweep) / self.cell_h))

    def cache_key(self) -> "CacheKey":
        return CacheKey.of(self)


@dataclass(frozen=True)
class CacheKey:
    payload: str

    @classmethod
    def of(cls, cfg: RunConfig) -> "CacheKey":
        body = {
            "format": CACHE_FORMAT,
            "holes": [[list(map(repr, h.center)), repr(h.radius), h.phase] for h in cfg.holes],
            "segments": cfg.segments,
            "cell_h": repr(cfg.cell_h),
            "coefficient": [cfg.coefficient, [[k, repr(v)] for k, v in cfg.coefficient_params]],
        }
        return cls(json.dumps(body, sort_keys=True, separators=(",", ":")))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# parsing


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """(section, key) -> 1-based line number of its definition."""
    out, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            out[(section, "")] = no
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            out[(section, m.group(1).strip().lower())] = no
    return out


class _Reader:
    def __init__(self, parser: configparser.ConfigParser, lines: dict, source: str):
        self.p, self.lines, self.source = parser, lines, source

    def where(self, section: str, key: str = "") -> str:
        no = self.lines.get((section, key.lower()), self.lines.get((section, "")))
        loc = f"{self.source}:{no}" if no else self.source
        return f"{loc}: [{section}]" + (f" {key}" if key else "")

    def fail(self, section, key, msg):
        raise ConfigError(f"{self.where(section, key)}: {msg}")

    def raw(self, section, key, default=None):
        if not self.p.has_section(section) or not self.p.has_option(section, key):
            return default
        return self.p.get(section, key).strip()

    def number(self, section, key, default=None, positive=False):
        raw = self.raw(section, key)
        if raw is None:
            return default
        try:
            val = float(Fraction(raw)) if "/" in raw else float(raw)
        except (ValueError, ZeroDivisionError):
            self.fail(section, key, f"expected a number, got {raw!r}")
        if positive and not val > 0:
            self.fail(section, key, f"must be positive, got {raw!r}")
        return val

    def integer(self, section, key, default=None, positive=False):
        raw = self.raw(section, key)
        if raw is None:
            return default
        try:
            val = int(raw)
        except ValueError:
            self.fail(section, key, f"expected an integer, got {raw!r}")
        if positive and val <= 0:
            self.fail(section, key, f"must be a positive integer, got {raw!r}")
        return val

    def numbers(self, section, key, default=None, count=None):
        raw = self.raw(section, key)
        if raw is None:
            return default
        parts = [t for t in re.split(r"[,\s]+", raw) if t]
        try:
            vals = tuple(float(Fraction(t)) for t in parts)
        except (ValueError, ZeroDivisionError):
            self.fail(section, key, f"expected numbers, got {raw!r}")
        if count is not None and len(vals) != count:
            self.fail(section, key, f"expected {count} numbers, got {len(vals)}")
        return vals


_KNOWN = {
    "cell": {"segments", "target_h"},
    "coefficient": {"name", "base", "amp", "shear"},
    "phase": {"kind", "a", "b", "c1", "c2"},
    "hole": {"center", "radius", "phase"},
    "data": {"f", "g1", "g2"},
    "sweep": {"n", "hom_h", "weak_blocks"},
    "solver": {"newton_tol", "max_newton", "cg_tol"},
    "acceptance": {"h1_window", "energy_window"},
    "output": {"out", "cache"},
}


def _family(section: str) -> str:
    return section.split(".")[0]


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    r = _Reader(parser, _line_index(text), source)

    for section in parser.sections():
        fam = _family(section)
        if fam not in _KNOWN:
            r.fail(section, "", f"unknown section (known: {', '.join(sorted(_KNOWN))})")
        if fam in ("hole", "phase") and not re.fullmatch(r"(hole|phase)\.\d+", section):
            r.fail(section, "", f"section must be named {fam}.<integer>")
        for key in parser.options(section):
            if key not in _KNOWN[fam]:
                r.fail(section, key, f"unknown key (known: {', '.join(sorted(_KNOWN[fam]))})")

    d = RunConfig()
    kw = {"source": source}

    kw["segments"] = r.integer("cell", "segments", d.segments, positive=True)
    kw["cell_h"] = r.number("cell", "target_h", d.cell_h, positive=True)

    hole_sections = sorted((s for s in parser.sections() if _family(s) == "hole"),
                           key=lambda s: int(s.split(".")[1]))
    if hole_sections or parser.has_section("cell"):
        holes = []
        for s in hole_sections:
            center = r.numbers(s, "center", count=2)
            radius = r.number(s, "radius", positive=True)
            phase = r.integer(s, "phase", 1)
            if center is None or radius is None:
                r.fail(s, "", "hole needs center and radius")
            if phase not in (1, 2):
                r.fail(s, "phase", f"phase must be 1 or 2, got {phase}")
            holes.append(HoleSpec(center, radius, phase))
        report = validate_cell(holes)
        if not report.ok:
            r.fail(hole_sections[0] if hole_sections else "cell", "", f"invalid cell: {report}")
        kw["holes"] = tuple(holes)

    name = r.raw("coefficient", "name", d.coefficient)
    if name not in COEFFICIENTS:
        r.fail("coefficient", "name", f"unknown coefficient {name!r} (known: {', '.join(COEFFICIENTS)})")
    _, pnames = COEFFICIENTS[name]
    params = tuple((p, v) for p in pnames if (v := r.number("coefficient", p)) is not None)
    extra = {"base", "amp", "shear"} - set(pnames)
    for p in extra:
        if r.raw("coefficient", p) is not None:
            r.fail("coefficient", p, f"parameter not used by coefficient {name!r}")
    kw["coefficient"], kw["coefficient_params"] = name, params
    try:
        COEFFICIENTS[name][0](**dict(params))
    except ValueError as err:
        r.fail("coefficient", "name", str(err))

    phases = []
    for m in (1, 2):
        s = f"phase.{m}"
        kind = r.raw(s, "kind", d.phases[m - 1].kind)
        if kind not in PHASES:
            r.fail(s, "kind", f"unknown phase kind {kind!r} (known: {', '.join(PHASES)})")
        _, pnames = PHASES[kind]
        for p in {"a", "b", "c1", "c2"} - set(pnames):
            if r.raw(s, p) is not None:
                r.fail(s, p, f"parameter not used by phase kind {kind!r}")
        vals = tuple((p, v) for p in pnames if (v := r.number(s, p)) is not None)
        if kind == d.phases[m - 1].kind and not vals:
            vals = d.phases[m - 1].params
        spec = PhaseSpec(kind, vals)
        try:
            spec.build()
        except ValueError as err:
            r.fail(s, "kind", str(err))
        phases.append(spec)
    for s in parser.sections():
        if _family(s) == "phase" and s not in ("phase.1", "phase.2"):
            r.fail(s, "", "only phase.1 and phase.2 exist")
    kw["phases"] = tuple(phases)

    def data(key, default):
        raw = r.raw("data", key)
        if raw is None:
            return default
        parts = raw.split()
        nm = parts[0] if parts else ""
        if nm not in DATA:
            r.fail("data", key, f"unknown data expression {nm!r} (known: {', '.join(DATA)})")
        try:
            args = tuple(float(Fraction(t)) for t in parts[1:])
            spec = DataSpec(nm, args)
            spec.build()
        except (ValueError, ZeroDivisionError) as err:
            r.fail("data", key, str(err))
        return spec

    kw["f"] = data("f", d.f)
    kw["g"] = (data("g1", d.g[0]), data("g2", d.g[1]))

    raw = r.raw("sweep", "n")
    if raw is not None:
        try:
            ns = tuple(int(t) for t in re.split(r"[,\s]+", raw) if t)
        except ValueError:
            r.fail("sweep", "n", f"expected positive integers, got {raw!r}")
        if not ns or any(n <= 0 for n in ns):
            r.fail("sweep", "n", f"expected positive integers, got {raw!r}")
        if len(set(ns)) != len(ns):
            r.fail("sweep", "n", "duplicate values")
        kw["sweep"] = tuple(sorted(ns))
    hh = r.raw("sweep", "hom_h")
    if hh is not None and hh != "auto":
        val = r.number("sweep", "hom_h", positive=True)
        if abs(1 / val - round(1 / val)) > 1e-9:
            r.fail("sweep", "hom_h", "must be 1/n for an integer n")
        kw["hom_h"] = val
    kw["weak_blocks"] = r.integer("sweep", "weak_blocks", d.weak_blocks, positive=True)

    kw["newton_tol"] = r.number("solver", "newton_tol", d.newton_tol, positive=True)
    kw["max_newton"] = r.integer("solver", "max_newton", d.max_newton, positive=True)
    kw["cg_tol"] = r.number("solver", "cg_tol", d.cg_tol, positive=True)

    for key in ("h1_window", "energy_window"):
        w = r.numbers("acceptance", key, None, count=2)
        if w is not None:
            if w[0] > w[1]:
                r.fail("acceptance", key, "window lower end exceeds upper end")
            kw[key] = w

    kw["out"] = r.raw("output", "out", d.out)
    kw["cache"] = r.raw("output", "cache", d.cache)
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config ({err.strerror})") from None
    return parse_config(text, str(path))
