"""Builtin coefficient fields, nonlinearities and data expressions addressable by name."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .fem import CoefficientField, constant_coefficient
from .fine_solver import NonlinearPhase, linear_phase, soft_sine_phase

TWO_PI = 2 * np.pi


def identity_coefficient() -> CoefficientField:
    c = constant_coefficient(np.eye(2))
    return CoefficientField(c.evaluate, 1.0, 1.0, "identity", ())


def layered_coefficient(base: float = 2.0, amp: float = 1.0) -> CoefficientField:
    """(base + amp sin 2 pi xi_1) I."""
    if base - abs(amp) <= 0:
        raise ValueError("layered coefficient must satisfy base > |amp|")

    def evaluate(xi):
        a = base + amp * np.sin(TWO_PI * xi[..., 0])
        return a[..., None, None] * np.eye(2)

    return CoefficientField(evaluate, base - abs(amp), base + abs(amp), "layered", (base, amp))


def checker_smooth_coefficient(base: float = 2.0, amp: float = 0.5, shear: float = 0.25) -> CoefficientField:
    """Anisotropic smooth checkerboard with off-diagonal shear; bounds from Gershgorin discs."""
    lo, hi = base - abs(amp) - abs(shear), base + abs(amp) + abs(shear)
    if lo <= 0:
        raise ValueError("checker-smooth coefficient must satisfy base > |amp| + |shear|")

    def evaluate(xi):
        s = np.sin(TWO_PI * xi[..., 0]) * np.sin(TWO_PI * xi[..., 1])
        c = np.cos(TWO_PI * xi[..., 0]) * np.cos(TWO_PI * xi[..., 1])
        out = np.empty(xi.shape[:-1] + (2, 2))
        out[..., 0, 0] = base + amp * s
        out[..., 1, 1] = base - amp * s
        out[..., 0, 1] = out[..., 1, 0] = shear * c
        return out

    return CoefficientField(evaluate, lo, hi, "checker-smooth", (base, amp, shear))


COEFFICIENTS: dict[str, tuple[Callable, tuple[str, ...]]] = {
    "identity": (identity_coefficient, ()),
    "layered": (layered_coefficient, ("base", "amp")),
    "checker-smooth": (checker_smooth_coefficient, ("base", "amp", "shear")),
}

PHASES: dict[str, tuple[Callable[..., NonlinearPhase], tuple[str, ...]]] = {
    "linear": (linear_phase, ("a", "b")),
    "soft-sine": (soft_sine_phase, ("c1", "c2")),
}


def _sinsin(amp=1.0):
    return lambda x: amp * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


def _bubble(amp=1.0):
    return lambda x: 16.0 * amp * x[..., 0] * (1 - x[..., 0]) * x[..., 1] * (1 - x[..., 1])


def _const(c=1.0):
    return lambda x: np.full(np.shape(x)[:-1], float(c))


def _linear(a=0.0, b=1.0, c=0.0):
    return lambda x: a + b * x[..., 0] + c * x[..., 1]


def _manufactured(amp=1.0):
    """Source whose Dirichlet Poisson solution with unit tensor is amp sin(pi x) sin(pi y)."""
    return _sinsin(2 * np.pi ** 2 * amp)


# name -> (factory, number of optional numeric arguments)
DATA: dict[str, tuple[Callable, int]] = {
    "zero": (lambda: None, 0),
    "const": (_const, 1),
    "sinsin": (_sinsin, 1),
    "bubble": (_bubble, 1),
    "linear": (_linear, 3),
    "manufactured": (_manufactured, 1),
}


def data_field(name: str, *args: float):
    """Callable x -> values for a builtin expression, or None for `zero`."""
    try:
        factory, nmax = DATA[name]
    except KeyError:
        raise KeyError(f"unknown data expression {name!r}; known: {', '.join(DATA)}") from None
    if len(args) > nmax:
        raise ValueError(f"{name} takes at most {nmax} numeric arguments, got {len(args)}")
    return factory(*args)
