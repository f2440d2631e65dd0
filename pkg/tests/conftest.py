"""Shared fixtures: the two reference systems and a derivative-check corpus."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from flowrelay import expr
from flowrelay.dynamics import Flow, VectorField
from flowrelay.geometry import Region, RelaySystem

REPO_ROOT = Path(__file__).resolve().parents[1]
ROTOR_CONFIG = REPO_ROOT / "configs" / "rotor.json"
SYSTEMB_CONFIG = REPO_ROOT / "configs" / "systemb.json"

# closed-form rotor quantities: rigid rotation about the origin, region 0 a
# disk of radius 0.3 about (1, 0), region 1 a disk of radius 0.4 about (-1, 0)
ROTOR_CROSS_T = math.acos(-2.53 / 2.6)  # first boundary-1 hit from (1.3, 0)


def rotation_field() -> VectorField:
    return VectorField([expr.parse("-x2", 2), expr.parse("x1", 2)])


def make_rotor() -> RelaySystem:
    return RelaySystem(
        n=2, p=2,
        flows=(Flow(rotation_field(), horizon=math.pi),
               Flow(rotation_field(), horizon=math.pi)),
        regions=(Region(expr.parse("0.09 - ((x1-1)^2 + x2^2)", 2), index=0),
                 Region(expr.parse("0.16 - ((x1+1)^2 + x2^2)", 2), index=1)),
        box=[[-3.0, -3.0], [3.0, 3.0]])


def make_systemb() -> RelaySystem:
    f1 = VectorField([expr.parse("-0.5*(x1+1) - x2", 2),
                      expr.parse("(x1+1) - 0.5*x2", 2)])
    f2 = VectorField([expr.parse("-0.5*(x1-1) - x2", 2),
                      expr.parse("(x1-1) - 0.5*x2", 2)])
    return RelaySystem(
        n=2, p=2,
        flows=(Flow(f1, horizon=4.0), Flow(f2, horizon=4.0)),
        regions=(Region(expr.parse("0.25 - ((x1-1)^2 + x2^2)", 2), index=0),
                 Region(expr.parse("0.25 - ((x1+1)^2 + x2^2)", 2), index=1)),
        box=[[-4.0, -4.0], [4.0, 4.0]], beta=1)


def rotor_periodic_start(radius: float = 1.0) -> np.ndarray:
    """A boundary-0 point at the given orbit radius (transversal for r in
    the open interval (0.7, 1.3))."""
    phi = math.acos((radius * radius + 0.91) / (2.0 * radius))
    return radius * np.array([math.cos(phi), math.sin(phi)])


@pytest.fixture(scope="session")
def rotor() -> RelaySystem:
    return make_rotor()


@pytest.fixture(scope="session")
def systemb() -> RelaySystem:
    return make_systemb()


# 20 expressions with evaluation boxes on which they are smooth and
# finite-difference friendly (no singularities within h of the samples)
GRADIENT_CORPUS: list[tuple[str, int, tuple[float, float]]] = [
    ("x1^2 + x2^2", 2, (-2.0, 2.0)),
    ("x1*x2", 2, (-2.0, 2.0)),
    ("0.09 - ((x1-1)^2 + x2^2)", 2, (-2.0, 2.0)),
    ("sin(x1)*cos(x2)", 2, (-3.0, 3.0)),
    ("exp(0.3*x1) - tanh(x2)", 2, (-2.0, 2.0)),
    ("sqrt(x1^2 + x2^2 + 1)", 2, (-2.0, 2.0)),
    ("(x1 - x2)^3", 2, (-1.5, 1.5)),
    ("x1/(x2 + 4)", 2, (-2.0, 2.0)),
    ("tanh(x1*x2)", 2, (-1.5, 1.5)),
    ("sin(x1^2) + cos(x2)^2", 2, (-1.5, 1.5)),
    ("exp(-(x1^2 + x2^2))", 2, (-1.5, 1.5)),
    ("(x1^2 + 1)^0.5", 2, (-2.0, 2.0)),
    ("-x1^3 + 2*x2", 2, (-1.5, 1.5)),
    ("x1 - x2 - x1*x2 + 0.5", 2, (-2.0, 2.0)),
    ("sin(2*x1 - x2/2)", 2, (-2.0, 2.0)),
    ("sqrt(exp(x1) + 1)", 2, (-1.5, 1.5)),
    ("x1^2*x2 - x2^2*x3", 3, (-1.5, 1.5)),
    ("cos(x1) + cos(x2) + cos(x3)", 3, (-3.0, 3.0)),
    ("tanh(x1 + x2 + x3 + x4)", 4, (-1.0, 1.0)),
    ("x1*x2*x3*x4 + x1^2 - x3", 4, (-1.5, 1.5)),
]


def fd_gradient(e: expr.Expression, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences, the oracle the exact gradients are held to."""
    g = np.zeros(e.n)
    for j in range(e.n):
        xp = x.copy(); xp[j] += h
        xm = x.copy(); xm[j] -= h
        g[j] = (e.evaluate(xp) - e.evaluate(xm)) / (2.0 * h)
    return g


def gradient_corpus_max_relerr(seed: int = 0, points_per_expr: int = 3) -> float:
    """Worst relative FD mismatch over the corpus (shared by module and
    acceptance tests)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for text, n, (lo, hi) in GRADIENT_CORPUS:
        e = expr.parse(text, n)
        for _ in range(points_per_expr):
            x = rng.uniform(lo, hi, n)
            g = e.gradient(x)
            gf = fd_gradient(e, x)
            err = np.abs(g - gf).max() / max(1.0, np.abs(g).max())
            worst = max(worst, float(err))
    return worst
