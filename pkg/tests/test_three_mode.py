"""A three-mode relay (spiral sinks around a triangle) to check that nothing
is special-cased to p = 2."""
from __future__ import annotations

import math

import numpy as np
import pytest

from flowrelay import expr
from flowrelay.dynamics import Flow, VectorField
from flowrelay.events import degree_check
from flowrelay.geometry import Region, RelaySystem, validate_system
from flowrelay.periodic import SolveOptions, find_periodic
from flowrelay.relay import simulate


def make_triangle() -> RelaySystem:
    centers = [(2.0 * math.cos(a), 2.0 * math.sin(a))
               for a in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3,
                         math.pi / 2 + 4 * math.pi / 3)]

    def offsets(c) -> tuple[str, str]:
        cx = f"(x1 - {c[0]!r})" if c[0] >= 0 else f"(x1 + {-c[0]!r})"
        cy = f"(x2 - {c[1]!r})" if c[1] >= 0 else f"(x2 + {-c[1]!r})"
        return cx, cy

    def sink_into(c) -> VectorField:
        cx, cy = offsets(c)
        return VectorField([expr.parse(f"-0.5*{cx} - {cy}", 2),
                            expr.parse(f"{cx} - 0.5*{cy}", 2)])

    def disk(c, i: int) -> Region:
        cx, cy = offsets(c)
        return Region(expr.parse(f"0.25 - ({cx}^2 + {cy}^2)", 2), index=i)

    # flow i carries boundary i to boundary i+1, so it sinks into center i+1
    return RelaySystem(
        n=2, p=3,
        flows=tuple(Flow(sink_into(centers[(i + 1) % 3]), horizon=5.0)
                    for i in range(3)),
        regions=tuple(disk(centers[i], i) for i in range(3)),
        box=[[-4.0, -4.0], [4.0, 4.0]], beta=1)


@pytest.fixture(scope="module")
def triangle():
    return make_triangle()


def test_triangle_validates(triangle):
    report = validate_system(triangle, m=64, seed=0)
    assert report.passed, report.failures


def test_triangle_simulation(triangle):
    x0 = np.array([0.5, 2.0])  # on boundary 0 (disk of radius 0.5 about (0, 2))
    assert abs(triangle.regions[0].f.evaluate(x0)) < 1e-10
    traj = simulate(triangle, x0, 0, max_switches=6)
    assert [s.mode_after for s in traj.switches] == [1, 2, 0, 1, 2, 0]


def test_triangle_parities(triangle):
    res = degree_check(triangle, samples=4, seed=1)
    assert all(v == 1 for v in res.start_parities if v is not None)
    assert all(v == 0 for v in res.end_parities if v is not None)


def test_triangle_periodic_orbit(triangle):
    orbits = find_periodic(triangle, opts=SolveOptions(max_seeds=4, seed=2))
    orb = orbits[0]
    assert orb.residual_norm < 1e-8
    assert orb.verification.closure < 1e-6
    assert len(orb.sv.durations) == 3
    # threefold symmetry: equal legs
    assert max(orb.sv.durations) - min(orb.sv.durations) < 1e-6
