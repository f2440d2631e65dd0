"""Shooting residual, exact Jacobian, orbit search, continuation, replay."""
from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.linalg import expm

from flowrelay import expr
from flowrelay.dynamics import flow_map
from flowrelay.errors import (ContinuationStalled, NoConvergence, NotInWindow,
                              ProjectionDiverged, ReplayMismatch)
from flowrelay.events import forward_tree, backward_tree
from flowrelay.geometry import Region, sample_boundary
from flowrelay.periodic import (PeriodicOrbit, SolveOptions, SwitchingVector,
                                chain_end, chain_points, chain_start,
                                continue_levels, find_periodic, level_values,
                                orbit_hausdorff, project_to_boundary,
                                residual_jacobian, shooting_residual,
                                verify_periodic)

from conftest import make_rotor, make_systemb, rotor_periodic_start


@pytest.fixture(scope="module")
def rotor_m():
    return make_rotor()


@pytest.fixture(scope="module")
def systemb_m():
    return make_systemb()


@pytest.fixture(scope="module")
def systemb_orbit(systemb_m):
    return find_periodic(systemb_m, opts=SolveOptions(max_seeds=4, seed=1))[0]


def rotor_closed_form_sv(radius: float = 1.0) -> SwitchingVector:
    """Exact rotor orbit at the given radius: angles where the radius circle
    meets the two boundaries, durations summing to one full turn."""
    alpha = math.acos((radius * radius + 0.91) / (2 * radius))
    psi = math.acos(-(radius * radius + 0.84) / (2 * radius))
    t1 = psi - alpha
    return SwitchingVector.of(radius * np.array([math.cos(alpha), math.sin(alpha)]),
                              (t1, 2 * math.pi - t1))


def test_level_values_on_boundary_start(systemb_m):
    bs = sample_boundary(systemb_m.chain_region(0), systemb_m.box, 1, seed=0)
    sv = SwitchingVector.of(bs.points[0], (1.0, 1.0))
    vals = level_values(systemb_m, sv)
    assert abs(vals[0]) <= 1e-10


def test_level_values_rotor_closed_form(rotor_m):
    vals = level_values(rotor_m, rotor_closed_form_sv())
    assert np.abs(vals).max() < 1e-8


def test_level_values_recomputation_oracle(systemb_m):
    rng = np.random.default_rng(8)
    for _ in range(5):
        sv = SwitchingVector.of(rng.uniform(-1, 1, 2), rng.uniform(0.5, 3.5, 2))
        vals = level_values(systemb_m, sv)
        x1 = flow_map(systemb_m.flows[0], sv.durations[0], sv.x)
        x2 = flow_map(systemb_m.flows[1], sv.durations[1], x1)
        assert vals[0] == pytest.approx(float(systemb_m.regions[0].f.evaluate(sv.x)))
        assert vals[1] == pytest.approx(float(systemb_m.regions[1].f.evaluate(x1)), abs=1e-9)
        assert vals[2] == pytest.approx(float(systemb_m.regions[0].f.evaluate(x2)), abs=1e-9)


def test_chain_start_bit_exact():
    sv = SwitchingVector.of([0.1234567890123, -0.9], (1.0, 2.0))
    assert np.array_equal(chain_start(sv), np.array(sv.start))


def test_chain_rejects_nonpositive_duration(systemb_m):
    with pytest.raises(NotInWindow):
        chain_end(systemb_m, SwitchingVector.of([1.5, 0.0], (0.0, 1.0)))
    with pytest.raises(NotInWindow):
        chain_end(systemb_m, SwitchingVector.of([1.5, 0.0], (1.0, 100.0)))


def test_project_to_boundary_identity_and_sphere():
    sphere = Region(expr.parse("1 - (x1^2 + x2^2)", 2))
    y = np.array([1.0, 0.0])
    assert np.array_equal(project_to_boundary(sphere, 0.0, y), y)
    proj = project_to_boundary(sphere, 0.0, [1.1, 0.0])
    assert np.abs(proj - [1.0, 0.0]).max() < 1e-12


def test_project_displacement_bound():
    sphere = Region(expr.parse("1 - (x1^2 + x2^2)", 2))
    rng = np.random.default_rng(1)
    for _ in range(10):
        level_gap = rng.uniform(0.0, 0.05)
        theta = rng.uniform(0, 2 * np.pi)
        y = project_to_boundary(sphere, level_gap,
                                np.array([np.cos(theta), np.sin(theta)]))
        moved = np.linalg.norm(y - [np.cos(theta), np.sin(theta)])
        min_grad = 2.0 * min(1.0, np.linalg.norm(y))
        assert moved <= 2 * level_gap / min_grad + 1e-12


def test_project_diverges_on_flat_spot():
    flat = Region(expr.parse("x1^2", 2), eps_reg=1e-6)
    with pytest.raises(ProjectionDiverged):
        project_to_boundary(flat, -1.0, [0.5, 0.0])  # no level -1 anywhere


def test_residual_shape_and_closed_form(rotor_m):
    sv = rotor_closed_form_sv()
    r = shooting_residual(rotor_m, None, sv)
    assert r.shape == (4,)
    assert np.linalg.norm(r) < 1e-8


def test_residual_detects_perturbation(rotor_m):
    sv = rotor_closed_form_sv()
    bad = SwitchingVector.of(sv.start, (sv.durations[0] + 1e-3, sv.durations[1]))
    assert np.linalg.norm(shooting_residual(rotor_m, None, bad)) > 1e-4


def test_residual_jacobian_time_column_is_margin(systemb_m, systemb_orbit):
    orbit = systemb_orbit
    jac = residual_jacobian(systemb_m, None, orbit.sv)
    xs = chain_points(systemb_m, orbit.sv)
    grad = systemb_m.regions[1].f.gradient(xs[1])
    vel = systemb_m.flows[0].field(xs[1])
    assert jac[1, 2] == pytest.approx(float(grad @ vel), rel=1e-9)
    assert jac[0, 2] == 0.0 and jac[0, 3] == 0.0  # row 0 sees no durations


def test_residual_jacobian_linear_flow_analytic(systemb_m):
    av = np.array([[-0.5, -1.0], [1.0, -0.5]])
    c0, c1 = np.array([1.0, 0.0]), np.array([-1.0, 0.0])
    sv = SwitchingVector.of([1.4, 0.3], (2.0, 2.5))
    t1, t2 = sv.durations
    x0 = sv.x
    e1, e2 = expm(t1 * av), expm(t2 * av)
    x1 = c1 + e1 @ (x0 - c1)
    x2 = c0 + e2 @ (x1 - c0)
    v1 = av @ (x1 - c1)
    v2 = av @ (x2 - c0)
    g0 = -2 * (x0 - c0)
    g1 = -2 * (x1 - c1)
    expected = np.zeros((4, 4))
    expected[0, :2] = g0
    expected[1, :2] = g1 @ e1
    expected[1, 2] = g1 @ v1
    expected[2:, :2] = e2 @ e1 - np.eye(2)
    expected[2:, 2] = e2 @ v1
    expected[2:, 3] = v2
    jac = residual_jacobian(systemb_m, None, sv)
    assert np.abs(jac - expected).max() < 1e-7


def test_residual_jacobian_vs_finite_differences(systemb_m):
    rng = np.random.default_rng(17)
    h = 1e-6
    for _ in range(3):
        sv = SwitchingVector.of(rng.uniform(-0.5, 1.5, 2), rng.uniform(1.0, 3.0, 2))
        jac = residual_jacobian(systemb_m, None, sv)
        z = sv.as_vector()
        fd = np.zeros_like(jac)
        for j in range(4):
            zp = z.copy(); zp[j] += h
            zm = z.copy(); zm[j] -= h
            rp = shooting_residual(systemb_m, None, SwitchingVector.of(zp[:2], zp[2:]))
            rm = shooting_residual(systemb_m, None, SwitchingVector.of(zm[:2], zm[2:]))
            fd[:, j] = (rp - rm) / (2 * h)
        assert np.abs(jac - fd).max() / np.abs(jac).max() < 1e-5


def test_find_periodic_rotor_explicit_seeds(rotor_m):
    sv = rotor_closed_form_sv()
    rough = SwitchingVector.of(sv.x + np.array([0.0, 1e-3]),
                               (sv.durations[0] + 0.05, sv.durations[1] - 0.02))
    orbits = find_periodic(rotor_m, seeds=[rough], opts=SolveOptions(seed=0))
    assert len(orbits) == 1
    orb = orbits[0]
    assert abs(orb.period - 2 * math.pi) < 1e-6
    assert orb.verification.closure < 1e-6
    assert min(orb.margins) > 0.1
    # monodromy of a rigid full turn is the identity
    assert np.abs(orb.monodromy - np.eye(2)).max() < 1e-7


def test_find_periodic_empty_explicit_seeds(rotor_m):
    with pytest.raises(NoConvergence):
        find_periodic(rotor_m, seeds=[])


def test_find_periodic_systemb_small(systemb_m):
    orbits = find_periodic(systemb_m, opts=SolveOptions(max_seeds=6, seed=2))
    assert len(orbits) >= 1
    orb = orbits[0]
    assert orb.residual_norm < 1e-8
    assert orb.verification.closure < 1e-6
    assert min(orb.margins) > 1e-6
    # the symmetric relay has equal legs
    assert abs(orb.sv.durations[0] - orb.sv.durations[1]) < 1e-6
    # chain end returns to the start
    assert np.abs(chain_end(systemb_m, orb.sv) - chain_start(orb.sv)).max() < 1e-8


def test_find_periodic_deterministic(systemb_m):
    a = find_periodic(systemb_m, opts=SolveOptions(max_seeds=4, seed=3))
    b = find_periodic(systemb_m, opts=SolveOptions(max_seeds=4, seed=3))
    assert len(a) == len(b)
    for oa, ob in zip(a, b):
        assert oa.sv == ob.sv
        assert orbit_hausdorff(systemb_m, oa, ob) < 1e-6


def test_tree_leaves_are_consistent_switching_vectors(systemb_m):
    lv = systemb_m.levels()
    bs = sample_boundary(systemb_m.chain_region(0), systemb_m.box, 2, seed=4)
    for pt in bs.points:
        tree = forward_tree(systemb_m, lv, pt)
        for leaf in tree.leaves:
            sv = SwitchingVector.of(pt, leaf.times)
            assert np.abs(level_values(systemb_m, sv) - lv).max() <= 1e-8
    bsp = sample_boundary(systemb_m.chain_region(2), systemb_m.box, 2, seed=4)
    for pt in bsp.points:
        tree = backward_tree(systemb_m, lv, pt)
        for leaf in tree.leaves:
            sv = SwitchingVector.of(leaf.point, tuple(reversed(leaf.times)))
            assert np.abs(chain_end(systemb_m, sv) - pt).max() <= 1e-7


def test_verify_rejects_corrupted_orbit(systemb_m, systemb_orbit):
    orb = systemb_orbit
    bad_sv = SwitchingVector.of(orb.sv.start,
                                (orb.sv.durations[0] + 0.01, orb.sv.durations[1]))
    corrupted = PeriodicOrbit(bad_sv, orb.levels, orb.residual_norm,
                              orb.margins, orb.monodromy,
                              chain_points(systemb_m, bad_sv), orb.window_factor)
    with pytest.raises(ReplayMismatch):
        verify_periodic(systemb_m, corrupted)


def test_continuation_trivial_path(systemb_m, systemb_orbit):
    orb = systemb_orbit
    lv = systemb_m.levels()
    path = continue_levels(systemb_m, orb.sv, lv, lv)
    assert len(path.steps) == 1
    assert path.steps[0][1] == orb.sv


def test_continuation_small_shift_and_back(systemb_m, systemb_orbit):
    orb = systemb_orbit
    lv0 = systemb_m.levels()
    lv1 = lv0 + 0.01
    out = continue_levels(systemb_m, orb.sv, lv0, lv1, steps=4)
    assert np.abs(out.orbit.levels - lv1).max() == 0.0
    back = continue_levels(systemb_m, out.orbit.sv, lv1, lv0, steps=4)
    assert orbit_hausdorff(systemb_m, back.orbit, orb) < 1e-6


def test_continuation_stalls_when_regions_vanish(systemb_m, systemb_orbit):
    orb = systemb_orbit
    lv0 = systemb_m.levels()
    cheap = SolveOptions(max_iter=6, seed=0)
    with pytest.raises(ContinuationStalled) as exc:
        continue_levels(systemb_m, orb.sv, lv0, np.full(3, 0.26), steps=4,
                        opts=cheap)
    assert len(exc.value.path) >= 1
