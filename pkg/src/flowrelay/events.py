"""Boundary-crossing location, crossing trees, and parity/winding checks.

Crossings of g(t) = f(F^t(x)) - level are found on the dense interpolant of
one adaptive integration: every accepted step is oversampled, sign changes
are bracketed and polished by a safeguarded root finder, and near-tangent
structure (grazing extrema, root pairs closer than the separation floor)
aborts with DegenerateCrossing so callers can perturb the level offsets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .dynamics import Flow, FlowArc, integrate
from .errors import DegenerateCrossing, VanishingImage
from .expr import Expression
from .geometry import Region, RelaySystem, sample_boundary
from ._util import seeded_rng

__all__ = [
    "EventSettings",
    "DEFAULT_EVENTS",
    "CrossingEvent",
    "TreeNode",
    "CrossingTree",
    "find_crossings",
    "forward_tree",
    "backward_tree",
    "forward_leaf_parity",
    "backward_leaf_parity",
    "degree_check",
    "DegreeCheckResult",
    "winding_degree",
]


@dataclass(frozen=True)
class EventSettings:
    tol_level: float = 1e-10   # |f - level| at a reported crossing point
    eps_tan: float = 1e-8      # transversality floor on |d/dt f(F^t x)|
    t_sep_rel: float = 1e-7    # root pairs closer than this * window are tangencies
    ns: int = 8                # interpolant subsamples per accepted step
    ns_max: int = 64           # doubling cap for the confirmation rescan
    graze_tol: float = 1e-9    # |g| at a refined extremum that counts as a graze
    graze_band: float = 1e-2   # fraction of the g-range scanned for grazing extrema


DEFAULT_EVENTS = EventSettings()


@dataclass
class CrossingEvent:
    """A transversal boundary crossing along one flow arc."""

    t: float
    point: np.ndarray
    direction: int    # sign of d/dt [f(F^t(x))] at the crossing
    margin: float     # |d/dt [f(F^t(x))]|, the transversality margin


def _g_scalar(arc: FlowArc, f: Expression, level: float) -> Callable[[float], float]:
    def g(tau: float) -> float:
        return float(f.evaluate(arc(tau))) - level
    return g


def _gdot_scalar(arc: FlowArc, f: Expression) -> Callable[[float], float]:
    sign = -1.0 if arc.backward else 1.0

    def gdot(tau: float) -> float:
        x = arc(tau)
        return sign * float(f.gradient(x) @ arc.flow.field(x))
    return gdot


def _fine_grid(arc: FlowArc, ns: int) -> np.ndarray:
    pieces = [np.linspace(arc.ts[i], arc.ts[i + 1], ns + 1)[:-1]
              for i in range(len(arc.ts) - 1)]
    ts = np.concatenate(pieces + [arc.ts[-1:]])
    return np.unique(ts)


def _scan_roots(arc: FlowArc, f: Expression, level: float, ns: int,
                settings: EventSettings) -> list[float]:
    """Root times of g on (0, duration), including pairs recovered from
    near-zero extrema; raises on grazes."""
    ts = _fine_grid(arc, ns)
    pts = arc.sample(ts)
    g = f.evaluate(pts) - level
    sign = -1.0 if arc.backward else 1.0
    gdot = sign * np.einsum("ij,ij->i", f.gradient(pts),
                            arc.flow.field.value_batch(pts))
    gfun = _g_scalar(arc, f, level)
    gdfun = _gdot_scalar(arc, f)

    brackets: list[tuple[float, float]] = []
    sig = np.sign(g)
    for i in range(len(ts) - 1):
        if sig[i] == 0.0:
            continue  # handled by the level-tolerance precondition / root polish
        if sig[i + 1] != 0.0 and sig[i] != sig[i + 1]:
            brackets.append((ts[i], ts[i + 1]))

    # grazing detection: extrema of g near zero that the sign scan cannot see
    g_range = float(g.max() - g.min()) if len(g) else 0.0
    band = max(settings.graze_band * g_range, 10.0 * settings.tol_level)
    for i in range(len(ts) - 1):
        if gdot[i] == 0.0 or gdot[i + 1] == 0.0 or np.sign(gdot[i]) == np.sign(gdot[i + 1]):
            continue
        if sig[i] != 0.0 and sig[i] == sig[i + 1]:
            if min(abs(g[i]), abs(g[i + 1])) > band:
                continue
            t_ext = brentq(gdfun, ts[i], ts[i + 1], xtol=1e-13, rtol=1e-14)
            g_ext = gfun(t_ext)
            if abs(g_ext) <= settings.graze_tol:
                raise DegenerateCrossing(
                    f"grazing contact with the boundary (|g|={abs(g_ext):.2e})",
                    time=float(t_ext))
            if np.sign(g_ext) != sig[i]:
                # the extremum pokes through: two roots hidden in one step
                brackets.append((ts[i], t_ext))
                brackets.append((t_ext, ts[i + 1]))

    roots = []
    for a, b in sorted(brackets):
        r = brentq(gfun, a, b, xtol=1e-14, rtol=1e-15)
        roots.append(float(r))
    return sorted(roots)


def find_crossings(flow: Flow, region: Region, level: float | None, x,
                   t_end: float, *, backward: bool = False,
                   settings: EventSettings = DEFAULT_EVENTS,
                   arc: FlowArc | None = None) -> list[CrossingEvent]:
    """All transversal crossings of {f = level} along the arc, ordered by time.

    The scan is confirmed by doubling the oversampling density until two
    consecutive densities agree on the root set (up to the separation
    floor); disagreement at the densest scan is treated as unresolved
    tangency.
    """
    lv = region.level if level is None else float(level)
    f = region.f
    if arc is None:
        arc = integrate(flow, t_end, np.asarray(x, float), backward=backward)
    g0 = float(f.evaluate(arc.x0)) - lv
    if abs(g0) <= settings.tol_level:
        raise ValueError("start point lies on the watched boundary")

    t_sep = settings.t_sep_rel * t_end
    roots = _scan_roots(arc, f, lv, settings.ns, settings)
    ns = settings.ns
    agreed = False
    while ns < settings.ns_max:
        ns *= 2
        confirm = _scan_roots(arc, f, lv, ns, settings)
        agreed = len(confirm) == len(roots) and all(
            abs(a - b) <= max(t_sep, 1e-9) for a, b in zip(roots, confirm))
        roots = confirm
        if agreed:
            break
    if not agreed:
        raise DegenerateCrossing(
            f"crossing structure unresolved at {settings.ns_max} subsamples per step")

    # boundary-of-window and separation policy
    roots = [r for r in roots if t_sep < r < t_end - t_sep]
    for a, b in zip(roots, roots[1:]):
        if b - a <= t_sep:
            raise DegenerateCrossing(
                f"root pair separated by {b - a:.2e} <= t_sep", time=float(a))

    gdfun = _gdot_scalar(arc, f)
    events = []
    for r in roots:
        y = arc(r)
        resid = abs(float(f.evaluate(y)) - lv)
        if resid > settings.tol_level:
            raise DegenerateCrossing(
                f"root polish stalled at |g|={resid:.2e}", time=float(r))
        slope = gdfun(r)
        if abs(slope) <= settings.eps_tan:
            raise DegenerateCrossing(
                f"tangential crossing, margin {abs(slope):.2e}", time=float(r))
        events.append(CrossingEvent(float(r), y, int(np.sign(slope)), abs(slope)))
    return events


# ---------------------------------------------------------------------------
# Crossing trees (stagewise recursion of crossing sets) and parities
# ---------------------------------------------------------------------------

@dataclass
class TreeNode:
    point: np.ndarray
    times: tuple[float, ...]   # durations accumulated along the branch
    stage: int                 # chain index of the boundary this node lies on
    parent: int | None         # index into the previous stage's node list


@dataclass
class CrossingTree:
    """Stagewise expansion of boundary crossings from one root point.

    Forward trees expand stages 1..p with the forward flows; backward trees
    expand stages p-1..0 with the reversed flows. Leaves of a complete
    forward tree are exactly the switching vectors whose chain starts at the
    root; `consistent` is False when some branch died before the final stage
    (possible only when the entry hypothesis fails).
    """

    root: np.ndarray
    forward: bool
    stages: list[list[TreeNode]]
    consistent: bool

    @property
    def leaves(self) -> list[TreeNode]:
        return self.stages[-1]

    @property
    def leaf_count(self) -> int:
        return len(self.stages[-1])


def _expand_tree(system: RelaySystem, levels: np.ndarray, x: np.ndarray,
                 forward: bool, settings: EventSettings,
                 window_factor: float = 1.0) -> CrossingTree:
    p = system.p
    x = np.asarray(x, float)
    start_stage = 0 if forward else p
    region0 = system.chain_region(start_stage, levels)
    if abs(float(region0.f.evaluate(x)) - float(levels[start_stage])) > settings.tol_level:
        raise ValueError(f"root point is not on boundary {start_stage}")

    stages = [[TreeNode(x, (), start_stage, None)]]
    consistent = True
    order = range(1, p + 1) if forward else range(p - 1, -1, -1)
    for target in order:
        flow_idx = (target - 1) if forward else target
        flow = system.flows[flow_idx]
        region_t = system.chain_region(target, levels)
        next_nodes: list[TreeNode] = []
        for parent_idx, node in enumerate(stages[-1]):
            try:
                evs = find_crossings(flow, region_t, float(levels[target]),
                                     node.point, window_factor * flow.horizon,
                                     backward=not forward, settings=settings)
            except DegenerateCrossing as exc:
                raise DegenerateCrossing(str(exc), stage=target) from exc
            if not evs:
                consistent = False
            for ev in evs:
                next_nodes.append(TreeNode(ev.point, node.times + (ev.t,),
                                           target, parent_idx))
        stages.append(next_nodes)
    return CrossingTree(x, forward, stages, consistent)


def forward_tree(system: RelaySystem, levels, x,
                 settings: EventSettings = DEFAULT_EVENTS) -> CrossingTree:
    """Expand crossings stage by stage from a point on boundary 0."""
    lv = system.levels() if levels is None else np.asarray(levels, float)
    return _expand_tree(system, lv, x, True, settings)


def backward_tree(system: RelaySystem, levels, x,
                  settings: EventSettings = DEFAULT_EVENTS) -> CrossingTree:
    """Expand reversed-flow crossings from a point on the closing boundary p."""
    lv = system.levels() if levels is None else np.asarray(levels, float)
    return _expand_tree(system, lv, x, False, settings)


def forward_leaf_parity(system: RelaySystem, levels, x,
                        settings: EventSettings = DEFAULT_EVENTS) -> int:
    """Leaf count of the forward tree mod 2 (the chain-start preimage parity)."""
    return forward_tree(system, levels, x, settings).leaf_count % 2


def backward_leaf_parity(system: RelaySystem, levels, x,
                         settings: EventSettings = DEFAULT_EVENTS) -> int:
    """Leaf count of the backward tree mod 2 (the chain-end preimage parity)."""
    return backward_tree(system, levels, x, settings).leaf_count % 2


@dataclass
class DegreeCheckResult:
    """Per-sample parities of the chain-start and chain-end maps."""

    start_parities: list[int | None]   # None marks a degenerate sample
    end_parities: list[int | None]
    start_points: np.ndarray
    end_points: np.ndarray

    @property
    def degenerate_rate(self) -> float:
        bad = sum(v is None for v in self.start_parities)
        bad += sum(v is None for v in self.end_parities)
        total = len(self.start_parities) + len(self.end_parities)
        return bad / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "start_parities": self.start_parities,
            "end_parities": self.end_parities,
            "degenerate_rate": self.degenerate_rate,
            "samples": len(self.start_parities),
        }


def degree_check(system: RelaySystem, levels=None, samples: int = 20,
                 seed: int = 0,
                 settings: EventSettings = DEFAULT_EVENTS) -> DegreeCheckResult:
    """Sample both chain boundaries and tabulate leaf parities.

    Degenerate samples (tangential crossings somewhere in their tree) are
    recorded as None rather than retried; their rate is part of the result.
    """
    lv = system.levels() if levels is None else np.asarray(levels, float)
    bs0 = sample_boundary(system.chain_region(0, lv), system.box, samples,
                          seeded_rng(seed, "degree", "start"), level=float(lv[0]))
    bsp = sample_boundary(system.chain_region(system.p, lv), system.box, samples,
                          seeded_rng(seed, "degree", "end"), level=float(lv[system.p]))
    start: list[int | None] = []
    end: list[int | None] = []
    for pt in bs0.points:
        try:
            start.append(forward_leaf_parity(system, lv, pt, settings))
        except DegenerateCrossing:
            start.append(None)
    for pt in bsp.points:
        try:
            end.append(backward_leaf_parity(system, lv, pt, settings))
        except DegenerateCrossing:
            end.append(None)
    return DegreeCheckResult(start, end, bs0.points, bsp.points)


# ---------------------------------------------------------------------------
# Winding number of a planar map restricted to the unit circle
# ---------------------------------------------------------------------------

def winding_degree(fx: Expression, fy: Expression, samples: int = 256,
                   tol: float = 1e-12) -> int:
    """Total winding number of t -> (fx, fy)(cos t, sin t) around the origin.

    The image is radially normalized; accumulated angle increments must each
    stay below pi, which m >= 64 guarantees for the maps this backs.
    """
    if samples < 64:
        raise ValueError("need at least 64 samples")
    if fx.n != 2 or fy.n != 2:
        raise ValueError("winding maps must be planar (n = 2)")
    theta = np.linspace(0.0, 2.0 * np.pi, samples + 1)
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    u = fx.evaluate(pts)
    v = fy.evaluate(pts)
    r = np.hypot(u, v)
    if r.min() <= tol:
        raise VanishingImage(f"image radius fell to {r.min():.2e}")
    ang = np.arctan2(v, u)
    dang = np.diff(ang)
    dang = (dang + np.pi) % (2.0 * np.pi) - np.pi
    if np.any(np.abs(dang) >= np.pi * (1.0 - 1e-9)):
        raise VanishingImage("angle increment reached pi; sample the map more densely")
    total = dang.sum() / (2.0 * np.pi)
    deg = int(np.rint(total))
    if abs(total - deg) > 1e-6:
        raise VanishingImage(f"winding sum {total} is not close to an integer")
    return deg
