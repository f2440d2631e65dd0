"""Switching-trajectory execution and reachable/limit point clouds.

In mode k the state evolves under flow k and only boundary (k+1 mod p) is
watched; which of its crossings triggers the switch is the policy's choice
(trajectories are nonunique by design). Crossing search windows grow from
one horizon up to the ten-horizon cap before the run is declared stuck.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import Flow, FlowArc, integrate
from .errors import NoCrossingWithinHorizon
from .events import EventSettings, DEFAULT_EVENTS, CrossingEvent, find_crossings
from .geometry import RelaySystem
from ._util import seeded_rng

__all__ = [
    "FirstHit",
    "NthHit",
    "RandomHit",
    "Branching",
    "SwitchPolicy",
    "Segment",
    "SwitchEvent",
    "Trajectory",
    "PointCloud",
    "simulate",
    "accessible_set",
    "omega_limit_estimate",
    "check_connected",
]

_WINDOW_GROWTH = (1.0, 2.0, 4.0, 10.0)  # multiples of the horizon, capped at 10


@dataclass(frozen=True)
class FirstHit:
    pass


@dataclass(frozen=True)
class NthHit:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("NthHit needs n >= 1")


@dataclass(frozen=True)
class RandomHit:
    seed: int = 0


@dataclass(frozen=True)
class Branching:
    breadth: int = 64

    def __post_init__(self):
        if self.breadth < 1:
            raise ValueError("Branching needs breadth >= 1")


SwitchPolicy = Union[FirstHit, NthHit, RandomHit, Branching]


@dataclass
class Segment:
    mode: int
    t0: float          # absolute start time
    duration: float
    x0: np.ndarray
    x1: np.ndarray


@dataclass
class SwitchEvent:
    time: float        # absolute time of the switch
    point: np.ndarray
    mode_before: int
    mode_after: int
    crossing_index: int
    margin: float


@dataclass
class Trajectory:
    """A mode-tagged switching trajectory.

    Within each segment the state follows a single flow; at each switch the
    mode increments cyclically and the switch point lies on the watched
    boundary to level tolerance. Segments share endpoint arrays bit-for-bit.
    """

    k0: int
    levels: np.ndarray
    segments: list[Segment]
    switches: list[SwitchEvent]
    arcs: list[FlowArc] = field(default_factory=list, repr=False)

    @property
    def final_state(self) -> np.ndarray:
        return self.segments[-1].x1

    @property
    def final_time(self) -> float:
        seg = self.segments[-1]
        return seg.t0 + seg.duration


def _watched_events(system: RelaySystem, levels: np.ndarray, x: np.ndarray,
                    mode: int, need: int, settings: EventSettings
                    ) -> tuple[list[CrossingEvent], FlowArc]:
    """Crossings of the watched boundary, growing the window up to the cap."""
    flow = system.flows[mode]
    watch = (mode + 1) % system.p
    region = system.chain_region(watch, levels)
    last_err: Exception | None = None
    for factor in _WINDOW_GROWTH:
        window = factor * flow.horizon
        arc = integrate(flow, window, x)
        evs = find_crossings(flow, region, float(levels[watch]), x, window,
                             settings=settings, arc=arc)
        if len(evs) >= need:
            return evs, arc
    raise NoCrossingWithinHorizon(
        f"boundary {watch} not crossed {need} time(s) within "
        f"{_WINDOW_GROWTH[-1]} horizons of flow {mode}")


def _pick(policy: SwitchPolicy, events: list[CrossingEvent],
          switch_count: int) -> tuple[int, CrossingEvent]:
    if isinstance(policy, FirstHit):
        return 0, events[0]
    if isinstance(policy, NthHit):
        return policy.n - 1, events[policy.n - 1]
    if isinstance(policy, RandomHit):
        rng = seeded_rng(policy.seed, "switch", str(switch_count))
        idx = int(rng.integers(0, len(events)))
        return idx, events[idx]
    raise ValueError("Branching selects no single crossing; use accessible_set")


def simulate(system: RelaySystem, x0, k0: int = 0, levels=None,
             policy: SwitchPolicy = FirstHit(), *,
             max_switches: int | None = None, t_max: float | None = None,
             settings: EventSettings = DEFAULT_EVENTS) -> Trajectory:
    """Run the switching dynamics from (x0, mode k0) until a stop criterion.

    At least one of max_switches / t_max must bound the run.
    """
    if max_switches is None and t_max is None:
        raise ValueError("need max_switches or t_max as a stop criterion")
    lv = system.levels() if levels is None else np.asarray(levels, float)
    if not 0 <= k0 < system.p:
        raise ValueError(f"mode k0={k0} outside 0..{system.p - 1}")
    x = np.asarray(x0, float)
    mode = k0
    t_abs = 0.0
    segments: list[Segment] = []
    switches: list[SwitchEvent] = []
    arcs: list[FlowArc] = []

    while True:
        if max_switches is not None and len(switches) >= max_switches:
            break
        need = policy.n if isinstance(policy, NthHit) else 1
        try:
            events, arc = _watched_events(system, lv, x, mode, need, settings)
        except NoCrossingWithinHorizon:
            if t_max is not None and t_abs < t_max:
                # park the trajectory at the time cap instead of failing
                flow = system.flows[mode]
                dur = min(t_max - t_abs, _WINDOW_GROWTH[-1] * flow.horizon)
                arc = integrate(flow, dur, x)
                xe = arc.end
                segments.append(Segment(mode, t_abs, dur, x, xe))
                arcs.append(arc)
                break
            raise
        idx, ev = _pick(policy, events, len(switches))
        if t_max is not None and t_abs + ev.t > t_max:
            dur = t_max - t_abs
            xe = arc(dur) if dur > 0 else x.copy()
            segments.append(Segment(mode, t_abs, dur, x, xe))
            arcs.append(arc)
            break
        segments.append(Segment(mode, t_abs, ev.t, x, ev.point))
        arcs.append(arc)
        switches.append(SwitchEvent(t_abs + ev.t, ev.point, mode,
                                    (mode + 1) % system.p, idx, ev.margin))
        x = ev.point
        mode = (mode + 1) % system.p
        t_abs += ev.t
        if t_max is not None and t_abs >= t_max:
            break

    return Trajectory(k0, lv, segments, switches, arcs)


# ---------------------------------------------------------------------------
# Reachability clouds
# ---------------------------------------------------------------------------

@dataclass
class PointCloud:
    """Sampled trajectory points with recorded along-arc adjacency."""

    points: np.ndarray                  # (N, n)
    edges: list[tuple[int, int]]
    depths: np.ndarray                  # switches completed before each point

    def __len__(self) -> int:
        return len(self.points)


def _arc_sample_times(arc: FlowArc, flow: Flow, delta_s: float,
                      extra: list[float]) -> np.ndarray:
    """Arc-length paced parameters plus mandatory event times, sorted."""
    ts = [0.0]
    t = 0.0
    while t < arc.duration:
        speed = float(np.linalg.norm(flow.field(arc(t))))
        dt = delta_s / max(speed, delta_s / arc.duration)
        t = min(t + dt, arc.duration)
        ts.append(t)
    ts.extend(e for e in extra if 0.0 <= e <= arc.duration)
    return np.unique(np.asarray(ts))


@dataclass
class _Branch:
    x: np.ndarray
    mode: int
    depth: int
    parent_point: int | None   # cloud index the branch grew from
    order: tuple[int, ...]     # (crossing indices along the ancestry), for pruning


def _expand_cloud(system: RelaySystem, x0, k0: int, levels, total_depth: int,
                  breadth: int, delta_s: float | None, record_from: int,
                  settings: EventSettings) -> PointCloud:
    lv = system.levels() if levels is None else np.asarray(levels, float)
    if delta_s is None:
        delta_s = system.diameter / 512.0
    pts: list[np.ndarray] = []
    depths: list[int] = []
    edges: list[tuple[int, int]] = []
    level_branches = [_Branch(np.asarray(x0, float), k0, 0, None, ())]

    for depth in range(total_depth + 1):
        level_branches.sort(key=lambda b: b.order)
        level_branches = level_branches[:breadth]
        next_branches: list[_Branch] = []
        for br in level_branches:
            flow = system.flows[br.mode]
            watch = (br.mode + 1) % system.p
            try:
                evs, arc = _watched_events(system, lv, br.x, br.mode, 1, settings)
            except NoCrossingWithinHorizon:
                # stuck branch: keep one horizon of its arc, spawn nothing
                evs, arc = [], integrate(flow, flow.horizon, br.x)
            record = br.depth >= record_from
            ev_times = [e.t for e in evs]
            index_of_time: dict[float, int] = {}
            if record:
                ts = _arc_sample_times(arc, flow, delta_s, ev_times)
                states = arc.sample(ts)
                base = len(pts)
                pts.extend(states)
                depths.extend([br.depth] * len(ts))
                edges.extend((base + i, base + i + 1) for i in range(len(ts) - 1))
                if br.parent_point is not None:
                    edges.append((br.parent_point, base))
                for et in ev_times:
                    j = int(np.searchsorted(ts, et))
                    index_of_time[et] = base + min(j, len(ts) - 1)
            if depth < total_depth:
                for ci, e in enumerate(evs):
                    next_branches.append(_Branch(
                        e.point, watch, br.depth + 1,
                        index_of_time.get(e.t), br.order + (ci,)))
        level_branches = next_branches

    points = np.array(pts) if pts else np.empty((0, system.n))
    return PointCloud(points, edges, np.asarray(depths, dtype=int))


def accessible_set(system: RelaySystem, x0, k0: int = 0, levels=None,
                   depth: int = 0, breadth: int = 64,
                   delta_s: float | None = None,
                   settings: EventSettings = DEFAULT_EVENTS) -> PointCloud:
    """Branching reach cloud: all policy choices up to `depth` switches.

    Breadth is capped per switching level with deterministic pruning (the
    branches with lexicographically lowest crossing indices survive).
    """
    return _expand_cloud(system, x0, k0, levels, depth, breadth, delta_s,
                         record_from=0, settings=settings)


def omega_limit_estimate(system: RelaySystem, x0, k0: int = 0, levels=None,
                         m_discard: int = 0, depth: int = 0, breadth: int = 64,
                         delta_s: float | None = None,
                         settings: EventSettings = DEFAULT_EVENTS) -> PointCloud:
    """Reach cloud restricted to states past the first m_discard switches.

    Increasing m_discard peels transients, approximating the limit set from
    outside; the sampler can only under-approximate the set of all
    trajectories, so treat the cloud as a witness, not a certificate.
    """
    return _expand_cloud(system, x0, k0, levels, m_discard + depth, breadth,
                         delta_s, record_from=m_discard, settings=settings)


def strict_mode_check(system: RelaySystem, traj: Trajectory,
                      samples_per_segment: int = 256,
                      tol: float = 1e-9) -> tuple[bool, float]:
    """Post-hoc check of the stricter trajectory notion: while in mode k the
    state never enters the interior of the watched region.

    Returns (holds, worst interior excess). Reported only; no simulation
    path filters on it (first-hit runs satisfy it by construction, later-hit
    policies generally do not).
    """
    worst = 0.0
    for seg, arc in zip(traj.segments, traj.arcs):
        if seg.duration <= 0:
            continue
        watch = (seg.mode + 1) % system.p
        region = system.chain_region(watch, traj.levels)
        taus = np.linspace(0.0, seg.duration, samples_per_segment)
        vals = region.f.evaluate(arc.sample(taus)) - float(traj.levels[watch])
        worst = max(worst, float(vals.max()))
    return worst <= tol, worst


def check_connected(cloud: PointCloud, delta: float) -> tuple[bool, int]:
    """Is the cloud one component when points within delta are joined?

    Recorded along-arc adjacencies count as edges regardless of distance.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("empty cloud")
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for a, b in cloud.edges:
        union(a, b)
    tree = cKDTree(cloud.points)
    for a, b in tree.query_pairs(delta):
        union(a, b)
    roots = {find(i) for i in range(n)}
    return len(roots) == 1, len(roots)
