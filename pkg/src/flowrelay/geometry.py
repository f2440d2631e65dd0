"""Level-set regions and relay-system hypothesis validation.

A region is the superlevel set {x : f(x) >= level} of a smooth expression;
its switching boundary is the level set {f = level}. A relay system bundles
p flows with p regions (the chain closes on a copy of region 0 that may
carry its own level offset), a bounding box for all sampling, and an
optional distinguished flow index whose containment must persist for all
later times.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .dynamics import Flow, flow_map_points
from .errors import BoundaryNotFound
from ._util import seeded_rng

__all__ = [
    "Region",
    "RelaySystem",
    "BoundarySamples",
    "ConditionResult",
    "ValidationReport",
    "signed_level",
    "sample_boundary",
    "saturate_level",
    "validate_system",
]


@dataclass
class Region:
    """Superlevel-set region {f >= level} with boundary {f = level}."""

    f: ex.Expression
    level: float = 0.0
    index: int = 0
    eps_reg: float = 1e-6  # floor on |grad f| at sampled boundary points


def signed_level(region: Region, x, level: float | None = None):
    """f(x) - level: positive inside, zero on the boundary, negative outside."""
    lv = region.level if level is None else level
    return region.f.evaluate(x) - lv


@dataclass
class BoundarySamples:
    """Boundary points with their gradient norms (regularity witnesses)."""

    points: np.ndarray      # (m, n)
    grad_norms: np.ndarray  # (m,)

    def __len__(self) -> int:
        return len(self.points)


def sample_boundary(region: Region, box: np.ndarray, m: int, seed: int = 0,
                    *, level: float | None = None, tol: float = 1e-10,
                    max_batches: int = 20, newton_iters: int = 80) -> BoundarySamples:
    """Draw m points on {f = level} inside the box.

    Random box points are projected onto the level set by Newton steps along
    the gradient; points that leave the box, stall, or land where the
    gradient is below the regularity floor are discarded.
    """
    lv = region.level if level is None else level
    box = np.asarray(box, float)
    lo, hi = box[0], box[1]
    n = len(lo)
    rng = seed if isinstance(seed, np.random.Generator) else seeded_rng(seed, "boundary", str(region.index))
    points: list[np.ndarray] = []
    norms: list[float] = []
    for _ in range(max_batches):
        batch = rng.uniform(lo, hi, size=(max(4 * m, 32), n))
        x = batch.copy()
        for _ in range(newton_iters):
            r = region.f.evaluate(x) - lv
            g = region.f.gradient(x)
            gn2 = np.einsum("ij,ij->i", g, g)
            gn2 = np.where(gn2 > 0, gn2, 1.0)
            step = (r / gn2)[:, None] * g
            np.clip(step, -1.0, 1.0, out=step)  # guard wild first steps
            x = x - step
            if np.all(np.abs(region.f.evaluate(x) - lv) <= tol):
                break
        r = np.abs(region.f.evaluate(x) - lv)
        g = region.f.gradient(x)
        gn = np.sqrt(np.einsum("ij,ij->i", g, g))
        ok = (r <= tol) & (gn >= region.eps_reg)
        ok &= np.all((x >= lo - 1e-12) & (x <= hi + 1e-12), axis=1)
        for i in np.flatnonzero(ok):
            points.append(x[i])
            norms.append(float(gn[i]))
            if len(points) == m:
                return BoundarySamples(np.array(points), np.array(norms))
    raise BoundaryNotFound(
        f"no boundary of region {region.index} at level {lv} found in the box "
        f"after {max_batches} batches")


def saturate_level(e: ex.Expression, eps: float) -> ex.Expression:
    """Compose a smooth odd saturation with e: (eps/3)*tanh(3*e/eps).

    The result has the same zero set as e, unit slope there, and magnitude
    bounded by eps/3 everywhere, so every level near zero stays close to
    the original boundary.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    root = ex.Mul(ex.Num(eps / 3.0),
                  ex.Fun("tanh", ex.Mul(ex.Num(3.0 / eps), e.root)))
    return ex.Expression(root, e.n)


@dataclass
class RelaySystem:
    """A cyclic relay: p flows, p regions, a bounding box.

    Regions are indexed 0..p-1; index p denotes the closing copy of region 0
    at its own level offset level_p. Flow k (0-based) carries boundary k to
    boundary k+1.
    """

    n: int
    p: int
    flows: tuple[Flow, ...]
    regions: tuple[Region, ...]
    box: np.ndarray
    level_p: float | None = None
    beta: int | None = None  # 1-based flow index with persistent containment

    def __post_init__(self):
        if self.p <= 1:
            raise ValueError("the relay needs p > 1 modes")
        if self.n < 2:
            raise ValueError("dimension must be at least 2")
        self.flows = tuple(self.flows)
        self.regions = tuple(self.regions)
        if len(self.flows) != self.p or len(self.regions) != self.p:
            raise ValueError("flows and regions must both have length p")
        for k, fl in enumerate(self.flows):
            if fl.field.n != self.n:
                raise ValueError(f"flow {k} has dimension {fl.field.n}, expected {self.n}")
        for r in self.regions:
            if r.f.n != self.n:
                raise ValueError(f"region {r.index} has dimension {r.f.n}, expected {self.n}")
        self.box = np.asarray(self.box, float)
        if self.box.shape != (2, self.n):
            raise ValueError(f"bounding box must be 2x{self.n}")
        if self.level_p is None:
            self.level_p = self.regions[0].level
        if self.beta is not None and not 1 <= self.beta <= self.p:
            raise ValueError("beta must lie in 1..p")

    def levels(self) -> np.ndarray:
        """Stored level offsets (level_0, ..., level_{p-1}, level_p)."""
        return np.array([r.level for r in self.regions] + [self.level_p])

    def chain_region(self, j: int, levels=None) -> Region:
        """Region for chain index j in 0..p (j = p reuses f_0 at level_p)."""
        if not 0 <= j <= self.p:
            raise ValueError(f"chain index {j} outside 0..{self.p}")
        lv = self.levels() if levels is None else np.asarray(levels, float)
        base = self.regions[j] if j < self.p else self.regions[0]
        return Region(base.f, float(lv[j]), index=j, eps_reg=base.eps_reg)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box[1] - self.box[0]))


@dataclass
class ConditionResult:
    """One validated hypothesis with its robustness margin (positive = pass)."""

    name: str          # "disjoint" | "entry" | "absorb" | "regular"
    index: int         # k for disjoint/entry (1..p), region index for regular
    passed: bool
    margin: float
    note: str = ""


@dataclass
class ValidationReport:
    conditions: list[ConditionResult]
    levels: np.ndarray
    samples: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    @property
    def failures(self) -> list[tuple[str, int]]:
        return [(c.name, c.index) for c in self.conditions if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "levels": [float(v) for v in self.levels],
            "samples": self.samples,
            "conditions": [
                {"name": c.name, "index": c.index, "passed": c.passed,
                 "margin": float(c.margin), "note": c.note}
                for c in self.conditions
            ],
        }


def _interior_samples(region: Region, box: np.ndarray, m: int,
                      rng: np.random.Generator, level: float) -> np.ndarray:
    lo, hi = box[0], box[1]
    keep: list[np.ndarray] = []
    for _ in range(200):
        batch = rng.uniform(lo, hi, size=(max(4 * m, 64), len(lo)))
        vals = region.f.evaluate(batch) - level
        inside = batch[vals >= 0.0]
        keep.extend(inside)
        if len(keep) >= m:
            return np.array(keep[:m])
    raise BoundaryNotFound(f"region {region.index} has no interior in the box")


def validate_system(system: RelaySystem, levels=None, m: int = 256,
                    grid: int = 16, seed: int = 0,
                    t_max: float | None = None) -> ValidationReport:
    """Check the switching hypotheses by sampling, reporting worst margins.

    - disjoint (k=1..p): boundary k-1 stays strictly outside region k;
    - entry   (k=1..p): flow k carries boundary k-1 into the interior of
      region k at its horizon;
    - absorb (if beta set): flow beta keeps all of region beta-1 inside
      region beta for every time in [horizon, t_max];
    - regular (j=0..p): gradient norms on sampled boundaries stay above
      the regularity floor.

    Margins are oriented so that positive means the condition holds with
    room; these are open conditions, so sampling + margins is the check.
    """
    lv = system.levels() if levels is None else np.asarray(levels, float)
    if lv.shape != (system.p + 1,):
        raise ValueError(f"levels must have length p+1 = {system.p + 1}")
    conditions: list[ConditionResult] = []

    boundary: dict[int, BoundarySamples] = {}
    for j in range(system.p + 1):
        region_j = system.chain_region(j, lv)
        try:
            bs = sample_boundary(region_j, system.box, m,
                                 seeded_rng(seed, "validate", str(j)))
            boundary[j] = bs
            conditions.append(ConditionResult(
                "regular", j, bool(bs.grad_norms.min() >= region_j.eps_reg),
                float(bs.grad_norms.min())))
        except BoundaryNotFound as exc:
            conditions.append(ConditionResult("regular", j, False,
                                              float("-inf"), note=str(exc)))

    for k in range(1, system.p + 1):
        region_k = system.chain_region(k, lv)
        src = boundary.get(k - 1)
        if src is None:
            conditions.append(ConditionResult("disjoint", k, False, float("-inf"),
                                              note="no source boundary samples"))
            conditions.append(ConditionResult("entry", k, False, float("-inf"),
                                              note="no source boundary samples"))
            continue
        vals = region_k.f.evaluate(src.points) - lv[k]
        conditions.append(ConditionResult(
            "disjoint", k, bool(vals.max() < 0.0), float(-vals.max())))

        flow_k = system.flows[k - 1]
        mapped = flow_map_points(flow_k, flow_k.horizon, src.points)
        vals_T = region_k.f.evaluate(mapped) - lv[k]
        conditions.append(ConditionResult(
            "entry", k, bool(vals_T.min() > 0.0), float(vals_T.min())))

    if system.beta is not None:
        b = system.beta
        flow_b = system.flows[b - 1]
        region_b = system.chain_region(b, lv)
        src_region = system.chain_region(b - 1, lv)
        rng = seeded_rng(seed, "validate-absorb")
        pts = _interior_samples(src_region, system.box, m, rng, lv[b - 1])
        if b - 1 in boundary:
            pts = np.vstack([pts, boundary[b - 1].points])
        tm = 2.0 * flow_b.horizon if t_max is None else t_max
        t_eval = np.linspace(flow_b.horizon, tm, grid)
        states = flow_map_points(flow_b, tm, pts, t_eval=t_eval)
        vals = region_b.f.evaluate(states.reshape(-1, system.n)) - lv[b]
        conditions.append(ConditionResult(
            "absorb", b, bool(vals.min() > 0.0), float(vals.min())))

    return ValidationReport(conditions, lv, m)
