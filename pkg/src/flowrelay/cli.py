"""Command-line interface: config loading, command dispatch, report export.

Every run writes one JSON report (plus CSV/JSON data files) into the output
directory. Reports contain no timestamps and all randomness flows from the
--seed flag, so identical (config, command, seed) triples produce
byte-identical outputs.

Exit codes: 0 success, 1 usage/config error, 2 hypothesis-validation
failure, 3 numeric failure (no convergence, degenerate crossing, stalled
continuation, integration failure).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import events as ev
from . import geometry as geo
from . import periodic as per
from . import relay
from .dynamics import Flow, VectorField
from .errors import (BoundaryNotFound, ConfigError, ContinuationStalled,
                     DegenerateCrossing, DegenerateJacobian, FlowRelayError,
                     IntegrationError, NoConvergence, NoCrossingWithinHorizon,
                     ParseError)
from .expr import parse as parse_expr

__all__ = ["load_config", "main"]

_NUMERIC_ERRORS = (NoConvergence, DegenerateCrossing, DegenerateJacobian,
                   ContinuationStalled, IntegrationError,
                   NoCrossingWithinHorizon, BoundaryNotFound)


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def _req(doc: dict, key: str, kind, path: str):
    if key not in doc:
        raise ConfigError(f"{path}{key}", "missing")
    val = doc[key]
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind):
        raise ConfigError(f"{path}{key}", f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def _parse_field(text, n: int, path: str):
    if not isinstance(text, str):
        raise ConfigError(path, f"expected an expression string, got {type(text).__name__}")
    try:
        return parse_expr(text, n)
    except ParseError as exc:
        raise ConfigError(path, str(exc)) from exc


def load_config(path: str | Path) -> geo.RelaySystem:
    """Load and validate a JSON system config into a RelaySystem."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "file not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(str(path), "top level must be an object")

    n = _req(doc, "dimension", int, "")
    p = _req(doc, "p", int, "")
    box = _req(doc, "bounding_box", list, "")
    flows_doc = _req(doc, "flows", list, "")
    regions_doc = _req(doc, "regions", list, "")
    if len(flows_doc) != p:
        raise ConfigError("flows", f"expected {p} entries, got {len(flows_doc)}")
    if len(regions_doc) != p:
        raise ConfigError("regions", f"expected {p} entries, got {len(regions_doc)}")

    flows = []
    for k, fd in enumerate(flows_doc):
        prefix = f"flows[{k}]."
        if not isinstance(fd, dict):
            raise ConfigError(f"flows[{k}]", "expected an object")
        comps = _req(fd, "field", list, prefix)
        if len(comps) != n:
            raise ConfigError(f"{prefix}field", f"expected {n} components, got {len(comps)}")
        exprs = [_parse_field(c, n, f"{prefix}field[{j}]") for j, c in enumerate(comps)]
        horizon = _req(fd, "T", float, prefix)
        integ = fd.get("integrator", {})
        if not isinstance(integ, dict):
            raise ConfigError(f"{prefix}integrator", "expected an object")
        try:
            flows.append(Flow(VectorField(exprs, label=k + 1), horizon,
                              rtol=float(integ.get("rtol", 1e-10)),
                              atol=float(integ.get("atol", 1e-12)),
                              max_step=float(integ.get("max_step", np.inf)),
                              method=str(integ.get("method", "DOP853"))))
        except ValueError as exc:
            raise ConfigError(f"flows[{k}]", str(exc)) from exc

    regions = []
    for i, rd in enumerate(regions_doc):
        prefix = f"regions[{i}]."
        if not isinstance(rd, dict):
            raise ConfigError(f"regions[{i}]", "expected an object")
        f = _parse_field(_req(rd, "f", str, prefix), n, f"{prefix}f")
        level = float(rd.get("lambda", 0.0))
        regions.append(geo.Region(f, level, index=i))

    level_p = doc.get("lambda_p")
    beta = doc.get("beta")
    try:
        return geo.RelaySystem(
            n=n, p=p, flows=tuple(flows), regions=tuple(regions), box=box,
            level_p=None if level_p is None else float(level_p),
            beta=None if beta is None else int(beta))
    except ValueError as exc:
        raise ConfigError(str(path), str(exc)) from exc


# ---------------------------------------------------------------------------
# Report / file helpers
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")


def _write_report(outdir: Path, command: str, config_path: Path, seed: int,
                  outcome: str, metrics: dict, artifacts: list[str]) -> Path:
    report = {
        "command": command,
        "config": str(config_path),
        "config_sha256": hashlib.sha256(config_path.read_bytes()).hexdigest(),
        "seed": seed,
        "outcome": outcome,
        "metrics": metrics,
        "artifacts": artifacts,
        "version": __version__,
    }
    path = outdir / f"{command}_report.json"
    _write_json(path, report)
    return path


def _parse_vector(text: str, name: str, length: int | None = None) -> np.ndarray:
    try:
        vec = np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise ConfigError(name, f"expected comma-separated numbers, got {text!r}") from exc
    if length is not None and len(vec) != length:
        raise ConfigError(name, f"expected {length} values, got {len(vec)}")
    return vec


def _resolve_levels(system: geo.RelaySystem, args) -> np.ndarray:
    if args.levels is None:
        return system.levels()
    return _parse_vector(args.levels, "--lambda", system.p + 1)


def _sample_trajectory(traj: relay.Trajectory, per_segment: int = 256):
    """Rows (t, mode, x1..xn) sampled uniformly inside each segment."""
    rows = []
    for seg, arc in zip(traj.segments, traj.arcs):
        taus = np.linspace(0.0, seg.duration, per_segment)
        states = arc.sample(taus) if seg.duration > 0 else np.array([seg.x0])
        for tau, state in zip(taus, states):
            rows.append([seg.t0 + tau, seg.mode, *state])
    return rows


def _write_csv(path: Path, header: list[str], rows) -> int:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                             else v for v in row])
    return len(rows)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_validate(args, system, levels, outdir: Path) -> int:
    report = geo.validate_system(system, levels, m=args.samples,
                                 grid=args.grid, seed=args.seed)
    payload = report.to_dict()
    _write_json(outdir / "validation.json", payload)
    outcome = "ok" if report.passed else "validation_failed"
    _write_report(outdir, "validate", Path(args.config), args.seed, outcome,
                  {"passed": report.passed,
                   "failures": [list(f) for f in report.failures]},
                  ["validation.json"])
    for c in report.conditions:
        print(f"{c.name}[{c.index}] {'pass' if c.passed else 'FAIL'} "
              f"margin={c.margin:.6g}{' ' + c.note if c.note else ''}")
    return 0 if report.passed else 2


def _cmd_simulate(args, system, levels, outdir: Path) -> int:
    if args.max_switches is None and args.t_max is None:
        raise ConfigError("simulate", "need --max-switches or --t-max")
    x0 = _parse_vector(args.x0, "--x0", system.n)
    if args.policy == "first":
        policy = relay.FirstHit()
    elif args.policy.startswith("nth:"):
        try:
            policy = relay.NthHit(int(args.policy.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError("--policy", f"bad hit index in {args.policy!r}") from exc
    elif args.policy == "random":
        policy = relay.RandomHit(args.seed)
    else:
        raise ConfigError("--policy", f"unknown policy {args.policy!r}")
    traj = relay.simulate(system, x0, args.k0, levels, policy,
                          max_switches=args.max_switches, t_max=args.t_max)
    strict, strict_excess = relay.strict_mode_check(system, traj)
    rows = _sample_trajectory(traj)
    count = _write_csv(outdir / "trajectory.csv",
                       ["t", "mode"] + [f"x{i + 1}" for i in range(system.n)],
                       rows)
    switches = [{"time": s.time, "point": list(s.point),
                 "mode_before": s.mode_before, "mode_after": s.mode_after,
                 "crossing_index": s.crossing_index, "margin": s.margin}
                for s in traj.switches]
    _write_json(outdir / "switches.json", switches)
    _write_report(outdir, "simulate", Path(args.config), args.seed, "ok",
                  {"switches": len(traj.switches), "rows": count,
                   "final_time": traj.final_time,
                   "final_state": list(traj.final_state),
                   "strict_mode": strict,
                   "strict_mode_excess": strict_excess},
                  ["trajectory.csv", "switches.json"])
    print(f"{len(traj.switches)} switches, final time {traj.final_time:.6g}")
    return 0


def _cmd_crossings(args, system, levels, outdir: Path) -> int:
    if not 1 <= args.flow <= system.p:
        raise ConfigError("--flow", f"flow index must lie in 1..{system.p}")
    if not 0 <= args.region <= system.p:
        raise ConfigError("--region", f"region index must lie in 0..{system.p}")
    x0 = _parse_vector(args.x0, "--x0", system.n)
    flow = system.flows[args.flow - 1]
    region = system.chain_region(args.region, levels)
    evs = ev.find_crossings(flow, region, float(levels[args.region]), x0,
                            args.window, backward=args.backward)
    rows = [[e.t, *e.point, e.direction, e.margin] for e in evs]
    count = _write_csv(outdir / "crossings.csv",
                       ["t"] + [f"x{i + 1}" for i in range(system.n)]
                       + ["direction", "margin"], rows)
    _write_report(outdir, "crossings", Path(args.config), args.seed, "ok",
                  {"count": count,
                   "times": [e.t for e in evs],
                   "flow": args.flow, "region": args.region,
                   "window": args.window, "backward": args.backward},
                  ["crossings.csv"])
    print(f"{count} crossing(s): {[round(e.t, 6) for e in evs]}")
    return 0


def _cmd_find_periodic(args, system, levels, outdir: Path) -> int:
    opts = per.SolveOptions(max_seeds=args.seeds, seed=args.seed)
    metrics: dict = {}
    if args.continue_from is not None:
        lv_from = _parse_vector(args.continue_from, "--continue-from",
                                system.p + 1)
        found = per.find_periodic(system, lv_from, opts=opts)
        path = per.continue_levels(system, found[0].sv, lv_from, levels,
                                   opts=opts)
        orbits = [path.orbit]
        metrics["continuation_steps"] = len(path.steps)
        metrics["levels_from"] = list(lv_from)
    else:
        orbits = per.find_periodic(system, levels, opts=opts)
    _write_json(outdir / "orbits.json", [o.to_dict() for o in orbits])
    metrics.update({
        "orbits": len(orbits),
        "residuals": [o.residual_norm for o in orbits],
        "periods": [o.period for o in orbits],
        "closures": [o.verification.closure for o in orbits
                     if o.verification is not None],
    })
    _write_report(outdir, "find-periodic", Path(args.config), args.seed, "ok",
                  metrics, ["orbits.json"])
    print(f"{len(orbits)} orbit(s); periods "
          f"{[round(o.period, 6) for o in orbits]}")
    return 0


def _cmd_degree_check(args, system, levels, outdir: Path) -> int:
    res = ev.degree_check(system, levels, samples=args.samples, seed=args.seed)
    payload = res.to_dict()
    start = [v for v in res.start_parities if v is not None]
    end = [v for v in res.end_parities if v is not None]
    payload["start_parity_uniform"] = sorted(set(start))
    payload["end_parity_uniform"] = sorted(set(end))
    _write_json(outdir / "degree_check.json", payload)
    _write_report(outdir, "degree-check", Path(args.config), args.seed, "ok",
                  payload, ["degree_check.json"])
    print(f"start parities {sorted(set(start))}, end parities {sorted(set(end))}, "
          f"degenerate rate {res.degenerate_rate:.3f}")
    return 0


def _cmd_accessible(args, system, levels, outdir: Path) -> int:
    x0 = _parse_vector(args.x0, "--x0", system.n)
    cloud = relay.accessible_set(system, x0, args.k0, levels,
                                 depth=args.depth, breadth=args.breadth)
    delta_s = system.diameter / 512.0
    connected, ncomp = relay.check_connected(cloud, 2.0 * delta_s)
    rows = [[*pt, int(d)] for pt, d in zip(cloud.points, cloud.depths)]
    count = _write_csv(outdir / "points.csv",
                       [f"x{i + 1}" for i in range(system.n)] + ["depth"], rows)
    _write_report(outdir, "accessible", Path(args.config), args.seed, "ok",
                  {"points": count, "depth": args.depth,
                   "breadth": args.breadth, "connected": connected,
                   "components": ncomp, "delta": 2.0 * delta_s},
                  ["points.csv"])
    print(f"{count} points, {ncomp} component(s) at delta={2 * delta_s:.4g}")
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "simulate": _cmd_simulate,
    "crossings": _cmd_crossings,
    "find-periodic": _cmd_find_periodic,
    "degree-check": _cmd_degree_check,
    "accessible": _cmd_accessible,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowrelay",
        description="Cyclic relays of smooth flows: validation, simulation, "
                    "crossing parities, periodic-orbit shooting.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="system config (JSON)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--lambda", dest="levels", default=None,
                        help="level offsets v0,v1,...,vp (overrides config)")

    sp = sub.add_parser("validate", help="check the switching hypotheses")
    common(sp)
    sp.add_argument("--samples", type=int, default=256)
    sp.add_argument("--grid", type=int, default=16)

    sp = sub.add_parser("simulate", help="run the switching dynamics")
    common(sp)
    sp.add_argument("--x0", required=True, help="start point a,b,...")
    sp.add_argument("--k0", type=int, default=0, help="start mode (0-based)")
    sp.add_argument("--policy", default="first", help="first | nth:N | random")
    sp.add_argument("--max-switches", type=int, default=None)
    sp.add_argument("--t-max", type=float, default=None)

    sp = sub.add_parser("crossings", help="boundary crossings of one flow arc")
    common(sp)
    sp.add_argument("--flow", type=int, required=True, help="flow index 1..p")
    sp.add_argument("--region", type=int, required=True, help="region index 0..p")
    sp.add_argument("--x0", required=True)
    sp.add_argument("--window", type=float, required=True)
    sp.add_argument("--backward", action="store_true")

    sp = sub.add_parser("find-periodic", help="shoot for periodic orbits")
    common(sp)
    sp.add_argument("--seeds", type=int, default=32, help="max auto seeds")
    sp.add_argument("--continue-from", default=None,
                    help="level offsets to solve at first, then continue to "
                         "the target offsets")

    sp = sub.add_parser("degree-check", help="boundary-sample crossing parities")
    common(sp)
    sp.add_argument("--samples", type=int, default=20)

    sp = sub.add_parser("accessible", help="branching reach cloud")
    common(sp)
    sp.add_argument("--x0", required=True)
    sp.add_argument("--k0", type=int, default=0)
    sp.add_argument("--depth", type=int, default=0)
    sp.add_argument("--breadth", type=int, default=64)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        system = load_config(args.config)
        levels = _resolve_levels(system, args)
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args, system, levels, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except FlowRelayError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
