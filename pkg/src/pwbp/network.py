"""Road network graph: arcs, movements, phases and fictitious source arcs.

A network is built from a config document (see ``docs/config_schema.md``).
Exogenous inflows are represented by zero-length source arcs holding point
queues. Boundary inflows attach a source arc directly to the declared node;
interior inflows split the host arc at the inflow position and insert an
unsignalized merge node.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping

SCHEMA_VERSION = 1

DEFAULT_FD = {"v_free": 15.0, "wave_speed": 5.0, "jam_density": 0.15}
DEFAULT_CADENCE = 10.0
DEFAULT_CELL_LENGTH = 20.0
DEFAULT_STARTUP_TIME = 2.0
SOURCE_SATURATION_PER_LANE = 0.5  # veh/s/lane of the successor arc
CFL_SAFETY = 0.9


class ConfigError(ValueError):
    """Raised when a config document or network fails validation."""

    def __init__(self, message: str, *, arc: str | None = None):
        super().__init__(message)
        self.arc = arc


@dataclass(frozen=True)
class FundamentalDiagram:
    """Triangular flow-density relation, parameters per lane.

    ``cv`` optionally maps a parameter name to its coefficient of variation
    for the stochastic mode; the stored values are then the means.
    """

    v_free: float
    wave_speed: float
    jam_density: float
    cv: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("v_free", "wave_speed", "jam_density"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"fundamental diagram {name} must be positive, got {value}")
        for name, value in self.cv.items():
            if name not in ("v_free", "wave_speed", "jam_density"):
                raise ConfigError(f"unknown fundamental diagram parameter {name!r} in cv")
            if value < 0:
                raise ConfigError(f"coefficient of variation for {name} must be >= 0")

    @property
    def critical_density(self) -> float:
        return self.wave_speed * self.jam_density / (self.v_free + self.wave_speed)

    @property
    def capacity(self) -> float:
        return self.v_free * self.critical_density

    @property
    def is_stochastic(self) -> bool:
        return any(v > 0 for v in self.cv.values())


@dataclass(frozen=True)
class Arc:
    id: str
    tail: str | None
    head: str | None
    length: float
    lanes: int
    fd: FundamentalDiagram | None
    is_source: bool = False
    cell_count: int = 1
    source_capacity: float | None = None

    @property
    def cell_length(self) -> float:
        return self.length / self.cell_count

    @property
    def jam_density(self) -> float:
        """Jam density summed over lanes (veh/m); infinite for source arcs."""
        if self.is_source:
            return math.inf
        return self.fd.jam_density * self.lanes

    @property
    def capacity(self) -> float:
        """Arc capacity summed over lanes (veh/s)."""
        if self.is_source:
            return self.source_capacity if self.source_capacity is not None else math.inf
        return self.fd.capacity * self.lanes


@dataclass(frozen=True)
class Movement:
    id: str
    from_arc: str
    to_arc: str
    node: str
    c: float = 1.0


@dataclass(frozen=True)
class Phase:
    id: str
    node: str
    movements: tuple[str, ...]


@dataclass(frozen=True)
class Node:
    id: str
    cadence: float = DEFAULT_CADENCE
    signalized: bool = True


@dataclass(frozen=True)
class ArrivalSpec:
    """Arrival process of one source arc.

    ``profiles`` maps destination arc -> tuple of (start_time, rate) steps;
    the rate is piecewise constant and the first step starts at t=0.
    """

    source: str
    profiles: Mapping[str, tuple[tuple[float, float], ...]]
    process: str = "poisson"

    def rate(self, dest: str, t: float) -> float:
        current = 0.0
        for start, value in self.profiles[dest]:
            if t + 1e-9 >= start:
                current = value
            else:
                break
        return current


@dataclass(frozen=True)
class Network:
    """Validated, immutable network graph."""

    nodes: Mapping[str, Node]
    arcs: Mapping[str, Arc]
    movements: Mapping[str, Movement]
    phases: Mapping[str, tuple[Phase, ...]]
    arrivals: Mapping[str, ArrivalSpec]
    splits: Mapping[str, tuple[tuple[float, Mapping[str, float]], ...]]
    initial_densities: Mapping[str, Mapping[str, tuple[float, ...]]]
    initial_queues: Mapping[str, Mapping[str, float]]
    dt: float
    horizon: float
    startup_time: float = DEFAULT_STARTUP_TIME
    metrics_stride: int = 1
    controller: Mapping[str, Any] = field(default_factory=dict)
    extra: Mapping[str, Any] = field(default_factory=dict)

    # -- topology -----------------------------------------------------------
    def movements_at(self, node: str) -> list[Movement]:
        return [m for m in self.movements.values() if m.node == node]

    def out_movements(self, arc: str) -> list[Movement]:
        return [m for m in self.movements.values() if m.from_arc == arc]

    def in_movements(self, arc: str) -> list[Movement]:
        return [m for m in self.movements.values() if m.to_arc == arc]

    def commodities(self, arc: str) -> list[str]:
        """Destination arcs that partition the density on ``arc``.

        Exit arcs carry a single commodity named ``""`` (leaving the network).
        """
        succ = [m.to_arc for m in self.out_movements(arc)]
        return succ if succ else [""]

    @property
    def source_arcs(self) -> list[str]:
        return [a.id for a in self.arcs.values() if a.is_source]

    @property
    def physical_arcs(self) -> list[str]:
        return [a.id for a in self.arcs.values() if not a.is_source]

    @property
    def exit_arcs(self) -> list[str]:
        return [a for a in self.physical_arcs if not self.out_movements(a)]

    def split(self, arc: str, t: float = 0.0) -> dict[str, float]:
        """Turning fractions pi_{arc,b} in force at time ``t``."""
        current = None
        for start, table in self.splits[arc]:
            if current is None or t + 1e-9 >= start:
                current = table
        return dict(current)


def predecessors(g: Network, arc: str) -> set[str]:
    """Arcs feeding ``arc`` through the node at its upstream end."""
    if arc not in g.arcs:
        raise KeyError(f"unknown arc {arc!r}")
    a = g.arcs[arc]
    if a.is_source or a.tail is None:
        return set()
    return {x.id for x in g.arcs.values() if x.head == a.tail}


def successors(g: Network, arc: str) -> set[str]:
    """Arcs leaving the node at the downstream end of ``arc``."""
    if arc not in g.arcs:
        raise KeyError(f"unknown arc {arc!r}")
    a = g.arcs[arc]
    if a.head is None:
        return set()
    return {x.id for x in g.arcs.values() if x.tail == a.head}


def validate_phase_disjointness(g: Network) -> list[str]:
    """Diagnose phases that claim movements of other nodes or share movements across nodes."""
    violations = []
    owner: dict[str, str] = {}
    for node, phases in g.phases.items():
        for phase in phases:
            for mid in phase.movements:
                m = g.movements.get(mid)
                if m is None:
                    violations.append(f"phase {phase.id} at node {node} lists unknown movement {mid}")
                    continue
                if m.node != node:
                    violations.append(
                        f"phase {phase.id} at node {node} lists movement {mid} of node {m.node}"
                    )
                prev = owner.setdefault(mid, node)
                if prev != node:
                    violations.append(f"movement {mid} appears in phases of nodes {prev} and {node}")
    return violations


# -- config -> network ---------------------------------------------------------


def _fd_from(spec: Mapping[str, Any] | None, default: Mapping[str, Any]) -> FundamentalDiagram:
    merged = dict(default)
    merged.update(spec or {})
    return FundamentalDiagram(
        v_free=float(merged["v_free"]),
        wave_speed=float(merged["wave_speed"]),
        jam_density=float(merged["jam_density"]),
        cv=dict(merged.get("cv", {})),
    )


def _profile(value: Any) -> tuple[tuple[float, float], ...]:
    if isinstance(value, (int, float)):
        steps = ((0.0, float(value)),)
    else:
        steps = tuple((float(t), float(r)) for t, r in value)
        if not steps or steps[0][0] > 0:
            steps = ((0.0, 0.0),) + steps
    for _, r in steps:
        if r < 0 or not math.isfinite(r):
            raise ConfigError(f"arrival rate must be finite and >= 0, got {r}")
    if any(b[0] < a[0] for a, b in zip(steps, steps[1:])):
        raise ConfigError("arrival profile steps must be sorted by time")
    return steps


def _unique(items: list[dict], kind: str) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for item in items:
        key = str(item["id"])
        if key in out:
            raise ConfigError(f"duplicate {kind} id {key!r}")
        out[key] = item
    return out


def build_network(config: Mapping[str, Any]) -> Network:
    """Validate a config document and build the immutable network graph."""
    try:
        return _build(config)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config: {exc!r}") from exc


def _build(config: Mapping[str, Any]) -> Network:
    version = config.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    sim = dict(config.get("sim", {}))
    defaults = dict(config.get("defaults", {}))
    default_fd = dict(DEFAULT_FD)
    default_fd.update(defaults.get("fd", {}))
    default_lanes = int(defaults.get("lanes", 1))
    default_cadence = float(defaults.get("cadence", DEFAULT_CADENCE))
    cell_target = float(sim.get("cell_length", DEFAULT_CELL_LENGTH))

    arc_cfg = _unique(list(config.get("arcs", [])), "arc")
    node_cfg = _unique(list(config.get("nodes", [])), "node")
    mov_cfg = _unique(list(config.get("movements", [])), "movement")
    phase_cfg = _unique(list(config.get("phases", [])), "phase")
    arr_cfg = _unique(list(config.get("arrivals", [])), "arrival")

    for aid in arr_cfg:
        if aid in arc_cfg:
            raise ConfigError(f"duplicate arc id {aid!r} (arrival source collides with arc)")

    nodes: dict[str, Node] = {}
    for nid, spec in node_cfg.items():
        cadence = float(spec.get("cadence", default_cadence))
        if not cadence > 0:
            raise ConfigError(f"node {nid}: cadence must be > 0, got {cadence}")
        nodes[nid] = Node(nid, cadence, bool(spec.get("signalized", True)))

    arcs: dict[str, Arc] = {}
    splits_cfg: dict[str, Any] = {}
    init_cfg: dict[str, Any] = {}
    for aid, spec in arc_cfg.items():
        length = float(spec["length"])
        if not length > 0:
            raise ConfigError(f"arc {aid}: length must be > 0", arc=aid)
        lanes = int(spec.get("lanes", default_lanes))
        if lanes < 1:
            raise ConfigError(f"arc {aid}: lane_count must be a positive integer", arc=aid)
        cells = int(spec.get("cells", max(1, math.ceil(length / cell_target - 1e-9))))
        if cells < 1:
            raise ConfigError(f"arc {aid}: cell_count must be >= 1", arc=aid)
        tail, head = spec.get("from"), spec.get("to")
        for end in (tail, head):
            if end is not None and end not in nodes:
                raise ConfigError(f"arc {aid} references unknown node {end!r}", arc=aid)
        arcs[aid] = Arc(aid, tail, head, length, lanes, _fd_from(spec.get("fd"), default_fd),
                        False, cells)
        if "splits" in spec:
            splits_cfg[aid] = spec["splits"]
        if "initial" in spec:
            init_cfg[aid] = spec["initial"]

    movements: dict[str, Movement] = {}
    arrivals: dict[str, ArrivalSpec] = {}
    init_queues: dict[str, dict[str, float]] = {}

    # interior inflows split the host arc; rewrite references before movements resolve
    renamed_from: dict[str, str] = {}
    renamed_to: dict[str, str] = {}
    extra_phases: list[Phase] = []
    for sid, spec in arr_cfg.items():
        if "arc" not in spec:
            continue
        host = arcs.pop(str(spec["arc"]), None)
        if host is None:
            raise ConfigError(f"arrival {sid} references unknown arc {spec['arc']!r}")
        pos = float(spec["position"])
        if not 0 < pos < host.length:
            raise ConfigError(f"arrival {sid}: position must lie strictly inside arc {host.id}")
        merge = f"{host.id}.merge"
        up, down = f"{host.id}.1", f"{host.id}.2"
        for new in (merge, up, down):
            if new in nodes or new in arcs or new in arc_cfg:
                raise ConfigError(f"duplicate id {new!r} created by interior inflow split")
        nodes[merge] = Node(merge, default_cadence, signalized=False)
        cells_up = max(1, round(host.cell_count * pos / host.length))
        cells_down = max(1, host.cell_count - cells_up)
        arcs[up] = Arc(up, host.tail, merge, pos, host.lanes, host.fd, False, cells_up)
        arcs[down] = Arc(down, merge, host.head, host.length - pos, host.lanes, host.fd, False,
                         cells_down)
        renamed_from[host.id] = down
        renamed_to[host.id] = up
        if host.id in splits_cfg:
            splits_cfg[down] = splits_cfg.pop(host.id)
        init_cfg.pop(host.id, None)
        m_through = Movement(f"{up}>{down}", up, down, merge)
        movements[m_through.id] = m_through
        rate = spec.get("rate", spec.get("rates", {}).get(host.id, 0.0))
        cap = spec.get("capacity")
        arcs[sid] = Arc(sid, None, merge, 0.0, 1, None, True, 1,
                        float(cap) if cap is not None else None)
        m_src = Movement(f"{sid}>{down}", sid, down, merge)
        movements[m_src.id] = m_src
        arrivals[sid] = ArrivalSpec(sid, {down: _profile(rate)},
                                    str(spec.get("process", "poisson")))
        extra_phases.append(Phase(f"{merge}.all", merge, (m_through.id, m_src.id)))

    for sid, spec in arr_cfg.items():
        if "arc" in spec:
            continue
        node = spec.get("node")
        if node not in nodes:
            raise ConfigError(f"arrival {sid} references unknown node {node!r}")
        cap = spec.get("capacity")
        arcs[sid] = Arc(sid, None, node, 0.0, 1, None, True, 1,
                        float(cap) if cap is not None else None)
        rates = spec.get("rates", {})
        # targets may have been renamed by an interior split
        arrivals[sid] = ArrivalSpec(
            sid, {renamed_to.get(str(b), str(b)): _profile(r) for b, r in rates.items()},
            str(spec.get("process", "poisson")))
        if "initial" in spec:
            init_queues[sid] = {renamed_to.get(str(b), str(b)): float(q)
                                for b, q in spec["initial"].items()}

    for mid, spec in mov_cfg.items():
        a = renamed_from.get(str(spec["from"]), str(spec["from"]))
        b = renamed_to.get(str(spec["to"]), str(spec["to"]))
        if a not in arcs or b not in arcs:
            raise ConfigError(f"movement {mid} references unknown arc")
        if arcs[b].is_source:
            raise ConfigError(f"movement {mid} enters source arc {b}")
        head, tail = arcs[a].head, arcs[b].tail
        if head is None or head != tail:
            raise ConfigError(f"movement {mid}: arcs {a} and {b} meet at different nodes")
        if "node" in spec and str(spec["node"]) != head:
            raise ConfigError(f"movement {mid}: declared node {spec['node']} but arcs meet at {head}")
        c = float(spec.get("c", 1.0))
        if not (c > 0 and math.isfinite(c)):
            raise ConfigError(f"movement {mid}: constant c must be positive and finite")
        if any(m.from_arc == a and m.to_arc == b for m in movements.values()):
            raise ConfigError(f"movement {mid} duplicates pair ({a}, {b})")
        movements[mid] = Movement(mid, a, b, head, c)

    phases: dict[str, list[Phase]] = {n: [] for n in nodes}
    for pid, spec in phase_cfg.items():
        node = str(spec["node"])
        if node not in nodes:
            raise ConfigError(f"phase {pid} references unknown node {node!r}")
        mids = tuple(str(x) for x in spec["movements"])
        for mid in mids:
            if mid not in movements:
                raise ConfigError(f"phase {pid} contains unknown movement {mid!r}")
        phases[node].append(Phase(pid, node, mids))
    for ph in extra_phases:
        phases[ph.node].append(ph)

    for nid in nodes:
        if not any(m.node == nid for m in movements.values()):
            raise ConfigError(f"node {nid} has an empty movement set")
        if not phases[nid]:
            raise ConfigError(f"node {nid} has no phases")

    # source arcs: exactly one successor node, at least one movement, rates on movements
    for sid, spec in arrivals.items():
        outs = {m.to_arc for m in movements.values() if m.from_arc == sid}
        if not outs:
            raise ConfigError(f"source arc {sid} has no movement")
        for b in spec.profiles:
            if b not in outs:
                raise ConfigError(f"arrival {sid}: no movement from source to arc {b!r}")
        missing = {b: ((0.0, 0.0),) for b in outs if b not in spec.profiles}
        if missing:
            arrivals[sid] = ArrivalSpec(sid, {**spec.profiles, **missing}, spec.process)
        if spec.process not in ("poisson", "deterministic"):
            raise ConfigError(f"arrival {sid}: unknown process {spec.process!r}")

    # source capacities default to saturation flow of the successor arcs
    for sid in list(arrivals):
        a = arcs[sid]
        if a.source_capacity is None:
            lanes = max(arcs[m.to_arc].lanes for m in movements.values() if m.from_arc == sid)
            arcs[sid] = Arc(sid, None, a.head, 0.0, 1, None, True, 1,
                            SOURCE_SATURATION_PER_LANE * lanes)

    # splits: default uniform over commodities; validate
    splits: dict[str, tuple] = {}
    for aid, arc in arcs.items():
        if arc.is_source:
            continue
        comms = [m.to_arc for m in movements.values() if m.from_arc == aid] or [""]
        raw = splits_cfg.get(aid)
        if raw is None:
            steps = [(0.0, {b: 1.0 / len(comms) for b in comms})]
        elif isinstance(raw, Mapping):
            steps = [(0.0, raw)]
        else:
            steps = [(float(s["t"]), s["splits"]) for s in raw]
        checked = []
        for t0, table in steps:
            table = {str(k): float(v) for k, v in table.items()}
            for k in table:
                if k not in comms:
                    raise ConfigError(f"arc {aid}: split names non-successor {k!r}", arc=aid)
            full = {b: table.get(b, 0.0) for b in comms}
            if any(v < 0 for v in full.values()) or abs(sum(full.values()) - 1.0) > 1e-9:
                raise ConfigError(f"arc {aid}: splits must be >= 0 and sum to 1", arc=aid)
            checked.append((t0, full))
        splits[aid] = tuple(checked)

    # reachability: every physical arc fed by a predecessor or reachable from a source
    reach = set(arrivals)
    queue = deque(arrivals)
    while queue:
        cur = queue.popleft()
        for m in movements.values():
            if m.from_arc == cur and m.to_arc not in reach:
                reach.add(m.to_arc)
                queue.append(m.to_arc)
    for aid, arc in arcs.items():
        if arc.is_source:
            continue
        fed = any(m.to_arc == aid for m in movements.values())
        if not fed and aid not in reach:
            raise ConfigError(f"arc {aid} has no predecessor and is unreachable from sources",
                              arc=aid)

    # time step and CFL
    bound = min(
        (a.cell_length / max(a.fd.v_free, a.fd.wave_speed) for a in arcs.values()
         if not a.is_source),
        default=1.0,
    )
    if "dt" in sim:
        dt = float(sim["dt"])
        if not dt > 0:
            raise ConfigError("sim.dt must be > 0")
        for a in arcs.values():
            if a.is_source:
                continue
            if dt > a.cell_length / max(a.fd.v_free, a.fd.wave_speed) + 1e-12:
                raise ConfigError(
                    f"CFL violation on arc {a.id}: dt={dt} exceeds "
                    f"dx/max(v,w)={a.cell_length / max(a.fd.v_free, a.fd.wave_speed):.6g}",
                    arc=a.id,
                )
    else:
        dt = CFL_SAFETY * bound

    init_dens: dict[str, dict[str, tuple[float, ...]]] = {}
    for aid, table in init_cfg.items():
        arc = arcs[aid]
        comms = [m.to_arc for m in movements.values() if m.from_arc == aid] or [""]
        per: dict[str, tuple[float, ...]] = {}
        for b, value in table.items():
            b = str(b)
            if b not in comms:
                raise ConfigError(f"arc {aid}: initial density for non-commodity {b!r}", arc=aid)
            cells = ((float(value),) * arc.cell_count if isinstance(value, (int, float))
                     else tuple(float(v) for v in value))
            if len(cells) != arc.cell_count or any(v < 0 for v in cells):
                raise ConfigError(f"arc {aid}: bad initial density profile for {b!r}", arc=aid)
            per[b] = cells
        total = [sum(col) for col in zip(*per.values())] if per else []
        if any(v > arc.jam_density * (1 + 1e-12) for v in total):
            raise ConfigError(f"arc {aid}: initial density exceeds jam density", arc=aid)
        init_dens[aid] = per

    horizon = float(sim.get("horizon", 3600.0))
    startup = float(sim.get("startup_time", DEFAULT_STARTUP_TIME))
    if startup < 0:
        raise ConfigError("sim.startup_time must be >= 0")

    g = Network(
        nodes=nodes,
        arcs=arcs,
        movements=movements,
        phases={n: tuple(p) for n, p in phases.items()},
        arrivals=arrivals,
        splits=splits,
        initial_densities=init_dens,
        initial_queues=init_queues,
        dt=dt,
        horizon=horizon,
        startup_time=startup,
        metrics_stride=int(sim.get("metrics_stride", 1)),
        controller=dict(config.get("controller", {})),
        extra={k: v for k, v in config.items()
               if k not in ("schema_version", "sim", "defaults", "arcs", "nodes", "movements",
                            "phases", "arrivals", "controller")},
    )
    violations = validate_phase_disjointness(g)
    if violations:
        raise ConfigError("; ".join(violations))
    return g


def emit_config(g: Network) -> dict[str, Any]:
    """Serialize a network back to an (expanded) config document.

    Interior inflow splits are emitted in their expanded form, so the
    result rebuilds to a structurally equal graph.
    """
    arcs = []
    for a in g.arcs.values():
        if a.is_source:
            continue
        spec: dict[str, Any] = {
            "id": a.id, "from": a.tail, "to": a.head, "length": a.length, "lanes": a.lanes,
            "cells": a.cell_count,
            "fd": {"v_free": a.fd.v_free, "wave_speed": a.fd.wave_speed,
                   "jam_density": a.fd.jam_density, "cv": dict(a.fd.cv)},
            "splits": [{"t": t, "splits": dict(tab)} for t, tab in g.splits[a.id]],
        }
        if a.id in g.initial_densities:
            spec["initial"] = {b: list(v) for b, v in g.initial_densities[a.id].items()}
        arcs.append(spec)
    arrivals = []
    for sid, spec in g.arrivals.items():
        entry: dict[str, Any] = {
            "id": sid, "node": g.arcs[sid].head, "capacity": g.arcs[sid].source_capacity,
            "process": spec.process,
            "rates": {b: [list(s) for s in steps] for b, steps in spec.profiles.items()},
        }
        if sid in g.initial_queues:
            entry["initial"] = dict(g.initial_queues[sid])
        arrivals.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "sim": {"dt": g.dt, "horizon": g.horizon, "startup_time": g.startup_time,
                "metrics_stride": g.metrics_stride},
        "arcs": arcs,
        "nodes": [{"id": n.id, "cadence": n.cadence, "signalized": n.signalized}
                  for n in g.nodes.values()],
        "movements": [{"id": m.id, "from": m.from_arc, "to": m.to_arc, "node": m.node, "c": m.c}
                      for m in g.movements.values()],
        "phases": [{"id": p.id, "node": p.node, "movements": list(p.movements)}
                   for ps in g.phases.values() for p in ps],
        "arrivals": arrivals,
        "controller": dict(g.controller),
        **dict(g.extra),
    }
