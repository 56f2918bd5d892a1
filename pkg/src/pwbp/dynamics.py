"""Multi-commodity cell-transmission dynamics on a compiled network.

Densities live in one flat cell array shared by all physical arcs, with a
leading commodity axis: ``rho[k, i]`` is the density (veh/m, summed over
lanes) in cell ``i`` destined for the ``k``-th successor arc of the cell's
arc. Source arcs hold point queues, one per source movement.

Interior cells use the Godunov (CTM) flux min(demand, supply), split among
commodities by their share of cell density. Arc boundaries are coupled by the
signalized node model: a movement in the active phase sends
min(commodity demand at the exit cell, its share of downstream supply), with
downstream supply split among competing movements in proportion to demand.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .network import Arc, FundamentalDiagram, Network


# -- scalar fundamental relations ---------------------------------------------


def fundamental_flux(fd: FundamentalDiagram, rho: float, lanes: int = 1) -> float:
    """Newell triangular flux min(v rho, w (jam - rho)) in veh/s."""
    jam = fd.jam_density * lanes
    if not -1e-12 <= rho <= jam * (1 + 1e-12):
        raise ValueError(f"density {rho} outside [0, {jam}]")
    return max(0.0, min(fd.v_free * rho, fd.wave_speed * (jam - rho)))


def startup_ramp(time_since_green: float, startup_time: float) -> float:
    """Fraction of saturation demand available ``time_since_green`` s into a phase."""
    if time_since_green < 0:
        raise ValueError("time_since_green must be >= 0")
    if startup_time <= 0:
        return 1.0
    return min(1.0, time_since_green / startup_time)


def demand_fn(fd: FundamentalDiagram, rho_exit: float, time_since_green: float = math.inf,
              startup_time: float = 2.0, lanes: int = 1) -> float:
    """Sending flow of an arc exit, reduced during phase startup."""
    jam = fd.jam_density * lanes
    if not -1e-12 <= rho_exit <= jam * (1 + 1e-12):
        raise ValueError(f"density {rho_exit} outside [0, {jam}]")
    return min(fd.v_free * rho_exit, fd.capacity * lanes) * startup_ramp(time_since_green,
                                                                         startup_time)


def supply_fn(fd: FundamentalDiagram, rho_entry: float, lanes: int = 1) -> float:
    """Receiving flow of an arc entry."""
    jam = fd.jam_density * lanes
    if not -1e-12 <= rho_entry <= jam * (1 + 1e-12):
        raise ValueError(f"density {rho_entry} outside [0, {jam}]")
    return max(0.0, min(fd.capacity * lanes, fd.wave_speed * (jam - rho_entry)))


def allocate_supply(demand: np.ndarray, supply: np.ndarray, to: np.ndarray,
                    active: np.ndarray) -> np.ndarray:
    """Holding-free merge: each active movement gets min(demand, proportional supply share).

    ``supply`` is indexed by destination arc, ``to`` maps movements to it.
    """
    d = np.where(active, demand, 0.0)
    total = np.bincount(to, weights=d, minlength=len(supply))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(total > 0, np.minimum(1.0, supply / total), 0.0)
    return d * ratio[to]


# -- compiled layout ---------------------------------------------------------


@dataclass
class CellParams:
    """Per-cell fundamental diagram parameters (jam and capacity summed over lanes)."""

    v_free: np.ndarray
    wave_speed: np.ndarray
    jam: np.ndarray
    capacity: np.ndarray

    def copy(self) -> "CellParams":
        return CellParams(self.v_free.copy(), self.wave_speed.copy(), self.jam.copy(),
                          self.capacity.copy())


class Layout:
    """Index arrays for vectorized simulation of a network."""

    def __init__(self, g: Network):
        self.network = g
        self.dt = g.dt
        self.phys = g.physical_arcs
        self.arc_index = {a: i for i, a in enumerate(self.phys)}
        arcs = [g.arcs[a] for a in self.phys]
        self.n_cells = np.array([a.cell_count for a in arcs], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.n_cells)[:-1]]).astype(int)
        self.first_cell = self.offsets
        self.last_cell = self.offsets + self.n_cells - 1
        C = int(self.n_cells.sum())
        self.C = C
        self.cell_arc = np.repeat(np.arange(len(arcs)), self.n_cells)
        self.dx = np.repeat([a.cell_length for a in arcs], self.n_cells).astype(float)
        self.length = np.array([a.length for a in arcs], dtype=float)
        self.lanes = np.array([a.lanes for a in arcs], dtype=int)
        self.is_last = np.zeros(C, dtype=bool)
        self.is_last[self.last_cell] = True
        idx_in_arc = np.arange(C) - self.offsets[self.cell_arc]
        centers = (idx_in_arc + 0.5) * self.dx
        arc_len = self.length[self.cell_arc]
        self.up_weight = centers / arc_len            # x / l
        self.down_weight = (arc_len - centers) / arc_len  # (l - x) / l
        self.base = CellParams(
            v_free=np.repeat([a.fd.v_free for a in arcs], self.n_cells).astype(float),
            wave_speed=np.repeat([a.fd.wave_speed for a in arcs], self.n_cells).astype(float),
            jam=np.repeat([a.jam_density for a in arcs], self.n_cells).astype(float),
            capacity=np.repeat([a.capacity for a in arcs], self.n_cells).astype(float),
        )

        self.commodities = [g.commodities(a) for a in self.phys]
        self.K = max((len(c) for c in self.commodities), default=1)
        self.slot_valid = np.zeros((self.K, C), dtype=bool)
        for i, comms in enumerate(self.commodities):
            sl = slice(self.offsets[i], self.offsets[i] + self.n_cells[i])
            self.slot_valid[: len(comms), sl] = True
        self.exit_arcs = np.array([i for i, a in enumerate(self.phys) if self.commodities[i] == [""]],
                                  dtype=int)

        # movements
        self.movement_ids = list(g.movements)
        self.movement_index = {m: i for i, m in enumerate(self.movement_ids)}
        M = len(self.movement_ids)
        self.M = M
        self.m_src = np.zeros(M, dtype=bool)
        self.m_from = np.full(M, -1, dtype=int)
        self.m_slot = np.zeros(M, dtype=int)
        self.m_exit = np.zeros(M, dtype=int)
        self.m_to = np.zeros(M, dtype=int)
        self.m_entry = np.zeros(M, dtype=int)
        self.m_queue = np.full(M, -1, dtype=int)
        self.m_c = np.zeros(M)
        self.queue_keys: list[tuple[str, str]] = []
        for j, mid in enumerate(self.movement_ids):
            m = g.movements[mid]
            b = self.arc_index[m.to_arc]
            self.m_to[j] = b
            self.m_entry[j] = self.first_cell[b]
            self.m_c[j] = m.c
            if g.arcs[m.from_arc].is_source:
                self.m_src[j] = True
                self.m_queue[j] = len(self.queue_keys)
                self.queue_keys.append((m.from_arc, m.to_arc))
            else:
                a = self.arc_index[m.from_arc]
                self.m_from[j] = a
                self.m_slot[j] = self.commodities[a].index(m.to_arc)
                self.m_exit[j] = self.last_cell[a]
        self.Q = len(self.queue_keys)
        self.src_mov = np.flatnonzero(self.m_src)
        self.phys_mov = np.flatnonzero(~self.m_src)
        self.src_capacity = np.array(
            [g.arcs[s].capacity for s, _ in self.queue_keys], dtype=float)
        self.queue_source = [s for s, _ in self.queue_keys]
        # saturation service rate used by the position-blind baselines
        sat = np.empty(M)
        for j in range(M):
            up = (self.src_capacity[self.m_queue[j]] if self.m_src[j]
                  else self.base.capacity[self.m_exit[j]])
            sat[j] = min(up, self.base.capacity[self.m_entry[j]])
        self.m_saturation = sat

        # nodes and phases
        self.node_ids = list(g.nodes)
        self.node_index = {n: i for i, n in enumerate(self.node_ids)}
        self.m_node = np.array([self.node_index[g.movements[m].node] for m in self.movement_ids],
                               dtype=int)
        self.node_cadence = np.array([g.nodes[n].cadence for n in self.node_ids], dtype=float)
        self.phase_ids: list[list[str]] = []
        rows = []
        self.row_node = []
        self.row_offset = np.zeros(len(self.node_ids), dtype=int)
        for i, n in enumerate(self.node_ids):
            self.row_offset[i] = len(rows)
            self.phase_ids.append([p.id for p in g.phases[n]])
            for p in g.phases[n]:
                mask = np.zeros(M, dtype=bool)
                mask[[self.movement_index[m] for m in p.movements]] = True
                rows.append(mask)
                self.row_node.append(i)
        self.membership = np.array(rows, dtype=bool).reshape(len(rows), M)
        self.row_node = np.array(self.row_node, dtype=int)
        self.n_phases = np.array([len(p) for p in self.phase_ids], dtype=int)

        # splits
        self._split_times = sorted({t for a in self.phys for t, _ in g.splits[a]})
        self._pi_cache: dict[float, np.ndarray] = {}

        # downstream commodity constants c_{b,c} per (slot, arc)
        self.slot_c = np.zeros((self.K, len(self.phys)))
        for j in self.phys_mov:
            self.slot_c[self.m_slot[j], self.m_from[j]] = self.m_c[j]

        self._kernels: dict[int, np.ndarray] | None = None

    def pi(self, t: float) -> np.ndarray:
        """Turning fractions as a (K, n_phys) array, in force at time ``t``."""
        key = max((s for s in self._split_times if s <= t + 1e-9), default=0.0)
        if key not in self._pi_cache:
            out = np.zeros((self.K, len(self.phys)))
            for i, a in enumerate(self.phys):
                table = self.network.split(a, key)
                for k, b in enumerate(self.commodities[i]):
                    out[k, i] = table[b]
            self._pi_cache[key] = out
        return self._pi_cache[key]

    def arc_cells(self, arc: str) -> slice:
        i = self.arc_index[arc]
        return slice(int(self.offsets[i]), int(self.offsets[i] + self.n_cells[i]))

    def per_arc_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum a (..., C) cell array within each arc -> (..., n_phys)."""
        return np.add.reduceat(values, self.offsets, axis=-1)

    def node_rows(self, node: int) -> slice:
        start = int(self.row_offset[node])
        return slice(start, start + int(self.n_phases[node]))


@dataclass
class NetworkState:
    rho: np.ndarray      # (K, C) commodity densities, veh/m
    queues: np.ndarray   # (Q,) source queues, veh
    t: float = 0.0

    def copy(self) -> "NetworkState":
        return NetworkState(self.rho.copy(), self.queues.copy(), self.t)

    def total_vehicles(self, layout: Layout) -> float:
        return float((self.rho * layout.dx).sum() + self.queues.sum())


@dataclass
class SignalState:
    active: np.ndarray   # phase index per node
    start: np.ndarray    # time the active phase began, per node

    def copy(self) -> "SignalState":
        return SignalState(self.active.copy(), self.start.copy())

    def phase_labels(self, layout: Layout) -> str:
        return ";".join(f"{n}:{layout.phase_ids[i][self.active[i]]}"
                        for i, n in enumerate(layout.node_ids))


def initial_state(layout: Layout) -> NetworkState:
    g = layout.network
    rho = np.zeros((layout.K, layout.C))
    for arc, table in g.initial_densities.items():
        i = layout.arc_index[arc]
        sl = layout.arc_cells(arc)
        for b, values in table.items():
            rho[layout.commodities[i].index(b), sl] = values
    queues = np.zeros(layout.Q)
    for q, (s, b) in enumerate(layout.queue_keys):
        queues[q] = g.initial_queues.get(s, {}).get(b, 0.0)
    return NetworkState(rho, queues, 0.0)


def initial_signal(layout: Layout) -> SignalState:
    n = len(layout.node_ids)
    return SignalState(np.zeros(n, dtype=int), np.full(n, -math.inf))


# -- arrivals -----------------------------------------------------------------


def substream(seed: int, key: str) -> np.random.Generator:
    """Independent generator keyed by a stable entity id."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(key.encode())]))


class ArrivalProcess:
    """Per-source-arc arrival draws on seeded substreams."""

    def __init__(self, layout: Layout, seed: int, rate_scale: float = 1.0,
                 process: str | None = None):
        g = layout.network
        self.layout = layout
        self.scale = rate_scale
        self.sources = sorted({s for s, _ in layout.queue_keys})
        self.rngs = {s: substream(seed, f"arrivals/{s}") for s in self.sources}
        self.slots = {s: [q for q, (src, _) in enumerate(layout.queue_keys) if src == s]
                      for s in self.sources}
        self.process = {s: process or g.arrivals[s].process for s in self.sources}

    def rates(self, t: float) -> np.ndarray:
        g = self.layout.network
        return np.array([g.arrivals[s].rate(b, t) for s, b in self.layout.queue_keys]) * self.scale

    def draw(self, t: float, dt: float) -> np.ndarray:
        mean = self.rates(t) * dt
        out = np.zeros(self.layout.Q)
        for s in self.sources:
            idx = self.slots[s]
            if self.process[s] == "poisson":
                out[idx] = self.rngs[s].poisson(mean[idx])
            else:
                out[idx] = mean[idx]
        return out


# -- single-arc Godunov update ------------------------------------------------


def _interior_flux(rho: np.ndarray, params: CellParams, is_last: np.ndarray) -> np.ndarray:
    """Commodity fluxes (K, C) from each cell to the next one within its arc."""
    k = rho.sum(axis=0)
    demand = np.minimum(params.v_free * k, params.capacity)
    supply = np.maximum(0.0, np.minimum(params.capacity, params.wave_speed * (params.jam - k)))
    f = np.zeros_like(k)
    f[:-1] = np.minimum(demand[:-1], supply[1:])
    f[is_last] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        share = np.where(k > 0, rho / k, 0.0)
    return share * f


def check_cfl(arc: Arc, dt: float) -> None:
    bound = arc.cell_length / max(arc.fd.v_free, arc.fd.wave_speed)
    if dt > bound + 1e-12:
        raise ValueError(f"CFL violation on arc {arc.id}: dt={dt} > {bound:.6g}")


def cell_update(arc: Arc, rho: np.ndarray, inflow: np.ndarray, outflow: np.ndarray,
                dt: float) -> np.ndarray:
    """Advance one arc's commodity densities (K, N) by ``dt``.

    ``inflow`` enters the first cell and ``outflow`` leaves the last cell, per
    commodity (veh/s). The caller is responsible for boundary flows that
    respect the first cell's supply and the last cell's commodity demand.
    """
    check_cfl(arc, dt)
    rho = np.asarray(rho, dtype=float)
    if rho.ndim == 1:
        rho = rho[None, :]
    N = arc.cell_count
    params = CellParams(np.full(N, arc.fd.v_free), np.full(N, arc.fd.wave_speed),
                        np.full(N, arc.jam_density), np.full(N, arc.capacity))
    is_last = np.zeros(N, dtype=bool)
    is_last[-1] = True
    fk = _interior_flux(rho, params, is_last)
    net = -fk
    net[:, 1:] += fk[:, :-1]
    net[:, 0] += np.asarray(inflow, dtype=float)
    net[:, -1] -= np.asarray(outflow, dtype=float)
    new = rho + dt / arc.cell_length * net
    _check_densities(new, params.jam, f"arc {arc.id}")
    return np.maximum(new, 0.0)


def source_queue_update(queue: np.ndarray | float, arrivals: np.ndarray | float,
                        outflux: np.ndarray | float, dt: float):
    """Point-queue mass balance: queue + arrivals - outflux * dt."""
    new = np.asarray(queue, dtype=float) + arrivals - np.asarray(outflux, dtype=float) * dt
    if np.any(new < -1e-9):
        raise RuntimeError(f"negative source queue after update: {new}")
    new = np.maximum(new, 0.0)
    return float(new) if new.ndim == 0 else new


def _check_densities(rho: np.ndarray, jam: np.ndarray, where: str) -> None:
    low = rho.min() if rho.size else 0.0
    if low < -1e-9:
        raise RuntimeError(f"negative density {low} on {where}")
    total = rho.sum(axis=0)
    if np.any(total > jam * (1 + 1e-9) + 1e-12):
        raise RuntimeError(f"density above jam on {where}")


# -- node model ------------------------------------------------------------


def movement_ramp(layout: Layout, signal: SignalState, t: float, dt: float,
                  startup_time: float) -> np.ndarray:
    """Startup fraction per movement, evaluated at the step midpoint."""
    if startup_time <= 0:
        return np.ones(layout.M)
    elapsed = (t + 0.5 * dt) - signal.start[layout.m_node]
    return np.clip(elapsed / startup_time, 0.0, 1.0)


def active_movements(layout: Layout, signal: SignalState) -> np.ndarray:
    rows = layout.row_offset + signal.active
    return layout.membership[rows].any(axis=0)


def movement_demands(layout: Layout, params: CellParams, state: NetworkState,
                     source_avail: np.ndarray, dt: float) -> np.ndarray:
    """Unramped demand per movement; ``source_avail`` is veh/s available at each queue."""
    d = np.empty(layout.M)
    p = layout.phys_mov
    exit_cells = layout.m_exit[p]
    d[p] = np.minimum(params.v_free[exit_cells] * state.rho[layout.m_slot[p], exit_cells],
                      params.capacity[exit_cells])
    s = layout.src_mov
    q = layout.m_queue[s]
    d[s] = np.minimum(source_avail[q], layout.src_capacity[q])
    return d


def arc_supplies(layout: Layout, params: CellParams, state: NetworkState) -> np.ndarray:
    first = layout.first_cell
    k = state.rho[:, first].sum(axis=0)
    return np.maximum(0.0, np.minimum(params.capacity[first],
                                      params.wave_speed[first] * (params.jam[first] - k)))


@dataclass
class MetricsRecord:
    time: float
    total_vehicles: float
    source_queue_total: float
    throughput: float
    delay_rate: float
    lyapunov_V: float
    active_phases: str
    arrivals: float = 0.0
    mass_error: float = 0.0
    source_queues: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    FIELDS = ("time", "total_vehicles", "source_queue_total", "throughput", "delay_rate",
              "lyapunov_V", "active_phases")

    def row(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}


def delay_rate(layout: Layout, state: NetworkState, params: CellParams | None = None) -> float:
    """Delay accrual (veh s per s): congested cell vehicles plus every queued vehicle."""
    params = params or layout.base
    k = state.rho.sum(axis=0)
    # rho * dx * (1 - v(rho)/v_free) with v = Q(rho)/rho
    slow = np.maximum(0.0, k - params.wave_speed * (params.jam - k) / params.v_free)
    return float((slow * layout.dx).sum() + state.queues.sum())


@dataclass
class StepResult:
    state: NetworkState
    record: MetricsRecord
    movement_flux: np.ndarray


def step(layout: Layout, state: NetworkState, signal: SignalState, dt: float,
         arrivals: np.ndarray, params: CellParams | None = None,
         lyapunov_c: np.ndarray | None = None, compute_lyapunov: bool = True) -> StepResult:
    """One synchronous network update.

    Order: arrivals join the source queues' availability, all movement and
    interior fluxes are computed from the frozen snapshot, then arcs and
    queues are updated and metrics emitted.
    """
    from .stability import lyapunov

    params = params or layout.base
    g = layout.network
    t = state.t
    rho = state.rho

    # (1) arrivals are available for departure within the step
    avail = (state.queues + arrivals) / dt

    # (2) boundary fluxes under the current signal
    demand = movement_demands(layout, params, state, avail, dt)
    demand *= movement_ramp(layout, signal, t, dt, g.startup_time)
    supply = arc_supplies(layout, params, state)
    q = allocate_supply(demand, supply, layout.m_to, active_movements(layout, signal))
    last = layout.last_cell[layout.exit_arcs]
    k_last = rho[0, last]
    exit_flux = np.minimum(params.v_free[last] * k_last, params.capacity[last])

    # (3) interiors and boundaries
    fk = _interior_flux(rho, params, layout.is_last)
    net = -fk
    net[:, 1:] += fk[:, :-1]
    p = layout.phys_mov
    net[layout.m_slot[p], layout.m_exit[p]] -= q[p]  # (slot, exit cell) pairs are unique
    net[0, last] -= exit_flux
    inflow = np.bincount(layout.m_to, weights=q, minlength=len(layout.phys))
    net[:, layout.first_cell] += layout.pi(t) * inflow
    new_rho = rho + (dt / layout.dx) * net
    _check_densities(new_rho, layout.base.jam, "network")
    np.maximum(new_rho, 0.0, out=new_rho)

    # (4) source queues
    s = layout.src_mov
    out_src = np.zeros(layout.Q)
    out_src[layout.m_queue[s]] = q[s]
    new_queues = source_queue_update(state.queues, arrivals, out_src, dt)

    new_state = NetworkState(new_rho, np.atleast_1d(new_queues), t + dt)

    # (5) metrics
    arrived = float(arrivals.sum())
    exited = float(exit_flux.sum()) * dt
    before = state.total_vehicles(layout)
    after = new_state.total_vehicles(layout)
    V = lyapunov(layout, new_state, lyapunov_c) if compute_lyapunov else math.nan
    record = MetricsRecord(
        time=t + dt,
        total_vehicles=after,
        source_queue_total=float(new_state.queues.sum()),
        throughput=float(exit_flux.sum()),
        delay_rate=delay_rate(layout, new_state, params),
        lyapunov_V=V,
        active_phases=signal.phase_labels(layout),
        arrivals=arrived,
        mass_error=(after - before) - (arrived - exited),
        source_queues=new_state.queues.copy(),
    )
    return StepResult(new_state, record, q)


def movement_flux(layout: Layout, state: NetworkState, signal: SignalState, movement: str,
                  params: CellParams | None = None, arrivals: np.ndarray | None = None) -> float:
    """Flux (veh/s) the node model assigns to one movement under the current signal."""
    params = params or layout.base
    dt = layout.dt
    arrivals = np.zeros(layout.Q) if arrivals is None else arrivals
    demand = movement_demands(layout, params, state, (state.queues + arrivals) / dt, dt)
    demand *= movement_ramp(layout, signal, state.t, dt, layout.network.startup_time)
    supply = arc_supplies(layout, params, state)
    q = allocate_supply(demand, supply, layout.m_to, active_movements(layout, signal))
    return float(q[layout.movement_index[movement]])


# -- expected fluxes for controllers -----------------------------------------


def controller_demands(layout: Layout, params: CellParams, state: NetworkState,
                       rates: np.ndarray) -> np.ndarray:
    """Ramp-free movement demand; sources use min(queue/dt + lambda, capacity)."""
    dt = layout.dt
    return movement_demands(layout, params, state, state.queues / dt + rates, dt)


def phase_expected_flux(layout: Layout, demand: np.ndarray, supply: np.ndarray,
                        mem: np.ndarray) -> np.ndarray:
    """Expected flux (R, M) of every movement under each candidate phase mask (R, M)."""
    n_arcs = len(layout.phys)
    d = mem * demand                                   # (R, M)
    totals = np.zeros((d.shape[0], n_arcs))
    for r in range(d.shape[0]):
        totals[r] = np.bincount(layout.m_to, weights=d[r], minlength=n_arcs)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(totals > 0, np.minimum(1.0, supply[None, :] / totals), 0.0)
    return d * ratio[:, layout.m_to]


@dataclass
class StochasticFD:
    """Parametric fundamental-diagram uncertainty.

    ``factors`` holds N multiplicative draws per physical arc for v_free,
    wave_speed and jam density; capacity follows from the triangle.
    """

    v_free: np.ndarray      # (N, n_phys)
    wave_speed: np.ndarray
    jam: np.ndarray

    @property
    def n(self) -> int:
        return self.v_free.shape[0]

    @classmethod
    def draw(cls, layout: Layout, n: int, rng: np.random.Generator) -> "StochasticFD":
        if n < 1:
            raise ValueError("sample count N must be >= 1")
        g = layout.network
        out = {}
        for name in ("v_free", "wave_speed", "jam_density"):
            cols = []
            for a in layout.phys:
                cv = g.arcs[a].fd.cv.get(name, 0.0)
                cols.append(_lognormal_factor(rng, cv, n))
            out[name] = np.stack(cols, axis=1)
        # keep every draw inside the CFL bound of its arc
        arcs = [g.arcs[a] for a in layout.phys]
        vmax = np.array([a.cell_length / g.dt for a in arcs])
        v = np.minimum(out["v_free"] * [a.fd.v_free for a in arcs], vmax)
        w = np.minimum(out["wave_speed"] * [a.fd.wave_speed for a in arcs], vmax)
        return cls(v / [a.fd.v_free for a in arcs], w / [a.fd.wave_speed for a in arcs],
                   out["jam_density"])

    def cell_params(self, layout: Layout, params: CellParams, sample: int) -> CellParams:
        ca = layout.cell_arc
        v = params.v_free * self.v_free[sample, ca]
        w = params.wave_speed * self.wave_speed[sample, ca]
        jam = params.jam * self.jam[sample, ca]
        return CellParams(v, w, jam, v * w * jam / (v + w))


def _lognormal_factor(rng: np.random.Generator, cv: float, n: int) -> np.ndarray:
    if cv <= 0:
        return np.ones(n)
    sigma2 = math.log1p(cv * cv)
    return rng.lognormal(-0.5 * sigma2, math.sqrt(sigma2), n)


def _sample_demand_supply(layout: Layout, params: CellParams, state: NetworkState,
                          rates: np.ndarray, stoch: StochasticFD):
    """Per-sample demand (N, M) and supply (N, n_phys) arrays."""
    D = np.empty((stoch.n, layout.M))
    S = np.empty((stoch.n, len(layout.phys)))
    for s in range(stoch.n):
        cp = stoch.cell_params(layout, params, s)
        # draws may shrink jam below the current density; clip the snapshot view
        D[s] = controller_demands(layout, cp, state, rates)
        S[s] = arc_supplies(layout, cp, state)
    return D, S


def expected_phase_flux(layout: Layout, state: NetworkState, mem: np.ndarray,
                        rates: np.ndarray, params: CellParams | None = None,
                        stoch: StochasticFD | None = None) -> np.ndarray:
    """E q for every movement under each candidate phase row (ramp = 1)."""
    params = params or layout.base
    if stoch is None:
        demand = controller_demands(layout, params, state, rates)
        supply = arc_supplies(layout, params, state)
        return phase_expected_flux(layout, demand, supply, mem)
    D, S = _sample_demand_supply(layout, params, state, rates, stoch)
    acc = None
    for s in range(stoch.n):
        f = phase_expected_flux(layout, D[s], S[s], mem)
        acc = f if acc is None else acc + f
    return acc / stoch.n


def expected_movement_flux(layout: Layout, state: NetworkState, movement: str,
                           phase: tuple[str, ...] | list[str], rates: np.ndarray | None = None,
                           params: CellParams | None = None,
                           stoch: StochasticFD | None = None) -> float:
    """E q_{a,b}(p) for a hypothetical phase ``p`` given as movement ids."""
    if stoch is not None and stoch.n < 1:
        raise ValueError("sample count N must be >= 1")
    rates = np.zeros(layout.Q) if rates is None else rates
    mask = np.zeros((1, layout.M), dtype=bool)
    mask[0, [layout.movement_index[m] for m in phase]] = True
    f = expected_phase_flux(layout, state, mask, rates, params, stoch)
    return float(f[0, layout.movement_index[movement]])


@dataclass
class FluxDecomposition:
    """Monte Carlo pieces of E min(delta, sigma) for one movement."""

    direct: float
    direct_se: float
    prob_demand_limited: float
    demand_given_limited: float
    supply_given_limited: float
    mean_demand: float
    mean_supply: float

    @property
    def decomposed(self) -> float:
        """P E[delta | delta <= sigma] + (1 - P) E[sigma | delta > sigma]."""
        P = self.prob_demand_limited
        return P * self.demand_given_limited + (1 - P) * self.supply_given_limited

    @property
    def unconditional(self) -> float:
        """P E[delta] + (1 - P) E[sigma]; exact only when demand/supply are degenerate."""
        P = self.prob_demand_limited
        return P * self.mean_demand + (1 - P) * self.mean_supply


def decompose_min(delta: np.ndarray, sigma: np.ndarray) -> FluxDecomposition:
    delta = np.asarray(delta, dtype=float)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), delta.shape)
    m = np.minimum(delta, sigma)
    lim = delta <= sigma
    P = float(lim.mean())
    d_lim = float(delta[lim].mean()) if lim.any() else 0.0
    s_lim = float(sigma[~lim].mean()) if (~lim).any() else 0.0
    se = float(m.std(ddof=1) / math.sqrt(len(m))) if len(m) > 1 else 0.0
    return FluxDecomposition(float(m.mean()), se, P, d_lim, s_lim, float(delta.mean()),
                             float(sigma.mean()))


def movement_flux_decomposition(layout: Layout, state: NetworkState, movement: str,
                                stoch: StochasticFD, rates: np.ndarray | None = None,
                                params: CellParams | None = None) -> FluxDecomposition:
    """Decompose E min(delta, sigma) for a movement acting alone into its supply."""
    params = params or layout.base
    rates = np.zeros(layout.Q) if rates is None else rates
    D, S = _sample_demand_supply(layout, params, state, rates, stoch)
    j = layout.movement_index[movement]
    return decompose_min(D[:, j], S[:, layout.m_to[j]])
