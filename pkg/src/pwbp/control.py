"""Decentralized phase selection: fixed time, BP, capacity-aware BP and PWBP.

Every controller scores each candidate phase at a node as the sum over the
node's movements of weight x service rate and activates a maximizer, breaking
exact ties uniformly at random.

Baseline formulas (position-blind, on per-commodity vehicle counts Q):

* BP:   w_ab = max(0, Q_a^b - sum_c pi_bc Q_b^c), service = saturation flow
* CABP: BP weight, zeroed when arc b has less than one vehicle of free storage
* PWBP: w_ab = |c_ab U_a^b - sum_c c_bc pi_bc D_b^c| with U weighting density
  by x/l_a and D by (l_b - x)/l_b; service = expected node-model flux.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dynamics import (
    CellParams,
    Layout,
    NetworkState,
    SignalState,
    StochasticFD,
    expected_phase_flux,
    substream,
)

POLICIES = ("ft", "bp", "cabp", "pwbp")
POLICY_ALIASES = {"fixedtime": "ft", "fixed_time": "ft", "fixed-time": "ft", "fixed": "ft"}
TIE_RTOL = 1e-12


def normalize_policy(name: str) -> str:
    key = name.lower()
    key = POLICY_ALIASES.get(key, key)
    if key not in POLICIES:
        raise ValueError(f"unknown policy {name!r}; expected one of {POLICIES}")
    return key


# -- weights -----------------------------------------------------------------


def _constants(layout: Layout, c) -> np.ndarray:
    if c is None:
        return layout.m_c
    if isinstance(c, Mapping):
        out = layout.m_c.copy()
        for mid, value in c.items():
            out[layout.movement_index[mid]] = value
        return out
    return np.asarray(c, dtype=float)


def _slot_constants(layout: Layout, c: np.ndarray) -> np.ndarray:
    slot_c = np.zeros((layout.K, len(layout.phys)))
    p = layout.phys_mov
    slot_c[layout.m_slot[p], layout.m_from[p]] = c[p]
    return slot_c


def _upstream(layout: Layout, state: NetworkState, cell_weight: np.ndarray) -> np.ndarray:
    """Weighted commodity volume on each movement's inbound arc (sources: queue)."""
    G = layout.per_arc_sum(state.rho * cell_weight)
    out = np.empty(layout.M)
    p, s = layout.phys_mov, layout.src_mov
    out[p] = G[layout.m_slot[p], layout.m_from[p]]
    out[s] = state.queues[layout.m_queue[s]]
    return out


def _downstream(layout: Layout, state: NetworkState, cell_weight: np.ndarray, t: float,
                slot_c: np.ndarray) -> np.ndarray:
    """sum_c c_bc pi_bc (weighted volume of commodity c on b), per movement (a, b)."""
    H = layout.per_arc_sum(state.rho * cell_weight)
    per_arc = (slot_c * layout.pi(t) * H).sum(axis=0)
    return per_arc[layout.m_to]


def pwbp_weights(layout: Layout, state: NetworkState, t: float | None = None, c=None,
                 position_weighted: bool = True) -> np.ndarray:
    """Position-weighted pressure per movement.

    With ``position_weighted=False`` every cell gets weight one, i.e. the
    upstream integral is taken as if the mass sat at the stop line and the
    downstream one as if at the entrance; this reduces PWBP to the point-queue
    difference (test hook).
    """
    t = state.t if t is None else t
    c = _constants(layout, c)
    if position_weighted:
        up_w, down_w = layout.up_weight * layout.dx, layout.down_weight * layout.dx
    else:
        up_w = down_w = layout.dx
    up = c * _upstream(layout, state, up_w)
    down = _downstream(layout, state, down_w, t, _slot_constants(layout, c))
    return np.abs(up - down)


def queue_pressure(layout: Layout, state: NetworkState, t: float | None = None,
                   c=None) -> np.ndarray:
    """Signed queue difference c_ab Q_a^b - sum_c c_bc pi_bc Q_b^c per movement."""
    t = state.t if t is None else t
    c = _constants(layout, c)
    up = c * _upstream(layout, state, layout.dx)
    return up - _downstream(layout, state, layout.dx, t, _slot_constants(layout, c))


def bp_weights(layout: Layout, state: NetworkState, t: float | None = None) -> np.ndarray:
    ones = np.ones(layout.M)
    return np.maximum(0.0, queue_pressure(layout, state, t, ones))


def remaining_storage(layout: Layout, state: NetworkState,
                      params: CellParams | None = None) -> np.ndarray:
    """Free storage (veh) of each physical arc."""
    params = params or layout.base
    free = np.maximum(0.0, params.jam - state.rho.sum(axis=0)) * layout.dx
    return layout.per_arc_sum(free)


def cabp_weights(layout: Layout, state: NetworkState, t: float | None = None,
                 params: CellParams | None = None) -> np.ndarray:
    room = remaining_storage(layout, state, params)[layout.m_to]
    return np.where(room >= 1.0, bp_weights(layout, state, t), 0.0)


def pwbp_weight(layout: Layout, state: NetworkState, movement: str, **kw) -> float:
    return float(pwbp_weights(layout, state, **kw)[layout.movement_index[movement]])


def bp_weight(layout: Layout, state: NetworkState, movement: str, **kw) -> float:
    return float(bp_weights(layout, state, **kw)[layout.movement_index[movement]])


def cabp_weight(layout: Layout, state: NetworkState, movement: str, **kw) -> float:
    return float(cabp_weights(layout, state, **kw)[layout.movement_index[movement]])


# -- fixed time ----------------------------------------------------------------


@dataclass(frozen=True)
class FixedTimePlan:
    """Cyclic plan of (phase index, green duration) steps shifted by ``offset`` s."""

    steps: tuple[tuple[int, float], ...]
    offset: float = 0.0

    def __post_init__(self):
        if not self.steps or any(d <= 0 for _, d in self.steps):
            raise ValueError("fixed-time durations must be positive")

    @property
    def cycle(self) -> float:
        return sum(d for _, d in self.steps)

    def phase_at(self, t: float) -> int:
        u = (t + self.offset) % self.cycle
        acc = 0.0
        for phase, d in self.steps:
            acc += d
            if u < acc - 1e-9:
                return phase
        return self.steps[0][0]


def default_plan(n_phases: int, green: float) -> FixedTimePlan:
    return FixedTimePlan(tuple((i, green) for i in range(n_phases)))


# -- decisions -----------------------------------------------------------------


@dataclass
class ControllerConfig:
    policy: str = "pwbp"
    constants: Mapping[str, float] | None = None
    plans: Mapping[str, FixedTimePlan] = field(default_factory=dict)
    default_green: float = 20.0
    seed: int = 0
    tie_rtol: float = TIE_RTOL
    samples: int = 0              # >0 enables Monte Carlo expected fluxes
    position_weighted: bool = True

    @classmethod
    def from_mapping(cls, layout: Layout, spec: Mapping, **overrides) -> "ControllerConfig":
        spec = dict(spec)
        spec.update({k: v for k, v in overrides.items() if v is not None})
        plans = {}
        for node, plan in dict(spec.get("fixed_time", {})).items():
            ids = layout.phase_ids[layout.node_index[node]]
            steps = tuple((ids.index(str(p)), float(d)) for p, d in plan["plan"])
            plans[node] = FixedTimePlan(steps, float(plan.get("offset", 0.0)))
        return cls(
            policy=normalize_policy(spec.get("policy", "pwbp")),
            constants=spec.get("constants"),
            plans=plans,
            default_green=float(spec.get("default_green", 20.0)),
            seed=int(spec.get("seed", 0)),
            tie_rtol=float(spec.get("tie_rtol", TIE_RTOL)),
            samples=int(spec.get("samples", 0)),
            position_weighted=bool(spec.get("position_weighted", True)),
        )


@dataclass
class ControlDecision:
    node: str
    phase: str
    phase_index: int
    time: float
    scores: tuple[float, ...]
    tie: bool

    def __post_init__(self):
        if self.scores and self.scores[self.phase_index] < max(self.scores) * (1 - 1e-9):
            raise AssertionError("chosen phase does not maximize the score")


class Controller:
    """Per-node phase selection for one policy."""

    def __init__(self, layout: Layout, config: ControllerConfig):
        self.layout = layout
        self.config = config
        self.policy = normalize_policy(config.policy)
        self.c = _constants(layout, config.constants)
        self.rngs = [substream(config.seed, f"control/{n}") for n in layout.node_ids]
        self.stoch = None
        if config.samples > 0:
            self.stoch = StochasticFD.draw(layout, config.samples,
                                           substream(config.seed, "control/fd-samples"))
        self.plans = []
        for i, n in enumerate(layout.node_ids):
            plan = config.plans.get(n) or default_plan(int(layout.n_phases[i]),
                                                       config.default_green)
            self.plans.append(plan)

    # scores for a set of nodes, evaluated on a frozen snapshot
    def scores(self, state: NetworkState, nodes: Sequence[int], t: float,
               rates: np.ndarray, params: CellParams | None = None) -> list[np.ndarray]:
        lay = self.layout
        rows = np.concatenate([np.arange(lay.row_offset[n], lay.row_offset[n] + lay.n_phases[n])
                               for n in nodes])
        mem = lay.membership[rows]
        if self.policy == "pwbp":
            w = pwbp_weights(lay, state, t, self.c, self.config.position_weighted)
            flux = expected_phase_flux(lay, state, mem, rates, params, self.stoch)
        elif self.policy == "bp":
            w = bp_weights(lay, state, t)
            flux = mem * lay.m_saturation
        elif self.policy == "cabp":
            w = cabp_weights(lay, state, t, params)
            flux = mem * lay.m_saturation
        else:
            raise ValueError("fixed-time control has no scores")
        total = flux @ w
        out, pos = [], 0
        for n in nodes:
            k = int(lay.n_phases[n])
            out.append(total[pos:pos + k])
            pos += k
        return out

    def choose(self, node: int, scores: np.ndarray, t: float) -> ControlDecision:
        best = float(scores.max())
        tol = self.config.tie_rtol * abs(best)
        ties = np.flatnonzero(scores >= best - tol)
        if len(ties) == 1:
            pick = int(ties[0])
        else:
            pick = int(ties[self.rngs[node].integers(len(ties))])
        return ControlDecision(self.layout.node_ids[node], self.layout.phase_ids[node][pick],
                               pick, t, tuple(float(s) for s in scores), len(ties) > 1)

    def select_phase(self, node: str | int, state: NetworkState, rates: np.ndarray | None = None,
                     params: CellParams | None = None, t: float | None = None) -> ControlDecision:
        lay = self.layout
        n = lay.node_index[node] if isinstance(node, str) else int(node)
        t = state.t if t is None else t
        if self.policy == "ft":
            pick = self.plans[n].phase_at(t)
            return ControlDecision(lay.node_ids[n], lay.phase_ids[n][pick], pick, t, (), False)
        if lay.n_phases[n] == 1:
            return ControlDecision(lay.node_ids[n], lay.phase_ids[n][0], 0, t, (0.0,), False)
        rates = np.zeros(lay.Q) if rates is None else rates
        return self.choose(n, self.scores(state, [n], t, rates, params)[0], t)

    def due_nodes(self, t: float, dt: float) -> np.ndarray:
        """Nodes whose cadence boundary k * tau lies in (t - dt, t]."""
        tau = self.layout.node_cadence
        eps = 1e-9
        return np.flatnonzero(np.floor(t / tau + eps) > np.floor((t - dt) / tau + eps))

    def tick(self, state: NetworkState, signal: SignalState, t: float, dt: float,
             rates: np.ndarray | None = None, params: CellParams | None = None,
             audit: list | None = None) -> SignalState:
        """Re-decide phases at nodes on a cadence boundary; others keep their phase."""
        lay = self.layout
        new = signal.copy()
        if self.policy == "ft":
            for n in range(len(lay.node_ids)):
                pick = self.plans[n].phase_at(t)
                if pick != new.active[n]:
                    new.active[n] = pick
                    new.start[n] = t
            return new
        due = [int(n) for n in self.due_nodes(t, dt) if lay.n_phases[n] > 1]
        if not due:
            return new
        rates = np.zeros(lay.Q) if rates is None else rates
        for n, sc in zip(due, self.scores(state, due, t, rates, params)):
            decision = self.choose(n, sc, t)
            if audit is not None:
                audit.append(decision)
            if decision.phase_index != new.active[n]:
                new.active[n] = decision.phase_index
                new.start[n] = t
        return new


def controller_tick(layout: Layout, state: NetworkState, signal: SignalState, t: float,
                    controller: Controller, dt: float | None = None, **kw) -> SignalState:
    return controller.tick(state, signal, t, layout.dt if dt is None else dt, **kw)
