"""Experiment orchestration: single runs, capacity sweeps, incidents and recovery."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .control import Controller, ControllerConfig, ControlDecision, normalize_policy
from .dynamics import (ArrivalProcess, CellParams, Layout, MetricsRecord, delay_rate,
                       initial_signal, initial_state, step)
from .network import ArrivalSpec, ConfigError, Network
from .stability import StabilityReport, Thresholds, build_report, stability_verdict

__all__ = [
    "IncidentSpec", "MetricsSeries", "SweepSpec", "SweepPoint", "SweepResult",
    "run_scenario", "capacity_sweep", "incident_apply", "recovery_experiment",
    "recovery_time", "delay_rate", "with_rates", "worker_count",
]

THREADS_ENV = "PWBP_THREADS"
DELAY_KNEE = 40.0  # s/veh, secondary frontier reporter


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


# -- metrics ---------------------------------------------------------------------


@dataclass
class MetricsSeries:
    """Per-step metrics of one run (columns as numpy arrays)."""

    run_id: str
    time: np.ndarray
    total_vehicles: np.ndarray
    source_queue_total: np.ndarray
    throughput: np.ndarray
    delay_rate: np.ndarray
    lyapunov_V: np.ndarray
    active_phases: list[str]
    arrivals: np.ndarray
    mass_error: np.ndarray
    dt: float
    decisions: list[ControlDecision] = field(default_factory=list)
    min_density: float = 0.0
    max_fill: float = 0.0

    NUMERIC = ("total_vehicles", "source_queue_total", "throughput", "delay_rate", "lyapunov_V")

    def __len__(self) -> int:
        return len(self.time)

    @property
    def total_delay(self) -> float:
        return float(self.delay_rate.sum() * self.dt)

    @property
    def vehicles_served(self) -> float:
        return float(self.throughput.sum() * self.dt)

    @property
    def avg_delay_per_vehicle(self) -> float:
        served = self.vehicles_served
        return self.total_delay / served if served > 0 else (0.0 if self.total_delay == 0 else math.inf)

    def rows(self) -> Iterable[dict]:
        for i in range(len(self.time)):
            yield {
                "time": self.time[i],
                "total_vehicles": self.total_vehicles[i],
                "source_queue_total": self.source_queue_total[i],
                "throughput": self.throughput[i],
                "delay_rate": self.delay_rate[i],
                "lyapunov_V": self.lyapunov_V[i],
                "active_phases": self.active_phases[i] if self.active_phases else "",
            }


# -- incidents ---------------------------------------------------------------------


@dataclass(frozen=True)
class IncidentSpec:
    """Lane blockage on a contiguous cell range of one arc during [start, end)."""

    arc: str
    start: float
    end: float
    lanes_blocked: int
    cells: tuple[int, int] | None = None   # [first, stop) within the arc; None = whole arc

    def cell_range(self, layout: Layout) -> range:
        n = int(layout.n_cells[layout.arc_index[self.arc]])
        lo, hi = self.cells if self.cells is not None else (0, n)
        return range(lo, hi)

    def validate(self, layout: Layout, horizon: float | None = None) -> None:
        if self.arc not in layout.arc_index:
            raise ConfigError(f"incident on unknown physical arc {self.arc!r}", arc=self.arc)
        lanes = int(layout.lanes[layout.arc_index[self.arc]])
        if not 0 <= self.lanes_blocked <= lanes:
            raise ConfigError(f"incident blocks {self.lanes_blocked} of {lanes} lanes", arc=self.arc)
        if not self.start < self.end:
            raise ConfigError("incident must end after it starts", arc=self.arc)
        if horizon is not None and (self.start < 0 or self.end > horizon + 1e-9):
            raise ConfigError("incident window outside the horizon", arc=self.arc)
        r = self.cell_range(layout)
        n = int(layout.n_cells[layout.arc_index[self.arc]])
        if not (0 <= r.start < r.stop <= n):
            raise ConfigError(f"incident cell range {self.cells} outside 0..{n}", arc=self.arc)

    @classmethod
    def from_mapping(cls, spec: Mapping[str, Any]) -> "IncidentSpec":
        cells = spec.get("cells")
        return cls(arc=str(spec["arc"]), start=float(spec["start"]), end=float(spec["end"]),
                   lanes_blocked=int(spec["lanes_blocked"]),
                   cells=tuple(int(c) for c in cells) if cells is not None else None)


def check_incidents(layout: Layout, incidents: Sequence[IncidentSpec],
                    horizon: float | None = None) -> None:
    """Reject incidents that overlap in both cells and time."""
    for inc in incidents:
        inc.validate(layout, horizon)
    for i, a in enumerate(incidents):
        for b in incidents[i + 1:]:
            if a.arc != b.arc:
                continue
            ra, rb = a.cell_range(layout), b.cell_range(layout)
            cells = ra.start < rb.stop and rb.start < ra.stop
            times = a.start < b.end and b.start < a.end
            if cells and times:
                raise ConfigError(f"overlapping incidents on arc {a.arc!r}", arc=a.arc)


def incident_apply(layout: Layout, incidents: IncidentSpec | Sequence[IncidentSpec],
                   t: float, base: CellParams | None = None) -> CellParams:
    """Effective cell parameters at time ``t``.

    Outside every incident window the baseline object itself is returned.
    """
    base = base or layout.base
    if isinstance(incidents, IncidentSpec):
        incidents = [incidents]
    live = [i for i in incidents if i.start <= t < i.end and i.lanes_blocked > 0]
    if not live:
        return base
    out = base.copy()
    for inc in live:
        a = layout.arc_index[inc.arc]
        r = inc.cell_range(layout)
        cells = slice(layout.offsets[a] + r.start, layout.offsets[a] + r.stop)
        keep = 1.0 - inc.lanes_blocked / float(layout.lanes[a])
        out.jam[cells] *= keep
        out.capacity[cells] *= keep
    return out


# -- arrival overrides --------------------------------------------------------------


def _fractions(spec: ArrivalSpec) -> dict[str, float]:
    base = {b: spec.rate(b, 0.0) for b in spec.profiles}
    total = sum(base.values())
    if total <= 0:
        return {b: 1.0 / len(base) for b in base}
    return {b: v / total for b, v in base.items()}


def with_rates(g: Network, rates: Mapping[str, Any] | float,
               process: str | None = None) -> Network:
    """Copy of ``g`` with per-source total arrival rates replaced.

    ``rates`` maps source id -> total rate (veh/s) or a profile
    ``[[t, rate], ...]``; a bare float applies to every source. The split of
    each source's total among its movements keeps the configured proportions.
    """
    if not isinstance(rates, Mapping):
        rates = {s: rates for s in g.arrivals}
    unknown = set(rates) - set(g.arrivals)
    if unknown:
        raise ConfigError(f"unknown source arcs {sorted(unknown)}")
    arrivals = dict(g.arrivals)
    for s, value in rates.items():
        spec = g.arrivals[s]
        frac = _fractions(spec)
        if isinstance(value, (int, float)):
            profile = ((0.0, float(value)),)
        else:
            profile = tuple((float(t), float(r)) for t, r in value)
        profiles = {b: tuple((t, r * f) for t, r in profile) for b, f in frac.items()}
        arrivals[s] = ArrivalSpec(s, profiles, process or spec.process)
    if process is not None:
        for s, spec in arrivals.items():
            arrivals[s] = replace(spec, process=process)
    return replace(g, arrivals=arrivals)


# -- single run --------------------------------------------------------------------------


def _controller_config(layout: Layout, controller, seed: int) -> ControllerConfig:
    if isinstance(controller, ControllerConfig):
        return controller
    spec = dict(layout.network.controller)
    spec["seed"] = seed
    if isinstance(controller, str):
        spec["policy"] = controller
    elif isinstance(controller, Mapping):
        spec.update(controller)
    return ControllerConfig.from_mapping(layout, spec)


def run_scenario(g: Network, controller: str | Mapping | ControllerConfig | None = None,
                 arrivals: Mapping[str, Any] | float | None = None, horizon: float | None = None,
                 seed: int = 0, incidents: Sequence[IncidentSpec] = (), *,
                 lyapunov_stride: int = 1, audit: bool = False, record_phases: bool = True,
                 thresholds: Thresholds = Thresholds(), run_id: str | None = None,
                 check: bool = True) -> tuple[MetricsSeries, StabilityReport]:
    """Simulate ``g`` under one controller and return per-step metrics plus a verdict.

    ``arrivals`` overrides source rates (see :func:`with_rates`). Deterministic
    given ``seed``: arrival draws and tie-breaks use substreams keyed by
    entity id.
    """
    if arrivals is not None:
        g = with_rates(g, arrivals)
    layout = Layout(g)
    horizon = g.horizon if horizon is None else float(horizon)
    incidents = list(incidents)
    check_incidents(layout, incidents, horizon)
    cfg = _controller_config(layout, controller, seed)
    ctrl = Controller(layout, cfg)
    proc = ArrivalProcess(layout, seed)
    dt = g.dt
    n_steps = int(round(horizon / dt))
    state = initial_state(layout)
    signal = initial_signal(layout)
    c_lyap = ctrl.c

    cols = {k: np.empty(n_steps) for k in ("time", "total_vehicles", "source_queue_total",
                                           "throughput", "delay_rate", "lyapunov_V",
                                           "arrivals", "mass_error")}
    phases: list[str] = []
    decisions: list[ControlDecision] = [] if audit else None
    min_rho, max_fill = 0.0, 0.0
    stride = max(1, int(lyapunov_stride)) if lyapunov_stride else 0
    for i in range(n_steps):
        t = i * dt
        state.t = t
        params = incident_apply(layout, incidents, t) if incidents else layout.base
        rates = proc.rates(t)
        signal = ctrl.tick(state, signal, t, dt, rates, params, decisions)
        draws = proc.draw(t, dt)
        want_v = bool(stride) and ((i + 1) % stride == 0 or i == n_steps - 1)
        res = step(layout, state, signal, dt, draws, params, c_lyap, compute_lyapunov=want_v)
        state = res.state
        rec: MetricsRecord = res.record
        cols["time"][i] = i * dt + dt
        cols["total_vehicles"][i] = rec.total_vehicles
        cols["source_queue_total"][i] = rec.source_queue_total
        cols["throughput"][i] = rec.throughput
        cols["delay_rate"][i] = rec.delay_rate
        cols["lyapunov_V"][i] = rec.lyapunov_V
        cols["arrivals"][i] = rec.arrivals
        cols["mass_error"][i] = rec.mass_error
        if record_phases:
            phases.append(rec.active_phases)
        if check:
            k = state.rho.sum(axis=0)
            min_rho = min(min_rho, float(state.rho.min()))
            max_fill = max(max_fill, float((k / layout.base.jam).max()) if k.size else 0.0)
    series = MetricsSeries(run_id=run_id or f"{cfg.policy}-seed{seed}", dt=dt,
                           active_phases=phases, decisions=decisions or [],
                           min_density=min_rho, max_fill=max_fill, **cols)
    V = series.lyapunov_V
    keep = ~np.isnan(V)
    report = build_report(series.time, V[keep] if keep.any() else [], series.total_vehicles,
                          series.source_queue_total, thresholds)
    return series, report


# -- capacity sweep -------------------------------------------------------------------------


@dataclass
class SweepSpec:
    """Bisection on the demand scale along one or more ray directions.

    ``rays`` map source id -> weight; the tested rates are ``scale * weight``
    (veh/s). ``"uniform"`` means weight 1 on every source.
    """

    rays: Sequence[Mapping[str, float] | str] = ("uniform",)
    lo: float = 0.0
    hi: float = 1.0
    tol: float = 0.01
    horizon: float = 7200.0
    seeds: Sequence[int] = (0, 1, 2)
    policy: str = "pwbp"
    retries: int = 1
    thresholds: Thresholds = Thresholds()
    process: str | None = None
    controller: Mapping[str, Any] | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("sweep tolerance must be positive")
        if len(self.seeds) < 1:
            raise ValueError("at least one replication is required")
        if not self.hi > self.lo >= 0:
            raise ValueError("need 0 <= lo < hi")

    @classmethod
    def from_mapping(cls, spec: Mapping[str, Any]) -> "SweepSpec":
        spec = dict(spec)
        th = spec.pop("thresholds", None)
        if th:
            spec["thresholds"] = Thresholds(**th)
        if "seeds" in spec:
            spec["seeds"] = tuple(int(s) for s in spec["seeds"])
        elif "replications" in spec:
            spec["seeds"] = tuple(range(int(spec.pop("replications"))))
        return cls(**spec)


@dataclass
class SweepPoint:
    ray: int
    scale: float
    verdict: str
    slope: float
    avg_delay: float
    verdicts: tuple[str, ...] = ()
    horizon: float = 0.0
    flagged: bool = False


@dataclass
class SweepResult:
    policy: str
    frontier: list[float]             # largest scale judged stable, per ray
    upper: list[float]                # smallest scale judged unstable, per ray
    points: list[SweepPoint]
    delay_knee: list[float | None]    # smallest tested scale with avg delay > 40 s/veh

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "frontier": self.frontier,
            "upper": self.upper,
            "delay_knee": self.delay_knee,
            "points": [p.__dict__ for p in self.points],
        }


def _ray_rates(g: Network, ray: Mapping[str, float] | str, scale: float) -> dict[str, float]:
    if ray == "uniform":
        return {s: scale for s in g.arrivals}
    return {s: scale * float(ray.get(s, 0.0)) for s in g.arrivals}


def _job(args) -> tuple[str, float, float]:
    g, controller, rates, horizon, seed, thresholds = args
    series, _ = run_scenario(g, controller, rates, horizon, seed, lyapunov_stride=0,
                             record_phases=False, check=False)
    verdict, slope = stability_verdict(series.time, series.source_queue_total,
                                       series.total_vehicles, thresholds)
    return verdict, slope, series.avg_delay_per_vehicle


def run_jobs(fn: Callable, jobs: Sequence, workers: int | None = None) -> list:
    """Map ``fn`` over ``jobs`` in order; parallel when more than one worker."""
    n = worker_count(workers)
    if n == 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _majority(verdicts: Sequence[str]) -> str:
    counts = {v: verdicts.count(v) for v in ("stable", "unstable", "inconclusive")}
    best = max(counts.values())
    if counts["unstable"] == best:
        return "unstable"
    if counts["stable"] == best and counts["stable"] > len(verdicts) / 2:
        return "stable"
    return "inconclusive" if counts["inconclusive"] == best else "unstable"


def evaluate_point(g: Network, spec: SweepSpec, ray, scale: float, ray_index: int = 0,
                   workers: int | None = None) -> SweepPoint:
    """Majority verdict at one demand scale, doubling the horizon on inconclusive votes."""
    controller = dict(spec.controller or {})
    controller["policy"] = spec.policy
    net = with_rates(g, _ray_rates(g, ray, scale), spec.process)
    horizon = spec.horizon
    for attempt in range(spec.retries + 1):
        jobs = [(net, controller, None, horizon, s, spec.thresholds) for s in spec.seeds]
        out = run_jobs(_job, jobs, workers)
        verdicts = tuple(v for v, _, _ in out)
        verdict = _majority(list(verdicts))
        if verdict != "inconclusive" or attempt == spec.retries:
            break
        horizon *= 2
    flagged = verdict == "inconclusive"
    return SweepPoint(ray=ray_index, scale=scale, verdict="unstable" if flagged else verdict,
                      slope=float(np.median([s for _, s, _ in out])),
                      avg_delay=float(np.median([d for _, _, d in out])),
                      verdicts=verdicts, horizon=horizon, flagged=flagged)


def capacity_sweep(g: Network, spec: SweepSpec, workers: int | None = None) -> SweepResult:
    """Bisect the demand scale along each ray between stable and unstable verdicts.

    Inconclusive points that survive the retry budget count as unstable and
    are flagged. The search only ever tests scales between the current
    stable and unstable brackets, so verdicts are monotone in scale.
    """
    frontier, upper, points, knees = [], [], [], []
    for r, ray in enumerate(spec.rays):
        lo, hi = spec.lo, spec.hi
        ray_points = []
        top = evaluate_point(g, spec, ray, hi, r, workers)
        ray_points.append(top)
        if top.verdict == "stable":
            frontier.append(hi)
            upper.append(math.inf)
        else:
            while hi - lo > spec.tol:
                mid = 0.5 * (lo + hi)
                pt = evaluate_point(g, spec, ray, mid, r, workers)
                ray_points.append(pt)
                if pt.verdict == "stable":
                    lo = mid
                else:
                    hi = mid
            frontier.append(lo)
            upper.append(hi)
        over = sorted(p.scale for p in ray_points if p.avg_delay > DELAY_KNEE)
        knees.append(over[0] if over else None)
        points.extend(ray_points)
    return SweepResult(normalize_policy(spec.policy), frontier, upper, points, knees)


# -- recovery ------------------------------------------------------------------------


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average, shrinking at the ends."""
    values = np.asarray(values, dtype=float)
    if window <= 1 or len(values) == 0:
        return values.copy()
    c = np.concatenate([[0.0], np.cumsum(values)])
    i = np.arange(len(values))
    lo = np.maximum(0, i - window // 2)
    hi = np.minimum(len(values), i + window // 2 + 1)
    return (c[hi] - c[lo]) / (hi - lo)


def recovery_time(times: np.ndarray, delay: np.ndarray, disturb_start: float,
                  disturb_end: float, tolerance: float = 0.10, smoothing: float = 300.0,
                  baseline_window: float = 1800.0) -> float:
    """Seconds after ``disturb_end`` until smoothed delay is within ``tolerance``
    of the pre-disturbance mean; ``inf`` if that never happens."""
    times = np.asarray(times, dtype=float)
    dt = times[1] - times[0] if len(times) > 1 else 1.0
    sm = smooth(delay, int(round(smoothing / dt)))
    w = min(baseline_window, disturb_start / 2)
    pre = (times > disturb_start - w) & (times <= disturb_start)
    baseline = float(np.mean(np.asarray(delay)[pre])) if pre.any() else 0.0
    after = np.flatnonzero((times >= disturb_end) & (sm <= (1 + tolerance) * baseline + 1e-12))
    return float(times[after[0]] - disturb_end) if len(after) else math.inf


@dataclass
class RecoveryResult:
    policy: str
    recovery_time: float
    baseline_delay: float
    avg_delay: float
    final_queue: float
    series: MetricsSeries | None = None

    def to_dict(self) -> dict:
        return {"policy": self.policy, "recovery_time": self.recovery_time,
                "baseline_delay": self.baseline_delay, "avg_delay": self.avg_delay,
                "final_queue": self.final_queue}


def _baseline(series: MetricsSeries, start: float, window: float = 1800.0) -> float:
    w = min(window, start / 2)
    pre = (series.time > start - w) & (series.time <= start)
    return float(series.delay_rate[pre].mean()) if pre.any() else 0.0


def recovery_experiment(g: Network, controllers: Sequence[str | Mapping],
                        base_demand: float, peak_demand: float,
                        peak_window: tuple[float, float], horizon: float | None = None,
                        seed: int = 0, keep_series: bool = False,
                        workers: int | None = None) -> list[RecoveryResult]:
    """Uniform boundary demand stepping from base to peak and back.

    Recovery time is measured from the end of the peak. When the peak does
    not exceed the base demand there is nothing to recover from and the
    recovery time is 0.
    """
    t0, t1 = peak_window
    profile = [[0.0, base_demand], [t0, peak_demand], [t1, base_demand]]
    rates = {s: profile for s in g.arrivals}
    jobs = [(g, c, rates, horizon, seed, (), t0, t1, keep_series) for c in controllers]
    return run_jobs(_recovery_job, jobs, workers) if peak_demand > base_demand else [
        RecoveryResult(normalize_policy(c if isinstance(c, str) else c["policy"]), 0.0,
                       math.nan, math.nan, math.nan) for c in controllers]


def incident_experiment(g: Network, controllers: Sequence[str | Mapping], demand: float,
                        incident: IncidentSpec, horizon: float | None = None, seed: int = 0,
                        keep_series: bool = False,
                        workers: int | None = None) -> list[RecoveryResult]:
    """Constant uniform demand with one incident; recovery measured from clearance."""
    rates = {s: demand for s in g.arrivals}
    jobs = [(g, c, rates, horizon, seed, (incident,), incident.start, incident.end, keep_series)
            for c in controllers]
    return run_jobs(_recovery_job, jobs, workers)


def _recovery_job(args) -> RecoveryResult:
    g, controller, rates, horizon, seed, incidents, t0, t1, keep = args
    series, _ = run_scenario(g, controller, rates, horizon, seed, incidents,
                             lyapunov_stride=0, record_phases=False, check=False)
    policy = normalize_policy(controller if isinstance(controller, str) else controller["policy"])
    return RecoveryResult(
        policy=policy,
        recovery_time=recovery_time(series.time, series.delay_rate, t0, t1),
        baseline_delay=_baseline(series, t0),
        avg_delay=series.avg_delay_per_vehicle,
        final_queue=float(series.source_queue_total[-1]),
        series=series if keep else None,
    )


# -- Riemann problem -----------------------------------------------------------------


@dataclass
class RiemannResult:
    cell_length: float
    shock_speed: float
    mean_position_error: float   # m, time-averaged over the second half of the run
    final_position_error: float  # m
    density: np.ndarray


def riemann_experiment(g: Network, arc: str, rho_left: float, rho_right: float,
                       duration: float) -> RiemannResult:
    """Evolve a single-commodity jump on ``arc`` with transmissive ends.

    Position error is the L1 distance between the simulated profile and the
    exact cell averages of the Rankine-Hugoniot shock, divided by the jump.
    """
    from .dynamics import cell_update, fundamental_flux, supply_fn

    a = g.arcs[arc]
    fd, dx, n = a.fd, a.cell_length, a.cell_count
    centres = (np.arange(n) + 0.5) * dx
    edges = np.arange(n + 1) * dx
    x0 = a.length / 2
    rho = np.where(centres < x0, rho_left, rho_right)[None, :]
    jump = rho_right - rho_left
    speed = (fundamental_flux(fd, rho_right, a.lanes) - fundamental_flux(fd, rho_left, a.lanes)) / jump
    steps = int(round(duration / g.dt))
    errs = []
    for k in range(steps):
        inflow = min(fd.v_free * rho_left, a.capacity, supply_fn(fd, rho[0, 0], a.lanes))
        outflow = fundamental_flux(fd, rho[0, -1], a.lanes)
        rho = cell_update(a, rho, [inflow], [outflow], g.dt)
        t = (k + 1) * g.dt
        if t >= duration / 2 - 1e-9:
            frac = np.clip((x0 + speed * t - edges[:-1]) / dx, 0.0, 1.0)
            exact = rho_left * frac + rho_right * (1 - frac)
            errs.append(float(np.abs(rho[0] - exact).sum() * dx / abs(jump)))
    return RiemannResult(dx, speed, float(np.mean(errs)), errs[-1], rho[0])
